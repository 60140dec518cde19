#include "doctest.h"

#include <cmath>

#include "stain_fixtures.hpp"
#include "stx/stain.hpp"
#include "stx/parallel.hpp"
#include "test_util.hpp"

using namespace stx;
using namespace stx::stain;
using stx::testing::error_kind_of;
using stx::testing::kReferenceStains;
using stx::testing::synthetic_stained_image;

namespace {
double mean_abs_diff(const Image& a, const Image& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) d += std::abs(int(a.rgb[i]) - int(b.rgb[i]));
    return d / static_cast<double>(a.rgb.size());
}

double best_match_angle(const StainMatrix& got, const StainMatrix& want) {
    const double direct = std::max(angle_degrees(got[0], want[0]), angle_degrees(got[1], want[1]));
    const double swapped = std::max(angle_degrees(got[0], want[1]), angle_degrees(got[1], want[0]));
    return std::min(direct, swapped);
}
}  // namespace

TEST_CASE("optical density conversion") {
    Image img(2, 1);
    img.set(0, 0, {255, 255, 255});
    img.set(1, 0, {0, 0, 0});
    const auto od = rgb_to_od(img);
    for (int k = 0; k < 3; ++k) {
        CHECK(od.od[k] == 0.0);
        CHECK(od.od[3 + k] == doctest::Approx(std::log(255.0)).epsilon(1e-15));
    }
    CHECK(std::log(255.0) == doctest::Approx(5.5413).epsilon(1e-4));
}

TEST_CASE("optical density round trip is exact for every channel value >= 1") {
    Image img(255, 1);
    for (int v = 1; v <= 255; ++v) img.set(v - 1, 0, {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(256 - v)});
    CHECK(od_to_rgb(rgb_to_od(img)) == img);
}

TEST_CASE("sparse coding recovers an exact stain vector at zero sparsity") {
    const auto c = sparse_code(kReferenceStains[0], kReferenceStains, 0.0, 5000, 0.0);
    CHECK(std::abs(c[0] - 1.0) < 1e-3);
    CHECK(std::abs(c[1]) < 1e-3);

    const auto zero = sparse_code({0, 0, 0}, kReferenceStains, 0.1, 100, 1e-6);
    CHECK(zero[0] == 0.0);
    CHECK(zero[1] == 0.0);
}

TEST_CASE("sparse coding objective never increases and codes stay non-negative") {
    Rng rng(9);
    for (int trial = 0; trial < 500; ++trial) {
        const Vec3 v{rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2)};
        const StainMatrix w{testing::unit3({rng.uniform(0.01, 1), rng.uniform(0.01, 1), rng.uniform(0.01, 1)}),
                            testing::unit3({rng.uniform(0.01, 1), rng.uniform(0.01, 1), rng.uniform(0.01, 1)})};
        const double lambda = trial % 2 ? 0.1 : 0.01;
        std::vector<double> trace;
        const auto c = sparse_code(v, w, lambda, 100, 0.0, {rng.uniform(0, 2), rng.uniform(0, 2)}, &trace);
        CHECK(c[0] >= 0.0);
        CHECK(c[1] >= 0.0);
        for (std::size_t i = 1; i < trace.size(); ++i) REQUIRE(trace[i] <= trace[i - 1] + 1e-9);
    }
}

TEST_CASE("stain basis recovery on synthetic two-stain mixtures") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto img = synthetic_stained_image(256, kReferenceStains, seed);
        const auto profile = estimate_stain_profile(rgb_to_od(img), StainParams{});
        CHECK(best_match_angle(profile.stain_matrix, kReferenceStains) < 5.0);
        for (const auto& row : profile.stain_matrix) {
            double n2 = 0;
            for (double x : row) {
                CHECK(x >= 0.0);
                n2 += x * x;
            }
            CHECK(std::abs(std::sqrt(n2) - 1.0) <= 1e-9);
        }
        // hematoxylin (larger blue OD) first
        CHECK(profile.stain_matrix[0][2] >= profile.stain_matrix[1][2]);
    }
}

TEST_CASE("single-stain image recovers the active stain as one atom") {
    const auto img = synthetic_stained_image(128, kReferenceStains, 4, 1.0, false);
    const auto profile = estimate_stain_profile(rgb_to_od(img), StainParams{});
    const double best = std::min(angle_degrees(profile.stain_matrix[0], kReferenceStains[0]),
                                 angle_degrees(profile.stain_matrix[1], kReferenceStains[0]));
    CHECK(best < 5.0);
}

TEST_CASE("profile estimation is deterministic and rejects blank images") {
    const auto img = synthetic_stained_image(96, kReferenceStains, 5);
    const auto a = estimate_stain_profile(rgb_to_od(img), StainParams{});
    const auto b = estimate_stain_profile(rgb_to_od(img), StainParams{});
    CHECK(a.stain_matrix == b.stain_matrix);
    CHECK(a.max_concentration == b.max_concentration);

    Image blank(64, 64);
    CHECK(error_kind_of([&] { estimate_stain_profile(rgb_to_od(blank), StainParams{}); }) == ErrorKind::InsufficientTissue);
}

TEST_CASE("concentrations are non-negative and independent of thread count") {
    const auto img = synthetic_stained_image(64, kReferenceStains, 6);
    const auto od = rgb_to_od(img);
    set_thread_count(1);
    const auto one = get_concentrations(od, kReferenceStains, StainParams{});
    set_thread_count(4);
    const auto four = get_concentrations(od, kReferenceStains, StainParams{});
    set_thread_count(1);
    CHECK(one.c == four.c);
    CHECK(one.residual == four.residual);
    for (double c : one.c) CHECK(c >= 0.0);
}

TEST_CASE("normalization") {
    const auto img = synthetic_stained_image(256, kReferenceStains, 7);
    StainParams params;
    const auto profile = estimate_stain_profile(rgb_to_od(img), params);

    SUBCASE("self-normalization is near identity") {
        const auto out = normalize_to_target(img, profile, profile, params);
        CHECK(mean_abs_diff(out, img) <= 5.0);
        // background stays white
        for (std::size_t i = 0; i < img.pixel_count(); ++i) {
            if (img.rgb[3 * i] == 255 && img.rgb[3 * i + 1] == 255 && img.rgb[3 * i + 2] == 255)
                for (int k = 0; k < 3; ++k) REQUIRE(out.rgb[3 * i + k] >= 250);
        }
    }

    SUBCASE("doubling concentrations does not change the normalized output") {
        const auto target_img = synthetic_stained_image(256, kReferenceStains, 8);
        const auto target = estimate_stain_profile(rgb_to_od(target_img), params);
        const auto doubled = synthetic_stained_image(256, kReferenceStains, 7, 2.0);
        const auto doubled_profile = estimate_stain_profile(rgb_to_od(doubled), params);
        const auto a = normalize_to_target(img, profile, target, params);
        const auto b = normalize_to_target(doubled, doubled_profile, target, params);
        CHECK(mean_abs_diff(a, b) <= 5.0);
    }

    SUBCASE("zero source concentration is degenerate") {
        auto bad = profile;
        bad.max_concentration[1] = 0.0;
        CHECK(error_kind_of([&] { normalize_to_target(img, bad, profile, params); }) == ErrorKind::DegenerateStain);
    }
}

TEST_CASE("profile json round trip") {
    StainProfile p{kReferenceStains, {1.25, 0.75}};
    const auto back = profile_from_json(to_json(p));
    CHECK(back.stain_matrix == p.stain_matrix);
    CHECK(back.max_concentration == p.max_concentration);
}

namespace {
// Independent gray-level lightness: L* from luminance of an achromatic pixel.
double gray_lightness(int v) {
    const double c = v / 255.0;
    const double y = c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
    return y > 216.0 / 24389.0 ? 116.0 * std::cbrt(y) - 16.0 : 24389.0 / 27.0 * y;
}
int gray_from_lightness(double L) {
    const double fy = (L + 16.0) / 116.0;
    const double y = fy * fy * fy > 216.0 / 24389.0 ? fy * fy * fy : L * 27.0 / 24389.0;
    const double c = y <= 0.0031308 ? 12.92 * y : 1.055 * std::pow(y, 1.0 / 2.4) - 0.055;
    return static_cast<int>(std::lround(c * 255.0));
}
}  // namespace

TEST_CASE("luminosity standardization") {
    SUBCASE("bright image is unchanged") {
        const auto img = synthetic_stained_image(32, kReferenceStains, 2);  // > 5% pure white background
        CHECK(standardize_luminosity(img) == img);
    }
    SUBCASE("uniform dark gray is lifted to white") {
        Image img(10, 10, {90, 90, 90});
        const auto out = standardize_luminosity(img);
        for (auto v : out.rgb) CHECK(v == 255);
    }
    SUBCASE("two-level gray scales lightness by 100 / p95") {
        Image img(10, 10, {140, 140, 140});
        for (int x = 0; x < 10; ++x) img.set(x, 0, {60, 60, 60});
        const auto out = standardize_luminosity(img);
        const double scale = 100.0 / gray_lightness(140);
        const int expected_dark = gray_from_lightness(gray_lightness(60) * scale);
        CHECK(out.pixel(0, 5) == Rgb{255, 255, 255});
        for (int x = 0; x < 10; ++x)
            for (int k = 0; k < 3; ++k) CHECK(std::abs(int(out.pixel(x, 0)[k]) - expected_dark) <= 1);
    }
    SUBCASE("output always within 8-bit range for random images") {
        Rng rng(3);
        Image img(20, 20);
        for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.below(256));
        const auto out = standardize_luminosity(img);
        CHECK(out.rgb.size() == img.rgb.size());
    }
}
