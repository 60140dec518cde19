#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "stx/patches.hpp"
#include "test_util.hpp"

using namespace stx;
using namespace stx::patches;
using stx::testing::error_kind_of;
using stx::testing::TempDir;

namespace {
ingest::SpotRecord spot(const std::string& id, int x, int y) { return {id, 0, 0, x, y, "P", "S"}; }

PatchTensor random_tensor(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    PatchTensor t{w, h, std::vector<double>(3 * w * h)};
    for (auto& v : t.values) v = rng.uniform(-2, 2);
    return t;
}

Patch uniform_patch(int size, Rgb color) { return Patch{"s", "S", "P", 0, 0, Image(size, size, color)}; }
}  // namespace

TEST_CASE("default patch geometry and white rule") {
    PatchConfig cfg;
    CHECK(cfg.width == 224);
    CHECK(cfg.height == 224);
    CHECK(cfg.white_channel_min == 200);
    CHECK(cfg.white_fraction_max == 0.5);
}

TEST_CASE("extraction centers windows on spots and skips out-of-bounds spots") {
    Image img(224, 224);
    for (int y = 0; y < 224; ++y)
        for (int x = 0; x < 224; ++x) img.set(x, y, {static_cast<std::uint8_t>(x), static_cast<std::uint8_t>(y), 7});
    const auto ex = extract_patches(img, {spot("a", 112, 112), spot("b", 10, 10)}, PatchConfig{});
    REQUIRE(ex.patches.size() == 1);
    CHECK(ex.out_of_bounds == 1);
    CHECK(ex.patches[0].origin_x == 0);
    CHECK(ex.patches[0].origin_y == 0);
    CHECK(ex.patches[0].pixels == img);

    PatchConfig small{4, 2, 200, 0.5};
    const auto ex2 = extract_patches(img, {spot("c", 50, 60)}, small);
    REQUIRE(ex2.patches.size() == 1);
    CHECK(ex2.patches[0].origin_x == 48);
    CHECK(ex2.patches[0].origin_y == 59);
    CHECK(ex2.patches[0].pixels.pixel(3, 1) == Rgb{51, 60, 7});
}

TEST_CASE("extraction does not depend on spot order") {
    Image img(64, 64, {10, 20, 30});
    std::vector<ingest::SpotRecord> spots{spot("c", 30, 30), spot("a", 20, 20), spot("b", 40, 40), spot("z", 2, 2)};
    PatchConfig cfg{16, 16, 200, 0.5};
    const auto a = extract_patches(img, spots, cfg);
    std::reverse(spots.begin(), spots.end());
    const auto b = extract_patches(img, spots, cfg);
    REQUIRE(a.patches.size() == b.patches.size());
    for (std::size_t i = 0; i < a.patches.size(); ++i) {
        CHECK(a.patches[i].key() == b.patches[i].key());
        CHECK(a.patches[i].pixels == b.patches[i].pixels);
    }
    CHECK(a.out_of_bounds == b.out_of_bounds);
}

TEST_CASE("white fraction and strict rejection") {
    PatchConfig cfg;
    CHECK(white_fraction(uniform_patch(8, {255, 255, 255}), cfg) == 1.0);
    CHECK_FALSE(is_informative(uniform_patch(8, {255, 255, 255}), cfg));
    CHECK(white_fraction(uniform_patch(8, {0, 0, 0}), cfg) == 0.0);
    CHECK(is_informative(uniform_patch(8, {0, 0, 0}), cfg));

    auto half = uniform_patch(8, {0, 0, 0});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 8; ++x) half.pixels.set(x, y, {200, 200, 200});
    CHECK(white_fraction(half, cfg) == 0.5);
    CHECK(is_informative(half, cfg));
    half.pixels.set(0, 4, {255, 201, 200});
    CHECK(white_fraction(half, cfg) > 0.5);
    CHECK_FALSE(is_informative(half, cfg));

    // a single channel below the threshold is not white
    CHECK(white_fraction(uniform_patch(4, {255, 199, 255}), cfg) == 0.0);
}

TEST_CASE("augmentation group identities") {
    const auto t = random_tensor(5, 5, 1);
    CHECK(apply_augment(t, AugmentPlan{}) == t);
    CHECK(hflip(hflip(t)) == t);
    CHECK(vflip(vflip(t)) == t);
    CHECK(rot90(rot90(rot90(rot90(t)))) == t);
    // rot90 twice equals both flips
    CHECK(rot90(rot90(t)) == hflip(vflip(t)));

    const auto r = random_tensor(4, 3, 2);
    CHECK(rot90(r).width == 3);
    CHECK(rot90(r).height == 4);
}

TEST_CASE("augmentation permutes values and is deterministic per rng state") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto t = random_tensor(6, 6, seed + 100);
        Rng a(seed), b(seed);
        const auto x = augment(t, a);
        const auto y = augment(t, b);
        CHECK(x == y);
        auto sorted_in = t.values, sorted_out = x.values;
        std::sort(sorted_in.begin(), sorted_in.end());
        std::sort(sorted_out.begin(), sorted_out.end());
        CHECK(sorted_in == sorted_out);
    }
}

TEST_CASE("augmentation reaches all eight dihedral images") {
    const auto t = random_tensor(3, 3, 5);
    std::vector<PatchTensor> seen;
    for (int bits = 0; bits < 8; ++bits) {
        const auto out = apply_augment(t, {bool(bits & 1), bool(bits & 2), bool(bits & 4)});
        if (std::find(seen.begin(), seen.end(), out) == seen.end()) seen.push_back(out);
    }
    CHECK(seen.size() == 8);
}

TEST_CASE("channel statistics") {
    SUBCASE("uniform patch gets std substituted by 1") {
        const auto s = compute_channel_stats({uniform_patch(4, {51, 51, 51})});
        for (int c = 0; c < 3; ++c) {
            CHECK(s.mean[c] == doctest::Approx(0.2));
            CHECK(s.std[c] == 1.0);
            CHECK(s.substituted[c]);
        }
    }
    SUBCASE("values 0 and 255 in equal parts give mean 0.5 and std 0.5") {
        const auto s = compute_channel_stats({uniform_patch(4, {0, 0, 0}), uniform_patch(4, {255, 255, 255})});
        for (int c = 0; c < 3; ++c) {
            CHECK(s.mean[c] == doctest::Approx(0.5).epsilon(1e-15));
            CHECK(s.std[c] == doctest::Approx(0.5).epsilon(1e-15));
        }
    }
    SUBCASE("order independent") {
        Rng rng(4);
        std::vector<Patch> ps;
        for (int i = 0; i < 5; ++i) {
            auto p = uniform_patch(6, {0, 0, 0});
            for (auto& v : p.pixels.rgb) v = static_cast<std::uint8_t>(rng.below(256));
            ps.push_back(p);
        }
        const auto a = compute_channel_stats(ps);
        std::reverse(ps.begin(), ps.end());
        const auto b = compute_channel_stats(ps);
        CHECK(a.mean == b.mean);
        CHECK(a.std == b.std);
    }
    CHECK(error_kind_of([] { compute_channel_stats(std::vector<Patch>{}); }) == ErrorKind::Argument);
}

TEST_CASE("normalized training tensors have zero mean and unit variance") {
    Rng rng(12);
    std::vector<Patch> ps;
    for (int i = 0; i < 6; ++i) {
        auto p = uniform_patch(7, {0, 0, 0});
        for (auto& v : p.pixels.rgb) v = static_cast<std::uint8_t>(rng.below(256));
        ps.push_back(p);
    }
    const auto stats = compute_channel_stats(ps);
    for (int c = 0; c < 3; ++c) {
        double sum = 0, ss = 0;
        std::size_t n = 0;
        for (const auto& p : ps) {
            const auto t = to_tensor(p.pixels, stats);
            for (int y = 0; y < 7; ++y)
                for (int x = 0; x < 7; ++x) {
                    sum += t.at(c, y, x);
                    ss += t.at(c, y, x) * t.at(c, y, x);
                    ++n;
                }
        }
        const double mean = sum / n;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(std::sqrt(ss / n - mean * mean) - 1.0) < 1e-6);
    }

    ChannelStats at_mean{{0.2, 0.2, 0.2}, {0.1, 0.1, 0.1}, {}};
    const auto t = to_tensor(Image(1, 1, {51, 51, 51}), at_mean);
    for (double v : t.values) CHECK(std::abs(v) < 1e-12);

    ChannelStats bad;
    bad.std[1] = 0.0;
    CHECK(error_kind_of([&] { to_tensor(Image(1, 1), bad); }) == ErrorKind::Argument);
}

TEST_CASE("patch store round trip") {
    TempDir dir;
    PatchStore store;
    store.config = PatchConfig{4, 4, 200, 0.5};
    Rng rng(1);
    for (int i = 0; i < 3; ++i) {
        Patch p{"s" + std::to_string(i), "S", "P", i, 2 * i, Image(4, 4)};
        for (auto& v : p.pixels.rgb) v = static_cast<std::uint8_t>(rng.below(256));
        store.patches.push_back(p);
    }
    store.candidates = 5;
    store.out_of_bounds = 1;
    store.white_rejected = 1;
    write_patch_store(store, dir.path());
    const auto back = read_patch_store(dir.path());
    REQUIRE(back.patches.size() == 3);
    CHECK(back.candidates == 5);
    for (int i = 0; i < 3; ++i) {
        CHECK(back.patches[i].key() == store.patches[i].key());
        CHECK(back.patches[i].pixels == store.patches[i].pixels);
        CHECK(back.patches[i].origin_y == 2 * i);
    }
    CHECK(back.find("P/S/s1") != nullptr);
}
