#include "doctest.h"

#include "stx/viz.hpp"
#include "test_util.hpp"

using namespace stx;
using namespace stx::viz;
using stx::testing::error_kind_of;

namespace {

Image gradient_tissue(int w, int h) {
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            img.set(x, y, {static_cast<std::uint8_t>(x * 7), static_cast<std::uint8_t>(y * 5), 90});
    return img;
}

eval::MetricsReport report_with(const std::string& tag, const std::vector<double>& medians) {
    eval::MetricsReport r;
    r.model_tag = tag;
    for (std::size_t i = 0; i < medians.size(); ++i)
        r.per_gene.push_back({"g" + std::to_string(i), {}, medians[i], 0, 0, eval::categorize(medians[i])});
    r.counts = eval::count_categories(r.per_gene);
    return r;
}

}  // namespace

TEST_CASE("ramp endpoints and midpoint") {
    HeatmapSpec spec{"B2M", {0.0, 1.0}, {{5, 5}, {20, 5}}, 3.0};
    const auto h = render_heatmap(spec, 30, 12);
    CHECK(h.image.pixel(5, 5) == kLowColor);
    CHECK(h.image.pixel(20, 5) == kHighColor);
    CHECK(h.image.pixel(12, 5) == Rgb{255, 255, 255});
    CHECK(h.mask[5 * 30 + 5] == 1);
    CHECK(h.mask[5 * 30 + 12] == 0);

    spec.values = {4.0, 4.0};
    const auto flat = render_heatmap(spec, 30, 12);
    CHECK(flat.image.pixel(5, 5) == ramp(0.5, kLowColor, kHighColor));
    CHECK(flat.image.pixel(20, 5) == Rgb{128, 128, 128});
}

TEST_CASE("rendering is affine invariant and deterministic") {
    HeatmapSpec a{"g", {0.3, 1.2, -0.7, 2.0}, {{10, 10}, {30, 10}, {10, 30}, {30, 30}}};
    HeatmapSpec b = a;
    for (auto& v : b.values) v = 2 * v + 3;
    CHECK(render_heatmap(a, 40, 40).image == render_heatmap(b, 40, 40).image);
    CHECK(render_heatmap(a, 40, 40).image == render_heatmap(a, 40, 40).image);
}

TEST_CASE("default radius is half the median nearest-neighbor distance") {
    CHECK(default_radius({{0, 0}, {10, 0}, {30, 0}}, 1.0) == doctest::Approx(5.0));
    CHECK(default_radius({{0, 0}}, 4.0) == 4.0);
}

TEST_CASE("overlay compositing") {
    const auto tissue = gradient_tissue(30, 20);
    HeatmapSpec spec{"g", {0.0, 1.0}, {{6, 6}, {20, 12}}, 4.0};
    const auto h = render_heatmap(spec, 30, 20);
    CHECK(overlay(h, tissue, 0.0) == tissue);
    const auto full = overlay(h, tissue, 1.0);
    CHECK(full.pixel(6, 6) == kLowColor);
    CHECK(full.pixel(20, 12) == kHighColor);
    const auto mid = overlay(h, tissue, 0.6);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 30; ++x)
            if (!h.mask[y * 30 + x]) CHECK(mid.pixel(x, y) == tissue.pixel(x, y));
    CHECK(error_kind_of([&] { overlay(h, gradient_tissue(10, 10)); }) == ErrorKind::Argument);
}

TEST_CASE("histogram bins partition the positive genes") {
    const auto r = report_with("m", {0.05, 0.15, 0.55, 1.0, 0.0, -0.3, eval::kUndefined});
    const auto csv = export_histogram(r, 4);
    CHECK(csv ==
          "bin_start,bin_end,count\n"
          "0.0000,0.2500,3\n"
          "0.2500,0.5000,0\n"
          "0.5000,0.7500,1\n"
          "0.7500,1.0000,1\n");
    CHECK(r.counts.positive == 5);
    CHECK(export_histogram(report_with("n", {-0.2, -0.5}), 2) == "bin_start,bin_end,count\n0.0000,0.5000,0\n0.5000,1.0000,0\n");
}

TEST_CASE("model comparison golden file") {
    const auto a = report_with("mlp", {0.6, 0.2, 0.05});
    const auto b = report_with("conv", {0.6, 0.7, 0.4, -0.1});
    CHECK(export_model_comparison({a}) == "model,strong,medium,weak,negligible,positive_total\nmlp,1,0,1,1,3\n");
    CHECK(export_model_comparison({a, b}) ==
          "model,strong,medium,weak,negligible,positive_total\n"
          "conv,2,1,0,0,3\n"
          "mlp,1,0,1,1,3\n");
}
