#pragma once

#include <string>
#include <vector>

#include "stx/eval.hpp"
#include "stx/image.hpp"

namespace stx::viz {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline constexpr Rgb kLowColor{0, 0, 255};     // blue
inline constexpr Rgb kHighColor{255, 255, 0};  // yellow

struct HeatmapSpec {
    std::string gene;
    std::vector<double> values;
    std::vector<Point> coords;
    double radius = 0.0;  // <= 0: half the median nearest-neighbor distance
    Rgb low = kLowColor;
    Rgb high = kHighColor;
    double alpha = 0.6;
};

// Half the median nearest-neighbor distance between spot centers. With a
// single spot there is no neighbor and the fallback is used.
double default_radius(const std::vector<Point>& coords, double fallback);

// Linear interpolation between low (t = 0) and high (t = 1).
Rgb ramp(double t, Rgb low, Rgb high);

struct Heatmap {
    Image image;                     // white where no disc is drawn
    std::vector<std::uint8_t> mask;  // 1 where a disc covers the pixel
};

// Each spot is a filled disc colored by its min-max normalized value; equal
// values all map to the ramp midpoint. Discs are painted in input order.
Heatmap render_heatmap(const HeatmapSpec& spec, int width, int height);

// Alpha-composites disc pixels over the tissue; other pixels are copied.
Image overlay(const Heatmap& heatmap, const Image& tissue, double alpha = 0.6);

// bin_start,bin_end,count over median Pcc in [0, 1]; the last bin is closed.
std::string export_histogram(const eval::MetricsReport& report, int bins = 10);

// model,strong,medium,weak,negligible,positive_total; strong descending, ties by model.
std::string export_model_comparison(const std::vector<eval::MetricsReport>& reports);

}  // namespace stx::viz
