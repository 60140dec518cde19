#include "stx/viz.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace stx::viz {

double default_radius(const std::vector<Point>& coords, double fallback) {
    if (coords.size() < 2) return fallback;
    std::vector<double> nearest(coords.size(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < coords.size(); ++i)
        for (std::size_t j = 0; j < coords.size(); ++j) {
            if (i == j) continue;
            const double d = std::hypot(coords[i].x - coords[j].x, coords[i].y - coords[j].y);
            if (d > 0.0) nearest[i] = std::min(nearest[i], d);
        }
    std::erase_if(nearest, [](double d) { return !std::isfinite(d); });
    if (nearest.empty()) return fallback;
    std::sort(nearest.begin(), nearest.end());
    const std::size_t n = nearest.size();
    const double med = n % 2 == 1 ? nearest[n / 2] : 0.5 * (nearest[n / 2 - 1] + nearest[n / 2]);
    return 0.5 * med;
}

Rgb ramp(double t, Rgb low, Rgb high) {
    t = std::clamp(t, 0.0, 1.0);
    Rgb out;
    for (int c = 0; c < 3; ++c)
        out[c] = static_cast<std::uint8_t>(std::lround(low[c] + t * (static_cast<double>(high[c]) - low[c])));
    return out;
}

Heatmap render_heatmap(const HeatmapSpec& spec, int width, int height) {
    require(width > 0 && height > 0, ErrorKind::Argument, "canvas must have positive size");
    require(spec.values.size() == spec.coords.size(), ErrorKind::Argument,
            "heatmap values and coordinates differ in length");
    require(!spec.values.empty(), ErrorKind::Argument, "heatmap needs at least one spot");
    const double radius = spec.radius > 0.0
                              ? spec.radius
                              : default_radius(spec.coords, std::max(1.0, std::min(width, height) / 20.0));
    const auto [lo_it, hi_it] = std::minmax_element(spec.values.begin(), spec.values.end());
    const double lo = *lo_it, hi = *hi_it;
    Heatmap h{Image(width, height), std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, 0)};
    const double r2 = radius * radius;
    for (std::size_t i = 0; i < spec.values.size(); ++i) {
        const double t = hi > lo ? (spec.values[i] - lo) / (hi - lo) : 0.5;
        const Rgb color = ramp(t, spec.low, spec.high);
        const auto [cx, cy] = spec.coords[i];
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
        const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + radius)));
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + radius)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = x - cx, dy = y - cy;
                if (dx * dx + dy * dy > r2) continue;
                h.image.set(x, y, color);
                h.mask[static_cast<std::size_t>(y) * width + x] = 1;
            }
    }
    return h;
}

Image overlay(const Heatmap& heatmap, const Image& tissue, double alpha) {
    require(heatmap.image.width == tissue.width && heatmap.image.height == tissue.height, ErrorKind::Argument,
            "heatmap is " + std::to_string(heatmap.image.width) + "x" + std::to_string(heatmap.image.height) +
                " but tissue is " + std::to_string(tissue.width) + "x" + std::to_string(tissue.height));
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::Argument, "alpha must lie in [0, 1]");
    Image out = tissue;
    for (std::size_t p = 0; p < heatmap.mask.size(); ++p) {
        if (!heatmap.mask[p]) continue;
        for (int c = 0; c < 3; ++c) {
            const double v = (1.0 - alpha) * tissue.rgb[3 * p + c] + alpha * heatmap.image.rgb[3 * p + c];
            out.rgb[3 * p + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return out;
}

std::string export_histogram(const eval::MetricsReport& report, int bins) {
    require(bins >= 1, ErrorKind::Argument, "histogram needs at least one bin");
    std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
    for (const auto& g : report.per_gene) {
        const double p = g.median_pcc;
        if (eval::is_undefined(p) || p < 0.0) continue;
        counts[std::min(static_cast<std::size_t>(p * bins), counts.size() - 1)]++;
    }
    std::ostringstream out;
    out << "bin_start,bin_end,count\n";
    for (int b = 0; b < bins; ++b)
        out << eval::format_value(static_cast<double>(b) / bins) << ','
            << eval::format_value(static_cast<double>(b + 1) / bins) << ',' << counts[b] << '\n';
    return out.str();
}

std::string export_model_comparison(const std::vector<eval::MetricsReport>& reports) {
    require(!reports.empty(), ErrorKind::Argument, "need at least one report");
    std::vector<const eval::MetricsReport*> rows;
    for (const auto& r : reports) rows.push_back(&r);
    std::sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) {
        if (a->counts.strong != b->counts.strong) return a->counts.strong > b->counts.strong;
        return a->model_tag < b->model_tag;
    });
    std::ostringstream out;
    out << "model,strong,medium,weak,negligible,positive_total\n";
    for (const auto* r : rows)
        out << r->model_tag << ',' << r->counts.strong << ',' << r->counts.medium << ',' << r->counts.weak << ','
            << r->counts.negligible << ',' << r->counts.positive << '\n';
    return out.str();
}

}  // namespace stx::viz
