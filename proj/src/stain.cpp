#include "stx/stain.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "stx/common.hpp"
#include "stx/parallel.hpp"

namespace stx::stain {

using nlohmann::json;

namespace {

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

struct Gram {
    double g00, g01, g11;
    double lipschitz;
};

Gram gram_of(const StainMatrix& w) {
    Gram g{dot(w[0], w[0]), dot(w[0], w[1]), dot(w[1], w[1]), 0.0};
    const double tr = g.g00 + g.g11;
    const double det = g.g00 * g.g11 - g.g01 * g.g01;
    g.lipschitz = 0.5 * tr + std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
    return g;
}

Vec2 ista(const Vec3& v, const StainMatrix& w, const Gram& g, double lambda, int iters, double tol, Vec2 c,
          std::vector<double>* trace) {
    const double b0 = dot(w[0], v);
    const double b1 = dot(w[1], v);
    const double step = g.lipschitz > 0 ? 1.0 / g.lipschitz : 0.0;
    if (trace) trace->push_back(code_objective(v, w, c, lambda));
    for (int it = 0; it < iters; ++it) {
        const double grad0 = g.g00 * c[0] + g.g01 * c[1] - b0;
        const double grad1 = g.g01 * c[0] + g.g11 * c[1] - b1;
        const Vec2 next{std::max(0.0, c[0] - step * (grad0 + lambda)), std::max(0.0, c[1] - step * (grad1 + lambda))};
        const double change = std::max(std::abs(next[0] - c[0]), std::abs(next[1] - c[1]));
        c = next;
        if (trace) trace->push_back(code_objective(v, w, c, lambda));
        if (change < tol) break;
    }
    return c;
}

// Linear-interpolated percentile (numpy's default) of an unsorted copy.
double percentile(std::vector<double> values, double q) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

Vec3 unit(const Vec3& a) {
    const double n = norm(a);
    return n > 0 ? Vec3{a[0] / n, a[1] / n, a[2] / n} : Vec3{0, 0, 0};
}

}  // namespace

ODImage rgb_to_od(const Image& image, int i0) {
    ODImage out{image.width, image.height, std::vector<double>(image.rgb.size())};
    for (std::size_t i = 0; i < image.rgb.size(); ++i) {
        const double intensity = std::max<double>(image.rgb[i], 1.0);
        out.od[i] = std::max(0.0, -std::log(intensity / i0));
    }
    return out;
}

Image od_to_rgb(const ODImage& od, int i0) {
    Image out(od.width, od.height);
    for (std::size_t i = 0; i < od.od.size(); ++i) {
        const double v = std::round(i0 * std::exp(-od.od[i]));
        out.rgb[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    return out;
}

void StainParams::validate() const {
    require(od_threshold > 0, ErrorKind::Argument, "od threshold must be positive");
    require(lambda >= 0 && code_lambda >= 0, ErrorKind::Argument, "sparsity must be non-negative");
    require(dict_iters >= 1 && code_iters >= 1, ErrorKind::Argument, "iteration counts must be at least 1");
    require(max_pixels >= 100, ErrorKind::Argument, "max_pixels must be at least 100");
}

void StainProfile::validate() const {
    for (const auto& row : stain_matrix) {
        require(std::abs(norm(row) - 1.0) <= 1e-9, ErrorKind::Argument, "stain rows must be unit norm");
        for (double x : row) require(x >= 0 && std::isfinite(x), ErrorKind::Argument, "stain entries must be non-negative");
    }
    for (double m : max_concentration) require(std::isfinite(m) && m >= 0, ErrorKind::Argument, "bad max concentration");
}

json to_json(const StainProfile& p) {
    return {{"stain_matrix", {p.stain_matrix[0], p.stain_matrix[1]}}, {"max_concentration", p.max_concentration}};
}

StainProfile profile_from_json(const json& j) {
    StainProfile p;
    const auto m = j.at("stain_matrix").get<std::vector<std::vector<double>>>();
    require(m.size() == 2 && m[0].size() == 3 && m[1].size() == 3, ErrorKind::Schema, "stain_matrix must be 2x3");
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) p.stain_matrix[r][c] = m[r][c];
    const auto mc = j.at("max_concentration").get<std::vector<double>>();
    require(mc.size() == 2, ErrorKind::Schema, "max_concentration must have 2 entries");
    p.max_concentration = {mc[0], mc[1]};
    p.validate();
    return p;
}

double code_objective(const Vec3& v, const StainMatrix& w, const Vec2& c, double lambda) {
    double r2 = 0.0;
    for (int k = 0; k < 3; ++k) {
        const double r = v[k] - (w[0][k] * c[0] + w[1][k] * c[1]);
        r2 += r * r;
    }
    return 0.5 * r2 + lambda * (std::abs(c[0]) + std::abs(c[1]));
}

Vec2 sparse_code(const Vec3& v, const StainMatrix& w, double lambda, int iters, double tol, Vec2 start,
                 std::vector<double>* trace) {
    return ista(v, w, gram_of(w), lambda, iters, tol, start, trace);
}

ConcentrationMap get_concentrations(const ODImage& od, const StainMatrix& w, const StainParams& params) {
    const auto n = od.pixel_count();
    ConcentrationMap out{od.width, od.height, std::vector<double>(2 * n), 0.0};
    const auto g = gram_of(w);
    const auto rows = static_cast<std::size_t>(std::max(1, od.height));
    const std::size_t per_row = rows ? n / rows : 0;
    std::vector<double> row_residual(rows, 0.0);
    parallel_for(rows, [&](std::size_t y) {
        double acc = 0.0;
        for (std::size_t i = y * per_row; i < (y + 1) * per_row; ++i) {
            const auto v = od.pixel(i);
            const auto c = ista(v, w, g, params.code_lambda, params.code_iters, params.tol, {0.0, 0.0}, nullptr);
            out.c[2 * i] = c[0];
            out.c[2 * i + 1] = c[1];
            for (int k = 0; k < 3; ++k) {
                const double r = v[k] - (w[0][k] * c[0] + w[1][k] * c[1]);
                acc += r * r;
            }
        }
        row_residual[y] = acc;
    });
    double total = 0.0;
    for (double r : row_residual) total += r;
    out.residual = std::sqrt(total);
    return out;
}

std::vector<std::size_t> tissue_pixels(const ODImage& od, double threshold) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < od.pixel_count(); ++i) {
        const auto v = od.pixel(i);
        if (std::max({v[0], v[1], v[2]}) > threshold) idx.push_back(i);
    }
    return idx;
}

StainProfile estimate_stain_profile(const ODImage& od, const StainParams& params) {
    params.validate();
    auto tissue = tissue_pixels(od, params.od_threshold);
    require(tissue.size() >= 100, ErrorKind::InsufficientTissue,
            "only " + std::to_string(tissue.size()) + " tissue pixels above OD threshold");
    if (tissue.size() > params.max_pixels) {
        std::vector<std::size_t> sample;
        sample.reserve(params.max_pixels);
        for (std::size_t k = 0; k < params.max_pixels; ++k) sample.push_back(tissue[k * tissue.size() / params.max_pixels]);
        tissue = std::move(sample);
    }
    const auto n = tissue.size();
    std::vector<Vec3> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = od.pixel(tissue[i]);

    // Initial atoms: the direction farthest from the mean direction, then the
    // direction farthest from that one.
    Vec3 mean_dir{0, 0, 0};
    for (const auto& x : v) {
        const auto u = unit(x);
        for (int k = 0; k < 3; ++k) mean_dir[k] += u[k];
    }
    mean_dir = unit(mean_dir);
    const auto farthest_from = [&](const Vec3& ref) {
        std::size_t best = 0;
        double best_cos = 2.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = dot(unit(v[i]), ref);
            if (c < best_cos) {
                best_cos = c;
                best = i;
            }
        }
        return unit(v[best]);
    };
    StainMatrix w;
    w[0] = farthest_from(mean_dir);
    w[1] = farthest_from(w[0]);
    if (angle_degrees(w[0], w[1]) < 1e-6) {
        // Degenerate single-direction tissue: perturb the second atom off the first.
        w[1] = unit({w[0][0] + 0.1, w[0][1], w[0][2] + 0.1});
    }

    std::vector<Vec2> h(n, Vec2{0.0, 0.0});
    const auto code_all = [&](const StainMatrix& atoms, double lambda) {
        const auto g = gram_of(atoms);
        const std::size_t blocks = 64;
        parallel_for(blocks, [&](std::size_t b) {
            for (std::size_t i = b * n / blocks; i < (b + 1) * n / blocks; ++i)
                h[i] = ista(v[i], atoms, g, lambda, params.code_iters, params.tol, h[i], nullptr);
        });
    };

    for (int it = 0; it < params.dict_iters; ++it) {
        code_all(w, params.lambda);
        // Sufficient statistics for the atom update.
        double hh00 = 0, hh01 = 0, hh11 = 0;
        Vec3 hv0{0, 0, 0}, hv1{0, 0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            hh00 += h[i][0] * h[i][0];
            hh01 += h[i][0] * h[i][1];
            hh11 += h[i][1] * h[i][1];
            for (int k = 0; k < 3; ++k) {
                hv0[k] += h[i][0] * v[i][k];
                hv1[k] += h[i][1] * v[i][k];
            }
        }
        const double tr = hh00 + hh11;
        const double det = hh00 * hh11 - hh01 * hh01;
        const double lip = 0.5 * tr + std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
        if (!(lip > 0)) break;

        StainMatrix prev = w;
        for (int step = 0; step < 20; ++step) {
            StainMatrix next;
            for (int k = 0; k < 3; ++k) {
                const double g0 = hh00 * w[0][k] + hh01 * w[1][k] - hv0[k];
                const double g1 = hh01 * w[0][k] + hh11 * w[1][k] - hv1[k];
                next[0][k] = std::max(0.0, w[0][k] - g0 / lip);
                next[1][k] = std::max(0.0, w[1][k] - g1 / lip);
            }
            for (int r = 0; r < 2; ++r)
                if (norm(next[r]) > 0) w[r] = unit(next[r]);
        }
        double change = 0.0;
        for (int r = 0; r < 2; ++r)
            for (int k = 0; k < 3; ++k) change = std::max(change, std::abs(w[r][k] - prev[r][k]));
        if (change < params.tol) break;
    }

    // Hematoxylin first: the row with the larger blue-channel OD.
    bool swapped = false;
    if (w[1][2] > w[0][2]) {
        std::swap(w[0], w[1]);
        swapped = true;
    }
    for (auto& x : h)
        if (swapped) std::swap(x[0], x[1]);
    // Percentiles use the same coding as get_concentrations so that
    // self-normalization scales by exactly one.
    code_all(w, params.code_lambda);

    StainProfile profile;
    profile.stain_matrix = w;
    for (int k = 0; k < 2; ++k) {
        std::vector<double> c(n);
        for (std::size_t i = 0; i < n; ++i) c[i] = h[i][k];
        profile.max_concentration[k] = percentile(std::move(c), 99.0);
    }
    return profile;
}

Image normalize_to_target(const Image& src, const StainProfile& src_profile, const StainProfile& target,
                          const StainParams& params) {
    src_profile.validate();
    target.validate();
    for (int k = 0; k < 2; ++k)
        require(src_profile.max_concentration[k] > 0, ErrorKind::DegenerateStain,
                "source max concentration for stain " + std::to_string(k) + " is zero");
    const auto od = rgb_to_od(src);
    auto conc = get_concentrations(od, src_profile.stain_matrix, params);
    const Vec2 scale{target.max_concentration[0] / src_profile.max_concentration[0],
                     target.max_concentration[1] / src_profile.max_concentration[1]};
    ODImage out{od.width, od.height, std::vector<double>(od.od.size())};
    const auto& w = target.stain_matrix;
    for (std::size_t i = 0; i < od.pixel_count(); ++i) {
        const double c0 = conc.c[2 * i] * scale[0];
        const double c1 = conc.c[2 * i + 1] * scale[1];
        for (int k = 0; k < 3; ++k) out.od[3 * i + k] = c0 * w[0][k] + c1 * w[1][k];
    }
    return od_to_rgb(out);
}

namespace {

// sRGB companding and CIELAB with a D65 white point.
double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }
double linear_to_srgb(double c) { return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055; }

constexpr double kXn = 0.95047, kYn = 1.0, kZn = 1.08883;
constexpr double kDelta = 6.0 / 29.0;

double lab_f(double t) { return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3 * kDelta * kDelta) + 4.0 / 29.0; }
double lab_finv(double t) { return t > kDelta ? t * t * t : 3 * kDelta * kDelta * (t - 4.0 / 29.0); }

}  // namespace

Vec3 rgb_to_lab(const std::array<std::uint8_t, 3>& rgb) {
    const double r = srgb_to_linear(rgb[0] / 255.0);
    const double g = srgb_to_linear(rgb[1] / 255.0);
    const double b = srgb_to_linear(rgb[2] / 255.0);
    const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    const double fx = lab_f(x / kXn), fy = lab_f(y / kYn), fz = lab_f(z / kZn);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

std::array<std::uint8_t, 3> lab_to_rgb(const Vec3& lab) {
    const double fy = (lab[0] + 16.0) / 116.0;
    const double fx = fy + lab[1] / 500.0;
    const double fz = fy - lab[2] / 200.0;
    const double x = kXn * lab_finv(fx), y = kYn * lab_finv(fy), z = kZn * lab_finv(fz);
    const double r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
    const double g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
    const double b = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
    std::array<std::uint8_t, 3> out{};
    const double lin[3] = {r, g, b};
    for (int k = 0; k < 3; ++k) {
        const double s = linear_to_srgb(std::clamp(lin[k], 0.0, 1.0));
        out[k] = static_cast<std::uint8_t>(std::clamp(std::round(s * 255.0), 0.0, 255.0));
    }
    return out;
}

Image standardize_luminosity(const Image& image, double pct) {
    const auto n = image.pixel_count();
    std::vector<Vec3> lab(n);
    std::vector<double> lightness(n);
    for (std::size_t i = 0; i < n; ++i) {
        lab[i] = rgb_to_lab({image.rgb[3 * i], image.rgb[3 * i + 1], image.rgb[3 * i + 2]});
        lightness[i] = lab[i][0];
    }
    const double p = percentile(lightness, pct);
    if (!(p > 0) || p >= 100.0) return image;
    const double scale = 100.0 / p;
    Image out(image.width, image.height);
    for (std::size_t i = 0; i < n; ++i) {
        auto v = lab[i];
        v[0] = std::min(100.0, v[0] * scale);
        const auto rgb = lab_to_rgb(v);
        std::copy(rgb.begin(), rgb.end(), out.rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
    }
    return out;
}

double angle_degrees(const Vec3& a, const Vec3& b) {
    const double c = std::clamp(dot(unit(a), unit(b)), -1.0, 1.0);
    return std::acos(c) * 180.0 / std::numbers::pi;
}

}  // namespace stx::stain
