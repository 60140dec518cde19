#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "stx/image.hpp"

namespace stx::stain {

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;
using StainMatrix = std::array<Vec3, 2>;  // rows: hematoxylin, eosin

struct ODImage {
    int width = 0;
    int height = 0;
    std::vector<double> od;  // 3 per pixel, row-major

    std::size_t pixel_count() const { return od.size() / 3; }
    Vec3 pixel(std::size_t i) const { return {od[3 * i], od[3 * i + 1], od[3 * i + 2]}; }
};

inline constexpr int kI0 = 255;

// od = -ln(max(I, 1) / i0) per channel.
ODImage rgb_to_od(const Image& image, int i0 = kI0);
Image od_to_rgb(const ODImage& od, int i0 = kI0);

struct StainParams {
    double od_threshold = 0.15;  // tissue mask on max channel OD
    double lambda = 0.1;         // l1 sparsity while learning the stain basis
    double code_lambda = 0.01;   // l1 sparsity when extracting concentrations
    int dict_iters = 50;
    int code_iters = 100;
    double tol = 1e-6;
    std::size_t max_pixels = 20000;  // cap on tissue pixels used for dictionary learning

    void validate() const;
};

struct StainProfile {
    StainMatrix stain_matrix{};
    Vec2 max_concentration{};  // 99th percentile per stain

    void validate() const;
};

nlohmann::json to_json(const StainProfile& p);
StainProfile profile_from_json(const nlohmann::json& j);

// Objective 0.5*||v - W^T c||^2 + lambda*||c||_1 for one pixel.
double code_objective(const Vec3& v, const StainMatrix& w, const Vec2& c, double lambda);

// Non-negative l1-regularized least squares for one pixel, solved by ISTA with
// step 1/L. When trace is given it receives the objective after every iteration
// (entry 0 is the starting point).
Vec2 sparse_code(const Vec3& v, const StainMatrix& w, double lambda, int iters, double tol, Vec2 start = {0.0, 0.0},
                 std::vector<double>* trace = nullptr);

struct ConcentrationMap {
    int width = 0;
    int height = 0;
    std::vector<double> c;  // 2 per pixel
    double residual = 0.0;  // ||V - W^T C||_F over all pixels
};

ConcentrationMap get_concentrations(const ODImage& od, const StainMatrix& w, const StainParams& params);

std::vector<std::size_t> tissue_pixels(const ODImage& od, double threshold);

// Two-atom sparse non-negative dictionary learning over tissue pixels.
StainProfile estimate_stain_profile(const ODImage& od, const StainParams& params);

Image normalize_to_target(const Image& src, const StainProfile& src_profile, const StainProfile& target,
                          const StainParams& params);

Image standardize_luminosity(const Image& image, double percentile = 95.0);

// CIELAB (D65) helpers used by the luminosity standardizer.
Vec3 rgb_to_lab(const std::array<std::uint8_t, 3>& rgb);
std::array<std::uint8_t, 3> lab_to_rgb(const Vec3& lab);

double angle_degrees(const Vec3& a, const Vec3& b);

}  // namespace stx::stain
