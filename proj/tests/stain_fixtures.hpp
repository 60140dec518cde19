#pragma once

#include <cmath>

#include "stx/image.hpp"
#include "stx/rng.hpp"
#include "stx/stain.hpp"

namespace stx::testing {

inline stain::Vec3 unit3(stain::Vec3 v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}

// Ruifrok-style H and E optical-density directions.
inline const stain::StainMatrix kReferenceStains{unit3({0.65, 0.70, 0.29}), unit3({0.07, 0.99, 0.11})};

// RGB image generated as V = W0^T H0 with sparse non-negative H0: a quarter of
// pixels are background, the rest carry one or both stains.
inline Image synthetic_stained_image(int size, const stain::StainMatrix& w0, std::uint64_t seed, double scale = 1.0,
                                     bool second_stain = true) {
    Rng rng(seed);
    Image img(size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double u = rng.uniform();
            double c0 = 0, c1 = 0;
            if (u < 0.25) {
                // background
            } else if (u < 0.55) {
                c0 = rng.uniform(0.2, 1.2);
            } else if (u < 0.85) {
                c1 = rng.uniform(0.2, 1.2);
            } else {
                c0 = rng.uniform(0.1, 0.8);
                c1 = rng.uniform(0.1, 0.8);
            }
            if (!second_stain) c1 = 0;
            c0 *= scale;
            c1 *= scale;
            Rgb px;
            for (int k = 0; k < 3; ++k) {
                const double od = c0 * w0[0][k] + c1 * w0[1][k];
                px[k] = static_cast<std::uint8_t>(std::clamp(std::round(255.0 * std::exp(-od)), 0.0, 255.0));
            }
            img.set(x, y, px);
        }
    }
    return img;
}

}  // namespace stx::testing
