#pragma once

// Seeded synthetic data for benches and error reports. Gaussian matrices,
// optionally with a few amplified channels to mimic the channel-outlier
// structure of key caches.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqkv/tensor.hpp"

namespace iqkv {

enum class Distribution { Gaussian, GaussianChannelOutliers };

struct SyntheticDataSpec {
    Distribution kind = Distribution::Gaussian;
    double sigma = 1.0;
    std::size_t outlier_channels = 0;
    double outlier_scale = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (sigma <= 0.0) throw std::invalid_argument("SyntheticDataSpec: sigma must be positive");
        if (outlier_scale < 1.0)
            throw std::invalid_argument("SyntheticDataSpec: outlier scale must be >= 1");
    }
};

inline Matrix make_synthetic_matrix(const SyntheticDataSpec& spec, std::size_t rows,
                                    std::size_t cols) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> dist(0.0, spec.sigma);
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            m.at(r, c) = static_cast<float>(dist(rng));
    if (spec.kind == Distribution::GaussianChannelOutliers && spec.outlier_channels > 0 && cols > 0) {
        const std::size_t k = std::min(spec.outlier_channels, cols);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t c = i * cols / k;  // spread outlier channels evenly
            for (std::size_t r = 0; r < rows; ++r)
                m.at(r, c) = static_cast<float>(m.at(r, c) * spec.outlier_scale);
        }
    }
    return m;
}

inline Matrix gaussian_matrix(std::uint64_t seed, std::size_t rows, std::size_t cols,
                              double sigma = 1.0) {
    SyntheticDataSpec spec;
    spec.sigma = sigma;
    spec.seed = seed;
    return make_synthetic_matrix(spec, rows, cols);
}

}  // namespace iqkv
