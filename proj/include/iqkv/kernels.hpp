#pragma once

// Fused dequantize-multiply vector-matrix kernels over packed matrices, with
// exact memory-traffic counters.
//
// Inner layout (groups along the reduction dim within each packed row): the
// kernel walks one packed row per output element, fetching one scale/aux pair
// per group and reusing it across the G products -> N_out * K/G scale loads.
//
// Outer layout (stored K x N_out, groups running down each column): the kernel
// walks the K rows; the N_out cells of a row all sit in different groups, so
// every cell costs its own scale/aux fetch and there is no caching across
// rows -> N_out * K scale loads. The ratio between the two models is exactly G.
//
// Both kernels dequantize group-at-a-time into an O(G) stack buffer, never
// materialize the dequantized matrix, and accumulate each output element in
// double with a fixed order, so results are bit-stable across runs.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "iqkv/quant.hpp"
#include "iqkv/tensor.hpp"

namespace iqkv {

struct TrafficStats {
    std::uint64_t scale_loads = 0;
    std::uint64_t aux_loads = 0;
    std::uint64_t code_word_loads = 0;
    std::uint64_t flops = 0;
};

struct KernelReport {
    Vector output;
    TrafficStats stats;
};

// out[r] = dot(a, packed row r). b must be Inner-grouped with logical_cols ==
// a.len. Equivalent to a * dequantize(b)^T.
//
// Per packed row, each group costs one scale/aux fetch reused across its G
// products: codes stream out of whole words and fold into the accumulator as
// scale * dot(a_g, codes) (+ zp * sum(a_g) for asymmetric groups).
inline void qgemv_inner_into(const Vector& a, const PackedMatrix& b, std::span<float> out,
                             TrafficStats& stats) {
    if (b.axis != GroupAxis::Inner)
        throw std::invalid_argument("qgemv_inner: matrix not grouped along the reduction dimension");
    if (a.len() != b.logical_cols)
        throw std::invalid_argument("qgemv_inner: vector length != packed columns");
    if (out.size() != b.logical_rows)
        throw std::invalid_argument("qgemv_inner: output length != packed rows");
    const std::size_t G = static_cast<std::size_t>(b.group_size);
    const std::size_t bits = static_cast<std::size_t>(b.bits);
    const std::size_t gpr = b.groups_per_row();
    const std::uint32_t mask = (1u << bits) - 1;
    const bool aligned = (G * bits) % 32 == 0;
    const std::size_t wpg = (G * bits + 31) / 32;
    const std::size_t cpw = 32 / bits;
    std::array<float, 32> buf{};
    const float* av = a.data.data();
    for (std::size_t r = 0; r < b.logical_rows; ++r) {
        double acc = 0.0;
        for (std::size_t g = 0; g < gpr; ++g) {
            const std::size_t gi = r * gpr + g;
            const double scale = b.scales[gi];
            const std::uint32_t aux = b.aux_words[gi];
            const float* ag = av + g * G;
            if (aligned) {
                const std::uint32_t* w = b.code_words.data() + gi * wpg;
                if (b.group_is_asym(gi)) {
                    const double zp = std::bit_cast<float>(aux);
                    double dot = 0.0, asum = 0.0;
                    std::size_t j = 0;
                    for (std::size_t k = 0; k < wpg; ++k) {
                        std::uint32_t wv = w[k];
                        for (std::size_t t = 0; t < cpw; ++t, ++j) {
                            dot += static_cast<double>(ag[j]) *
                                   static_cast<double>(wv & mask);
                            asum += static_cast<double>(ag[j]);
                            wv >>= bits;
                        }
                    }
                    acc += scale * dot + zp * asum;
                } else {
                    double dot = 0.0;
                    std::size_t j = 0;
                    for (std::size_t k = 0; k < wpg; ++k) {
                        std::uint32_t wv = w[k];
                        for (std::size_t t = 0; t < cpw; ++t, ++j) {
                            const int c = static_cast<int>(wv & mask);
                            const int sc = (aux >> j) & 1u ? -c : c;
                            dot += static_cast<double>(ag[j]) * static_cast<double>(sc);
                            wv >>= bits;
                        }
                    }
                    acc += scale * dot;
                }
            } else {
                b.decode_group_into(gi, buf);
                for (std::size_t j = 0; j < G; ++j)
                    acc += static_cast<double>(ag[j]) * static_cast<double>(buf[j]);
            }
        }
        out[r] = static_cast<float>(acc);
    }
    stats.scale_loads += b.logical_rows * gpr;
    stats.aux_loads += b.logical_rows * gpr;
    stats.code_word_loads += b.logical_rows * gpr * wpg;
    stats.flops += 4 * static_cast<std::uint64_t>(b.element_count());
}

inline KernelReport qgemv_inner(const Vector& a, const PackedMatrix& b) {
    KernelReport rep;
    rep.output = Vector(b.logical_rows);
    qgemv_inner_into(a, b, rep.output.data, rep.stats);
    return rep;
}

// out = a * dequantize(b) for the K x N_out Outer-grouped layout. The walk is
// row-major over b (the Fig.-3a per-row model): each of the N_out cells in a
// row belongs to a different group, so scales are fetched per cell.
inline void qgemv_outer_into(const Vector& a, const PackedMatrix& b, std::span<float> out,
                             std::span<double> acc, TrafficStats& stats) {
    if (b.axis != GroupAxis::Outer)
        throw std::invalid_argument("qgemv_outer: matrix not grouped along the outer axis");
    if (a.len() != b.logical_rows)
        throw std::invalid_argument("qgemv_outer: vector length != packed rows");
    if (out.size() != b.logical_cols || acc.size() != b.logical_cols)
        throw std::invalid_argument("qgemv_outer: output length != packed columns");
    const std::size_t G = static_cast<std::size_t>(b.group_size);
    const std::size_t bits = static_cast<std::size_t>(b.bits);
    const std::size_t gpc = b.groups_per_col();
    const std::size_t cols = b.logical_cols;
    const std::uint32_t mask = (1u << bits) - 1;
    const bool aligned = (G * bits) % 32 == 0;
    const std::size_t wpg = (G * bits + 31) / 32;
    for (auto& v : acc) v = 0.0;
    for (std::size_t k = 0; k < b.logical_rows; ++k) {
        const double av = a.data[k];
        const std::size_t gk = k / G;
        const std::size_t jk = k % G;
        // Within this walk row the code of column j sits at a fixed offset
        // inside group (j, gk).
        const std::size_t word_off = jk * bits / 32;
        const unsigned shift = static_cast<unsigned>((jk * bits) % 32);
        for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t g = j * gpc + gk;
            const double scale = b.scales[g];
            const std::uint32_t code =
                aligned ? (b.code_words[g * wpg + word_off] >> shift) & mask : b.code_at(g, jk);
            float deq;
            if (b.group_is_asym(g)) {
                deq = static_cast<float>(scale * code +
                                         static_cast<double>(std::bit_cast<float>(b.aux_words[g])));
            } else {
                const double mag = scale * code;
                deq = static_cast<float>((b.aux_words[g] >> jk) & 1u ? -mag : mag);
            }
            acc[j] += av * static_cast<double>(deq);
        }
    }
    for (std::size_t j = 0; j < cols; ++j) out[j] = static_cast<float>(acc[j]);
    const std::uint64_t cells = b.element_count();
    stats.scale_loads += cells;
    stats.aux_loads += cells;
    stats.code_word_loads += cells;
    stats.flops += 4 * cells;
}

inline KernelReport qgemv_outer(const Vector& a, const PackedMatrix& b) {
    KernelReport rep;
    rep.output = Vector(b.logical_cols);
    std::vector<double> acc(b.logical_cols);
    qgemv_outer_into(a, b, rep.output.data, acc, rep.stats);
    return rep;
}

// Runs `warmup` unmeasured calls, then `reps` measured ones on the calling
// thread, and returns the median latency in seconds (mean of the two middle
// samples for even reps). Inputs must be prepared by the caller beforehand.
template <typename F>
double time_kernel(F&& fn, int reps, int warmup) {
    if (reps < 1) throw std::invalid_argument("time_kernel: reps must be >= 1");
    if (warmup < 0) throw std::invalid_argument("time_kernel: negative warmup");
    for (int i = 0; i < warmup; ++i) fn();
    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(reps));
    for (int i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    if (n % 2 == 1) return samples[n / 2];
    return 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

}  // namespace iqkv
