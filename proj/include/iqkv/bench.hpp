#pragma once

// Benchmark harness and report emission. Latency protocol: 100 warmup runs,
// then the median of 1000 measured runs (both overridable), timed on a single
// thread with a monotonic clock over pre-generated inputs. Every timing
// command first verifies the kernels against the dequantize-then-multiply
// oracle on a spot sample and refuses to time a failing kernel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqkv/attention.hpp"
#include "iqkv/kernels.hpp"
#include "iqkv/kv_cache.hpp"
#include "iqkv/quant.hpp"
#include "iqkv/synthetic.hpp"
#include "iqkv/tensor.hpp"

namespace iqkv {

struct ModelPreset {
    std::string name;
    std::size_t d = 0;
    std::size_t heads = 0;
};

// Public architecture constants, used only to size synthetic problems.
inline const std::vector<ModelPreset>& model_presets() {
    static const std::vector<ModelPreset> presets = {
        {"llama-3.2-1b", 2048, 32},
        {"llama-3.1-8b", 4096, 32},
        {"llama-2-13b", 5120, 40},
    };
    return presets;
}

inline ModelPreset preset_by_name(const std::string& name) {
    for (const auto& p : model_presets())
        if (p.name == name) return p;
    throw std::invalid_argument("unknown model preset: " + name);
}

inline std::vector<std::size_t> default_seq_grid() {
    std::vector<std::size_t> g;
    for (std::size_t n = 512; n <= 131072; n *= 2) g.push_back(n);
    return g;
}

struct BenchSpec {
    std::vector<ModelPreset> models = model_presets();
    std::vector<std::size_t> seq_lens = default_seq_grid();
    int warmup = 100;
    int reps = 1000;
    std::uint64_t seed = 0;
    QuantConfig quant;
    std::uint64_t max_bytes = 4ull << 30;  // skip shapes whose working set exceeds this

    void validate() const {
        quant.validate();
        if (seq_lens.empty()) throw std::invalid_argument("BenchSpec: empty sequence grid");
        for (std::size_t n : seq_lens)
            if (n == 0 || n % static_cast<std::size_t>(quant.group_size) != 0)
                throw std::invalid_argument(
                    "BenchSpec: sequence lengths must be positive multiples of the group size");
        if (reps < 1) throw std::invalid_argument("BenchSpec: reps must be >= 1");
    }
};

inline double speedup_pct(double t_new, double t_old) {
    return 100.0 * (1.0 - t_new / t_old);
}

// --- small fixed-schema tables ------------------------------------------------

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::string csv() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < columns.size(); ++i)
            os << columns[i] << (i + 1 < columns.size() ? "," : "");
        os << "\n";
        for (const auto& row : rows) {
            for (std::size_t i = 0; i < row.size(); ++i)
                os << row[i] << (i + 1 < row.size() ? "," : "");
            os << "\n";
        }
        return os.str();
    }

    std::string markdown() const {
        std::ostringstream os;
        os << "|";
        for (const auto& c : columns) os << " " << c << " |";
        os << "\n|";
        for (std::size_t i = 0; i < columns.size(); ++i) os << " --- |";
        os << "\n";
        for (const auto& row : rows) {
            os << "|";
            for (const auto& cell : row) os << " " << cell << " |";
            os << "\n";
        }
        return os.str();
    }
};

namespace detail {

inline std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

inline double max_rel_err(const Vector& got, const Vector& want) {
    double worst = 0.0;
    for (std::size_t i = 0; i < got.len(); ++i) {
        const double denom = 1.0 + std::abs(static_cast<double>(want[i]));
        worst = std::max(worst, std::abs(static_cast<double>(got[i]) - want[i]) / denom);
    }
    return worst;
}

// Streaming fp32 GEMV, out = a * B for B in K x N row-major. The
// full-precision baseline the quantized kernels are compared against.
inline void gemv_ref_into(const Vector& a, const Matrix& b, std::span<double> acc,
                          std::span<float> out) {
    for (auto& v : acc) v = 0.0;
    for (std::size_t k = 0; k < b.rows(); ++k) {
        const double av = a[k];
        const float* row = b.row(k).data();
        for (std::size_t j = 0; j < b.cols(); ++j)
            acc[j] += av * static_cast<double>(row[j]);
    }
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<float>(acc[j]);
}

}  // namespace detail

// Spot-checks both kernels against the oracle before any timing run.
inline void verify_kernels_or_throw(const QuantConfig& cfg, std::uint64_t seed) {
    const std::size_t k = 64, n = 8;
    const Matrix logical = gaussian_matrix(seed ^ 0x5f0ddc0deull, k, n);  // K x N
    const Vector a(gaussian_matrix(seed ^ 0xa11ce5ull, 1, k).data());

    const PackedMatrix outer = quantize_matrix(logical, GroupAxis::Outer, cfg);
    const Vector want_outer(matmul_ref(Matrix(1, k, a.data), dequantize_matrix(outer)).data());
    if (detail::max_rel_err(qgemv_outer(a, outer).output, want_outer) > 1e-4)
        throw std::runtime_error("kernel verification failed: qgemv_outer disagrees with oracle");

    const PackedMatrix inner = quantize_matrix(transpose(logical), GroupAxis::Inner, cfg);
    const Vector want_inner(
        matmul_ref(Matrix(1, k, a.data), transpose(dequantize_matrix(inner))).data());
    if (detail::max_rel_err(qgemv_inner(a, inner).output, want_inner) > 1e-4)
        throw std::runtime_error("kernel verification failed: qgemv_inner disagrees with oracle");
}

// --- bench-matmul --------------------------------------------------------------

struct BenchMatmulRow {
    std::string model;
    std::string method;
    std::size_t seq_len = 0;
    double median_ms = 0.0;
    double speedup_vs_ref_pct = 0.0;
    double speedup_vs_outer_pct = 0.0;
};

struct ShapeTraffic {
    std::string model;
    std::size_t seq_len = 0;
    std::uint64_t inner_scale_loads = 0;
    std::uint64_t outer_scale_loads = 0;
};

struct BenchMatmulReport {
    std::vector<BenchMatmulRow> rows;
    std::vector<ShapeTraffic> traffic;

    Table to_table() const {
        Table t;
        t.columns = {"model", "method", "seq_len", "median_ms", "speedup_vs_ref_pct",
                     "speedup_vs_outer_pct"};
        for (const auto& r : rows)
            t.rows.push_back({r.model, r.method, std::to_string(r.seq_len),
                              detail::fmt(r.median_ms, 6), detail::fmt(r.speedup_vs_ref_pct, 2),
                              detail::fmt(r.speedup_vs_outer_pct, 2)});
        return t;
    }

    // Appendix-style layout: one row per (model, method), one column per length.
    Table to_appendix_table() const {
        std::vector<std::size_t> lens;
        for (const auto& r : rows)
            if (std::find(lens.begin(), lens.end(), r.seq_len) == lens.end())
                lens.push_back(r.seq_len);
        std::sort(lens.begin(), lens.end());
        Table t;
        t.columns = {"model", "method"};
        for (std::size_t n : lens) t.columns.push_back(std::to_string(n));
        std::vector<std::pair<std::string, std::string>> keys;
        for (const auto& r : rows) {
            const std::pair<std::string, std::string> key{r.model, r.method};
            if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
        }
        for (const auto& key : keys) {
            std::vector<std::string> row{key.first, key.second};
            for (std::size_t n : lens) {
                std::string cell = "-";
                for (const auto& r : rows)
                    if (r.model == key.first && r.method == key.second && r.seq_len == n)
                        cell = detail::fmt(r.median_ms, 3);
                row.push_back(cell);
            }
            t.rows.push_back(row);
        }
        return t;
    }
};

// Estimated working set of one bench-matmul shape (f32 reference matrix
// dominates; packed operands add codes + per-group metadata).
inline std::uint64_t bench_matmul_bytes(std::size_t d, std::size_t seq, const QuantConfig& cfg) {
    const std::uint64_t elems = static_cast<std::uint64_t>(d) * seq;
    const std::uint64_t packed_bits = estimate_packed_bits(cfg, elems);
    return elems * sizeof(float) + 2 * (packed_bits / 8) + (d + seq) * sizeof(float) * 3;
}

inline BenchMatmulReport cmd_bench_matmul(const BenchSpec& spec) {
    spec.validate();
    verify_kernels_or_throw(spec.quant, spec.seed);
    BenchMatmulReport report;
    for (const auto& model : spec.models) {
        for (std::size_t seq : spec.seq_lens) {
            if (bench_matmul_bytes(model.d, seq, spec.quant) > spec.max_bytes) {
                std::fprintf(stderr, "bench-matmul: skipping %s @%zu (exceeds max-bytes)\n",
                             model.name.c_str(), seq);
                continue;
            }
            // Logical multiply: a (1 x d) times B (d x seq); inner packs B^T.
            const std::uint64_t shape_seed =
                spec.seed ^ (model.d * 0x9e3779b97f4a7c15ull) ^ (seq * 0xc2b2ae3d27d4eb4full);
            const Matrix b_outer_f32 = gaussian_matrix(shape_seed, model.d, seq);
            const Vector a(gaussian_matrix(shape_seed ^ 1, 1, model.d).data());
            const PackedMatrix outer = quantize_matrix(b_outer_f32, GroupAxis::Outer, spec.quant);
            const PackedMatrix inner =
                quantize_matrix(transpose(b_outer_f32), GroupAxis::Inner, spec.quant);

            std::vector<float> out(seq);
            std::vector<double> acc(seq);
            TrafficStats stats;
            const double t_ref = time_kernel(
                [&] { detail::gemv_ref_into(a, b_outer_f32, acc, out); }, spec.reps, spec.warmup);
            const double t_outer = time_kernel(
                [&] {
                    stats = TrafficStats{};
                    qgemv_outer_into(a, outer, out, acc, stats);
                },
                spec.reps, spec.warmup);
            const TrafficStats outer_stats = stats;
            const double t_inner = time_kernel(
                [&] {
                    stats = TrafficStats{};
                    qgemv_inner_into(a, inner, out, stats);
                },
                spec.reps, spec.warmup);
            const TrafficStats inner_stats = stats;

            const double ms = 1e3;
            report.rows.push_back({model.name, "matmul-ref", seq, t_ref * ms, 0.0,
                                   speedup_pct(t_ref, t_outer)});
            report.rows.push_back({model.name, "qgemv-outer", seq, t_outer * ms,
                                   speedup_pct(t_outer, t_ref), 0.0});
            report.rows.push_back({model.name, "qgemv-inner", seq, t_inner * ms,
                                   speedup_pct(t_inner, t_ref), speedup_pct(t_inner, t_outer)});
            report.traffic.push_back(
                {model.name, seq, inner_stats.scale_loads, outer_stats.scale_loads});
        }
    }
    return report;
}

// --- bench-quant ---------------------------------------------------------------

struct BenchQuantRow {
    std::string model;
    std::size_t seq_len = 0;
    double sym_ms = 0.0;
    double hybrid_ms = 0.0;
    double ratio = 0.0;
};

struct BenchQuantReport {
    std::vector<BenchQuantRow> rows;

    Table to_table() const {
        Table t;
        t.columns = {"model", "seq_len", "sym_ms", "hybrid_ms", "ratio"};
        for (const auto& r : rows)
            t.rows.push_back({r.model, std::to_string(r.seq_len), detail::fmt(r.sym_ms, 6),
                              detail::fmt(r.hybrid_ms, 6), detail::fmt(r.ratio, 4)});
        return t;
    }
};

// Round-trip spot check: quantization must honor the half-scale bound before
// it is timed.
inline void verify_quantizer_or_throw(const QuantConfig& cfg, std::uint64_t seed) {
    for (Mode mode : {Mode::Sym, Mode::Hybrid}) {
        QuantConfig q = cfg;
        q.mode = mode;
        const Matrix m = gaussian_matrix(seed ^ 0x9a7eull, 8, 64);
        const PackedMatrix p = quantize_matrix(m, GroupAxis::Inner, q);
        const Matrix rec = dequantize_matrix(p);
        const std::size_t gpr = p.groups_per_row();
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t c = 0; c < m.cols(); ++c) {
                const double bound =
                    p.scales[r * gpr + c / static_cast<std::size_t>(q.group_size)] / 2.0 + 1e-5;
                if (std::abs(double(m.at(r, c)) - rec.at(r, c)) > bound)
                    throw std::runtime_error(
                        "quantizer verification failed: round-trip bound violated");
            }
    }
}

inline BenchQuantReport cmd_bench_quant(const BenchSpec& spec) {
    spec.validate();
    verify_quantizer_or_throw(spec.quant, spec.seed);
    BenchQuantReport report;
    QuantConfig sym = spec.quant;
    sym.mode = Mode::Sym;
    QuantConfig hybrid = spec.quant;
    hybrid.mode = Mode::Hybrid;
    for (const auto& model : spec.models) {
        for (std::size_t seq : spec.seq_lens) {
            const std::uint64_t elems = static_cast<std::uint64_t>(model.d) * seq;
            if (elems * sizeof(float) > spec.max_bytes) {
                std::fprintf(stderr, "bench-quant: skipping %s @%zu (exceeds max-bytes)\n",
                             model.name.c_str(), seq);
                continue;
            }
            const Matrix m = gaussian_matrix(spec.seed ^ (elems * 0x9e3779b97f4a7c15ull), seq, model.d);
            PackedMatrix sink;  // keep the result alive so the work is not elided
            const double t_sym = time_kernel(
                [&] { sink = quantize_matrix(m, GroupAxis::Inner, sym); }, spec.reps, spec.warmup);
            const double t_hybrid = time_kernel(
                [&] { sink = quantize_matrix(m, GroupAxis::Inner, hybrid); }, spec.reps,
                spec.warmup);
            report.rows.push_back({model.name, seq, t_sym * 1e3, t_hybrid * 1e3, t_hybrid / t_sym});
        }
    }
    return report;
}

// --- error-report ----------------------------------------------------------------

struct ErrorReport {
    double sse_asym = 0.0;
    double sse_sym = 0.0;
    double sse_hybrid = 0.0;
    double hybrid_sym_fraction = 0.0;  // fraction of hybrid groups that chose symmetric
    double sse_norm_off = 0.0;         // K-style per-token quantization, raw
    double sse_norm_on = 0.0;          // same, with per-channel normalization folded out

    Table to_table() const {
        Table t;
        t.columns = {"sse_asym", "sse_sym",      "sse_hybrid",
                     "hybrid_sym_fraction", "sse_norm_off", "sse_norm_on"};
        t.rows.push_back({detail::fmt(sse_asym, 6), detail::fmt(sse_sym, 6),
                          detail::fmt(sse_hybrid, 6), detail::fmt(hybrid_sym_fraction, 6),
                          detail::fmt(sse_norm_off, 6), detail::fmt(sse_norm_on, 6)});
        return t;
    }
};

namespace detail {

inline double matrix_sse(const Matrix& a, const Matrix& b) {
    double sse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        sse += e * e;
    }
    return sse;
}

inline double quantize_sse(const Matrix& m, GroupAxis axis, QuantConfig cfg, Mode mode) {
    cfg.mode = mode;
    return matrix_quantization_sse(m, quantize_matrix(m, axis, cfg));
}

}  // namespace detail

inline ErrorReport cmd_error_report(const SyntheticDataSpec& data, const QuantConfig& cfg,
                                    GroupAxis axis, std::size_t rows, std::size_t cols) {
    cfg.validate();
    const Matrix m = make_synthetic_matrix(data, rows, cols);
    ErrorReport rep;
    rep.sse_asym = detail::quantize_sse(m, axis, cfg, Mode::Asym);
    rep.sse_sym = detail::quantize_sse(m, axis, cfg, Mode::Sym);

    QuantConfig hybrid_cfg = cfg;
    hybrid_cfg.mode = Mode::Hybrid;
    const PackedMatrix hybrid = quantize_matrix(m, axis, hybrid_cfg);
    rep.sse_hybrid = matrix_quantization_sse(m, hybrid);
    std::size_t sym_groups = 0;
    for (std::size_t g = 0; g < hybrid.group_count(); ++g)
        if (!hybrid.group_is_asym(g)) ++sym_groups;
    rep.hybrid_sym_fraction =
        hybrid.group_count() ? static_cast<double>(sym_groups) / hybrid.group_count() : 0.0;

    // Normalization effect on K-style data: per-token groups, reconstruction
    // error measured back in the original domain.
    if (cols % 2 == 0) {
        rep.sse_norm_off = detail::matrix_sse(
            m, dequantize_matrix(quantize_matrix(m, GroupAxis::Inner, hybrid_cfg)));
        const NormState norm = compute_key_norm(m);
        const Matrix normed = detail::scale_cols(m, norm.norm_k, /*divide=*/true);
        const Matrix rec = detail::scale_cols(
            dequantize_matrix(quantize_matrix(normed, GroupAxis::Inner, hybrid_cfg)), norm.norm_k,
            /*divide=*/false);
        rep.sse_norm_on = detail::matrix_sse(m, rec);
    }
    return rep;
}

// --- simulate-decode --------------------------------------------------------------

struct SimulateStepRow {
    std::size_t step = 0;
    double max_abs_error = 0.0;
    std::size_t k_quantized = 0;
    std::size_t v_quantized = 0;
    std::size_t k_recent = 0;
    std::size_t v_recent = 0;
    std::size_t total_tokens = 0;
    std::uint64_t cache_bytes = 0;
};

struct SimulateResult {
    bool ok = false;
    double max_error = 0.0;
    std::size_t prefill_tokens = 0;
    std::vector<SimulateStepRow> steps;
    SimulateStepRow prefill_layout;

    Table to_table() const {
        Table t;
        t.columns = {"step",     "max_abs_error", "k_quantized", "v_quantized",
                     "k_recent", "v_recent",      "total_tokens", "cache_bytes"};
        auto push = [&](const SimulateStepRow& r) {
            t.rows.push_back({std::to_string(r.step), detail::fmt(r.max_abs_error, 8),
                              std::to_string(r.k_quantized), std::to_string(r.v_quantized),
                              std::to_string(r.k_recent), std::to_string(r.v_recent),
                              std::to_string(r.total_tokens), std::to_string(r.cache_bytes)});
        };
        push(prefill_layout);
        for (const auto& r : steps) push(r);
        return t;
    }
};

inline std::uint64_t cache_payload_bytes(const QuantizedKVCache& cache) {
    const QuantConfig& q = cache.quant_config();
    const std::uint64_t d = cache.width();
    std::uint64_t bits = 0;
    bits += estimate_packed_bits(q, cache.k_quantized_tokens() * d);
    bits += estimate_packed_bits(q, cache.v_quantized_tokens() * d);
    std::uint64_t window_bytes =
        (cache.sink_tokens() * 2 + cache.k_recent_tokens() + cache.v_recent_tokens()) * d *
        sizeof(float);
    return bits / 8 + window_bytes;
}

inline AttentionWeights random_weights(std::size_t d, std::uint64_t seed) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    auto gen = [&](std::uint64_t salt) {
        Matrix w = gaussian_matrix(seed ^ salt, d, d);
        for (auto& v : w.data()) v = static_cast<float>(v * scale);
        return w;
    };
    return {gen(0x71), gen(0x72), gen(0x73), gen(0x74)};
}

inline SimulateResult cmd_simulate_decode(const ModelDims& dims, const AttentionConfig& cfg,
                                          std::size_t prefill_len, std::size_t decode_steps,
                                          std::uint64_t seed) {
    dims.validate();
    if (prefill_len < 1)
        throw std::invalid_argument("simulate-decode: prefill length must be >= 1");

    const AttentionWeights weights = random_weights(dims.d, seed);
    const Matrix x = gaussian_matrix(seed ^ 0xbeefull, prefill_len, dims.d);

    PrefillResult pre = prefill(x, weights, dims, cfg);
    ReferenceAttention shadow(weights, dims, cfg.rope);
    shadow.prefill(x);

    SimulateResult res;
    res.prefill_tokens = prefill_len;
    const Matrix sink_k0 = pre.cache.k_sink();
    const Matrix sink_v0 = pre.cache.v_sink();

    auto layout_row = [&](std::size_t step, double err) {
        SimulateStepRow r;
        r.step = step;
        r.max_abs_error = err;
        r.k_quantized = pre.cache.k_quantized_tokens();
        r.v_quantized = pre.cache.v_quantized_tokens();
        r.k_recent = pre.cache.k_recent_tokens();
        r.v_recent = pre.cache.v_recent_tokens();
        r.total_tokens = pre.cache.total_tokens();
        r.cache_bytes = cache_payload_bytes(pre.cache);
        return r;
    };
    res.prefill_layout = layout_row(0, 0.0);

    res.ok = true;
    std::mt19937_64 rng(seed ^ 0xfeedull);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t step = 1; step <= decode_steps; ++step) {
        Vector xt(dims.d);
        for (auto& v : xt.data) v = static_cast<float>(dist(rng));
        const Vector got = decode_step(xt, pre.cache, pre.folded_weights, dims, cfg);
        const Vector want = shadow.decode_step(xt);
        double err = 0.0;
        for (std::size_t i = 0; i < got.len(); ++i)
            err = std::max(err, std::abs(static_cast<double>(got[i]) - want[i]));
        res.max_error = std::max(res.max_error, err);
        try {
            pre.cache.check_invariants();
            if (pre.cache.k_sink() != sink_k0 || pre.cache.v_sink() != sink_v0)
                throw std::logic_error("sink windows changed during decode");
        } catch (const std::logic_error&) {
            res.ok = false;
            throw;
        }
        res.steps.push_back(layout_row(step, err));
    }
    return res;
}

// --- dump / load -------------------------------------------------------------------

// Deterministically builds a cache (prefill + appends over seeded data) and
// writes its snapshot.
inline QuantizedKVCache build_seeded_cache(const QuantConfig& qcfg, const WindowConfig& wcfg,
                                           std::size_t d, std::size_t prefill_len,
                                           std::size_t appends, std::uint64_t seed) {
    const Matrix k = gaussian_matrix(seed ^ 0x11ull, prefill_len, d);
    const Matrix v = gaussian_matrix(seed ^ 0x22ull, prefill_len, d);
    QuantizedKVCache cache = QuantizedKVCache::from_prefill(k, v, qcfg, wcfg);
    std::mt19937_64 rng(seed ^ 0x33ull);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t i = 0; i < appends; ++i) {
        Vector kr(d), vr(d);
        for (auto& f : kr.data) f = static_cast<float>(dist(rng));
        for (auto& f : vr.data) f = static_cast<float>(dist(rng));
        cache.append_token(kr, vr);
    }
    return cache;
}

}  // namespace iqkv
