#pragma once

// Multi-head attention over the quantized cache.
//
// Prefill runs full-precision causal attention (Q/K/V from the unfolded
// weights, RoPE on Q and K), then computes the per-channel key norm from the
// post-RoPE K, normalizes every K partition, quantizes the middle regions and
// folds the norm into W_Q / W_K so decode-time projections come out already
// scaled. The norm is shared within each RoPE channel pair, which is what
// makes the folding commute with the rotation.
//
// Decode projects one token with the folded weights, appends it to the cache,
// and assembles scores and outputs from the three cache segments, using the
// fused inner-grouped kernel for the packed middles.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "iqkv/kernels.hpp"
#include "iqkv/kv_cache.hpp"
#include "iqkv/quant.hpp"
#include "iqkv/tensor.hpp"

namespace iqkv {

struct ModelDims {
    std::size_t d = 0;
    std::size_t heads = 1;

    std::size_t head_dim() const { return d / heads; }

    void validate() const {
        if (d == 0 || heads == 0 || d % heads != 0)
            throw std::invalid_argument("ModelDims: d must be a positive multiple of heads");
        if (head_dim() % 2 != 0)
            throw std::invalid_argument("ModelDims: head dim must be even (RoPE pairs)");
    }
};

struct AttentionWeights {
    Matrix w_q, w_k, w_v, w_o;

    void validate(const ModelDims& dims) const {
        for (const Matrix* w : {&w_q, &w_k, &w_v, &w_o})
            if (w->rows() != dims.d || w->cols() != dims.d)
                throw std::invalid_argument("AttentionWeights: expected d x d matrices");
    }
};

struct RopeParams {
    double theta_base = 10000.0;
    std::size_t max_positions = 131072;

    void validate() const {
        if (!(theta_base > 1.0))
            throw std::invalid_argument("RopeParams: theta base must be > 1");
    }
};

struct NormState {
    std::vector<float> norm_k;  // one positive factor per channel, pair-shared
    bool folded = false;
};

struct AttentionConfig {
    QuantConfig quant;
    WindowConfig windows;
    bool normalize = true;
    RopeParams rope;
};

// Rotates channel pair (2i, 2i+1) of each head by pos * theta_base^(-2i/d_h).
inline Matrix rope_apply(const Matrix& x, std::span<const std::size_t> positions,
                         const ModelDims& dims, const RopeParams& p) {
    dims.validate();
    p.validate();
    if (x.cols() != dims.d)
        throw std::invalid_argument("rope_apply: width != d");
    if (positions.size() != x.rows())
        throw std::invalid_argument("rope_apply: one position per row required");
    const std::size_t dh = dims.head_dim();
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const std::size_t pos = positions[r];
        if (pos >= p.max_positions)
            throw std::out_of_range("rope_apply: position beyond max_positions");
        for (std::size_t h = 0; h < dims.heads; ++h) {
            const std::size_t base = h * dh;
            for (std::size_t i = 0; i < dh / 2; ++i) {
                const double theta =
                    static_cast<double>(pos) *
                    std::pow(p.theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
                const double c = std::cos(theta), s = std::sin(theta);
                const double a = x.at(r, base + 2 * i);
                const double b = x.at(r, base + 2 * i + 1);
                out.at(r, base + 2 * i) = static_cast<float>(a * c - b * s);
                out.at(r, base + 2 * i + 1) = static_cast<float>(a * s + b * c);
            }
        }
    }
    return out;
}

// norm_k[2i] = norm_k[2i+1] = sqrt(max |K| over both channels of the pair and
// all tokens), floored at 1 for all-zero pairs.
inline NormState compute_key_norm(const Matrix& k_post_rope) {
    if (k_post_rope.cols() % 2 != 0)
        throw std::invalid_argument("compute_key_norm: odd channel count");
    NormState n;
    n.norm_k.assign(k_post_rope.cols(), 1.0f);
    for (std::size_t i = 0; i < k_post_rope.cols() / 2; ++i) {
        double amax = 0.0;
        for (std::size_t r = 0; r < k_post_rope.rows(); ++r) {
            amax = std::max(amax, std::abs(static_cast<double>(k_post_rope.at(r, 2 * i))));
            amax = std::max(amax, std::abs(static_cast<double>(k_post_rope.at(r, 2 * i + 1))));
        }
        const float f = amax > 0.0 ? static_cast<float>(std::sqrt(amax)) : 1.0f;
        n.norm_k[2 * i] = f;
        n.norm_k[2 * i + 1] = f;
    }
    return n;
}

inline NormState unit_norm(std::size_t d) {
    NormState n;
    n.norm_k.assign(d, 1.0f);
    return n;
}

namespace detail {

inline void check_norm(const NormState& n) {
    if (n.norm_k.size() % 2 != 0)
        throw std::invalid_argument("NormState: odd channel count");
    for (std::size_t i = 0; i < n.norm_k.size() / 2; ++i) {
        if (!(n.norm_k[2 * i] > 0.0f))
            throw std::invalid_argument("NormState: non-positive norm entry");
        if (n.norm_k[2 * i] != n.norm_k[2 * i + 1])
            throw std::invalid_argument("NormState: norm not shared within RoPE pair");
    }
}

inline Matrix scale_cols(const Matrix& m, const std::vector<float>& f, bool divide) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c)
            out.at(r, c) = divide ? m.at(r, c) / f[c] : m.at(r, c) * f[c];
    return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

}  // namespace detail

// W_K columns divided and W_Q columns multiplied by norm_k; marks the state
// folded. Folding twice is an error.
inline AttentionWeights fold_normalization(const AttentionWeights& w, NormState& norm) {
    if (norm.folded) throw std::logic_error("fold_normalization: already folded");
    detail::check_norm(norm);
    if (norm.norm_k.size() != w.w_q.cols())
        throw std::invalid_argument("fold_normalization: norm width != d");
    AttentionWeights out = w;
    out.w_q = detail::scale_cols(w.w_q, norm.norm_k, /*divide=*/false);
    out.w_k = detail::scale_cols(w.w_k, norm.norm_k, /*divide=*/true);
    norm.folded = true;
    return out;
}

inline AttentionWeights unfold_normalization(const AttentionWeights& w, NormState& norm) {
    if (!norm.folded) throw std::logic_error("unfold_normalization: not folded");
    detail::check_norm(norm);
    AttentionWeights out = w;
    out.w_q = detail::scale_cols(w.w_q, norm.norm_k, /*divide=*/true);
    out.w_k = detail::scale_cols(w.w_k, norm.norm_k, /*divide=*/false);
    norm.folded = false;
    return out;
}

namespace detail {

// Causal full-precision attention over projected Q/K/V, heads processed as
// contiguous d_h column blocks.
inline Matrix causal_attention_output(const Matrix& q, const Matrix& k, const Matrix& v,
                                      const ModelDims& dims) {
    const std::size_t n = q.rows();
    const std::size_t dh = dims.head_dim();
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
    Matrix out(n, dims.d);
    for (std::size_t h = 0; h < dims.heads; ++h) {
        const std::size_t base = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
            Vector scores(i + 1);
            for (std::size_t t = 0; t <= i; ++t) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c)
                    acc += static_cast<double>(q.at(i, base + c)) *
                           static_cast<double>(k.at(t, base + c));
                scores[t] = static_cast<float>(acc);
            }
            const Vector p = softmax_row(scores, scale);
            for (std::size_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (std::size_t t = 0; t <= i; ++t)
                    acc += static_cast<double>(p[t]) * static_cast<double>(v.at(t, base + c));
                out.at(i, base + c) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

}  // namespace detail

struct PrefillResult {
    Matrix output;
    QuantizedKVCache cache;
    NormState norm;
    AttentionWeights folded_weights;
};

inline PrefillResult prefill(const Matrix& x, const AttentionWeights& weights,
                             const ModelDims& dims, const AttentionConfig& cfg) {
    dims.validate();
    weights.validate(dims);
    if (x.rows() < 1 || x.cols() != dims.d)
        throw std::invalid_argument("prefill: input must be N x d with N >= 1");

    const std::size_t n = x.rows();
    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;

    Matrix q = matmul_ref(x, weights.w_q);
    Matrix k = matmul_ref(x, weights.w_k);
    const Matrix v = matmul_ref(x, weights.w_v);
    q = rope_apply(q, positions, dims, cfg.rope);
    k = rope_apply(k, positions, dims, cfg.rope);

    const Matrix attn = detail::causal_attention_output(q, k, v, dims);
    Matrix output = matmul_ref(attn, weights.w_o);

    // Middle regions about to be packed must slice cleanly per head.
    if (n > cfg.windows.sink + cfg.windows.recent &&
        dims.head_dim() % static_cast<std::size_t>(cfg.quant.group_size) != 0)
        throw std::invalid_argument(
            "prefill: head dim must be a multiple of the group size once quantization engages");

    PrefillResult res;
    res.norm = cfg.normalize ? compute_key_norm(k) : unit_norm(dims.d);
    const Matrix k_normed = detail::scale_cols(k, res.norm.norm_k, /*divide=*/true);
    res.cache = QuantizedKVCache::from_prefill(k_normed, v, cfg.quant, cfg.windows);
    res.folded_weights = fold_normalization(weights, res.norm);
    res.output = std::move(output);
    return res;
}

// One decode step. Projections use the folded weights, so k arrives already
// normalized and q pre-scaled; the new token joins the recent window before
// scoring and therefore attends to itself.
inline Vector decode_step(const Vector& x, QuantizedKVCache& cache,
                          const AttentionWeights& folded_weights, const ModelDims& dims,
                          const AttentionConfig& cfg) {
    dims.validate();
    if (!cache.initialized())
        throw std::logic_error("decode_step: cache not initialized by prefill");
    if (x.len() != dims.d)
        throw std::invalid_argument("decode_step: input width != d");

    const Matrix row(1, dims.d, x.data);
    const std::size_t pos = cache.total_tokens();
    const std::size_t positions[1] = {pos};
    Matrix q = matmul_ref(row, folded_weights.w_q);
    Matrix k = matmul_ref(row, folded_weights.w_k);
    const Matrix v = matmul_ref(row, folded_weights.w_v);
    q = rope_apply(q, positions, dims, cfg.rope);
    k = rope_apply(k, positions, dims, cfg.rope);

    cache.append_token(Vector(std::vector<float>(k.row(0).begin(), k.row(0).end())),
                       Vector(std::vector<float>(v.row(0).begin(), v.row(0).end())));

    const std::size_t dh = dims.head_dim();
    const auto G = static_cast<std::size_t>(cfg.quant.group_size);
    if ((cache.k_quantized_tokens() > 0 || cache.v_quantized_tokens() > 0) && dh % G != 0)
        throw std::invalid_argument(
            "decode_step: head dim must be a multiple of the group size once quantization engages");

    const std::size_t total = cache.total_tokens();
    const std::size_t sink_n = cache.sink_tokens();
    const Matrix k_recent = cache.k_recent_matrix();
    const Matrix v_recent = cache.v_recent_matrix();
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));

    Matrix attn(1, dims.d);
    for (std::size_t h = 0; h < dims.heads; ++h) {
        const std::size_t base = h * dh;
        const std::span<const float> qh(q.row(0).data() + base, dh);

        // Scores over [sink | packed middle | recent] in token order.
        Vector s(total);
        std::size_t off = 0;
        for (std::size_t t = 0; t < sink_n; ++t, ++off)
            s[off] = static_cast<float>(
                detail::dot(qh, std::span<const float>(cache.k_sink().row(t).data() + base, dh)));
        if (cache.k_quantized_tokens() > 0) {
            const PackedMatrix kh = slice_packed_cols(cache.k_hat(), base, base + dh);
            TrafficStats ts;
            qgemv_inner_into(Vector(std::vector<float>(qh.begin(), qh.end())), kh,
                             std::span<float>(s.data.data() + off, kh.logical_rows), ts);
            off += kh.logical_rows;
        }
        for (std::size_t t = 0; t < k_recent.rows(); ++t, ++off)
            s[off] = static_cast<float>(
                detail::dot(qh, std::span<const float>(k_recent.row(t).data() + base, dh)));

        const Vector p = softmax_row(s, scale);

        // Output combines the V segments; V's split differs from K's.
        const std::size_t vq = cache.v_quantized_tokens();
        std::vector<double> acc(dh, 0.0);
        for (std::size_t t = 0; t < sink_n; ++t)
            for (std::size_t c = 0; c < dh; ++c)
                acc[c] += static_cast<double>(p[t]) *
                          static_cast<double>(cache.v_sink().at(t, base + c));
        if (vq > 0) {
            const PackedMatrix vh = slice_packed_rows(cache.v_hat(), base, base + dh);
            Vector pmid(std::vector<float>(p.data.begin() + static_cast<std::ptrdiff_t>(sink_n),
                                           p.data.begin() + static_cast<std::ptrdiff_t>(sink_n + vq)));
            KernelReport rep = qgemv_inner(pmid, vh);
            for (std::size_t c = 0; c < dh; ++c) acc[c] += static_cast<double>(rep.output[c]);
        }
        for (std::size_t t = 0; t < v_recent.rows(); ++t)
            for (std::size_t c = 0; c < dh; ++c)
                acc[c] += static_cast<double>(p[sink_n + vq + t]) *
                          static_cast<double>(v_recent.at(t, base + c));
        for (std::size_t c = 0; c < dh; ++c) attn.at(0, base + c) = static_cast<float>(acc[c]);
    }

    const Matrix out = matmul_ref(attn, folded_weights.w_o);
    return Vector(std::vector<float>(out.row(0).begin(), out.row(0).end()));
}

// Plain full-precision MHA engine, the shadow for error reporting: no
// quantization, no normalization, unbounded f32 history.
class ReferenceAttention {
public:
    ReferenceAttention(AttentionWeights weights, ModelDims dims, RopeParams rope)
        : weights_(std::move(weights)), dims_(dims), rope_(rope) {
        dims_.validate();
        weights_.validate(dims_);
    }

    Matrix prefill(const Matrix& x) {
        std::vector<std::size_t> positions(x.rows());
        for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
        Matrix q = matmul_ref(x, weights_.w_q);
        Matrix k = matmul_ref(x, weights_.w_k);
        Matrix v = matmul_ref(x, weights_.w_v);
        q = rope_apply(q, positions, dims_, rope_);
        k = rope_apply(k, positions, dims_, rope_);
        k_hist_ = std::move(k);
        v_hist_ = std::move(v);
        const Matrix attn = detail::causal_attention_output(q, k_hist_, v_hist_, dims_);
        return matmul_ref(attn, weights_.w_o);
    }

    Vector decode_step(const Vector& x) {
        const Matrix row(1, dims_.d, x.data);
        const std::size_t positions[1] = {k_hist_.rows()};
        Matrix q = matmul_ref(row, weights_.w_q);
        Matrix k = matmul_ref(row, weights_.w_k);
        const Matrix v = matmul_ref(row, weights_.w_v);
        q = rope_apply(q, positions, dims_, rope_);
        k = rope_apply(k, positions, dims_, rope_);
        k_hist_ = concat_rows(k_hist_, k);
        v_hist_ = concat_rows(v_hist_, v);

        const std::size_t dh = dims_.head_dim();
        const std::size_t total = k_hist_.rows();
        const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
        Matrix attn(1, dims_.d);
        for (std::size_t h = 0; h < dims_.heads; ++h) {
            const std::size_t base = h * dh;
            const std::span<const float> qh(q.row(0).data() + base, dh);
            Vector s(total);
            for (std::size_t t = 0; t < total; ++t)
                s[t] = static_cast<float>(
                    detail::dot(qh, std::span<const float>(k_hist_.row(t).data() + base, dh)));
            const Vector p = softmax_row(s, scale);
            for (std::size_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (std::size_t t = 0; t < total; ++t)
                    acc += static_cast<double>(p[t]) * static_cast<double>(v_hist_.at(t, base + c));
                attn.at(0, base + c) = static_cast<float>(acc);
            }
        }
        const Matrix out = matmul_ref(attn, weights_.w_o);
        return Vector(std::vector<float>(out.row(0).begin(), out.row(0).end()));
    }

    std::size_t total_tokens() const { return k_hist_.rows(); }
    const Matrix& key_history() const { return k_hist_; }
    const Matrix& value_history() const { return v_hist_; }

private:
    AttentionWeights weights_;
    ModelDims dims_;
    RopeParams rope_;
    Matrix k_hist_, v_hist_;
};

}  // namespace iqkv
