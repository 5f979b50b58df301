#pragma once

// Windowed quantized KV cache. Token layout per side:
//
//   [ sink (frozen f32) | quantized middle (packed) | recent (f32 ring) ]
//
// K's middle is per-token quantized: each token row becomes d/G groups along
// the channel dim (tokens x d, Inner). V's middle is per-channel quantized in
// blocks of G tokens and is stored channel-major (d x n_quantized, Inner), so
// its quantized token count is always a multiple of G; prefill remainder
// tokens stay in v_recent. Both recent windows evict their oldest G tokens
// only once they hold w_recent + G, keeping the newest w_recent tokens in
// full precision at all times.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "iqkv/quant.hpp"
#include "iqkv/tensor.hpp"

namespace iqkv {

struct WindowConfig {
    std::size_t sink = 32;
    std::size_t recent = 96;

    void validate(const QuantConfig& q) const {
        if (recent < static_cast<std::size_t>(q.group_size))
            throw std::invalid_argument(
                "WindowConfig: recent window must hold at least one quantization group");
    }

    bool operator==(const WindowConfig&) const = default;
};

namespace detail {

// Contiguous row store with amortized O(1) append and front eviction in
// G-sized chunks.
class RowBuffer {
public:
    RowBuffer() = default;
    explicit RowBuffer(std::size_t cols) : cols_(cols) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    void append(std::span<const float> row) {
        data_.insert(data_.end(), row.begin(), row.end());
        ++rows_;
    }

    void append_rows(const Matrix& m) {
        data_.insert(data_.end(), m.data().begin(), m.data().end());
        rows_ += m.rows();
    }

    Matrix front_rows(std::size_t n) const {
        return Matrix(n, cols_, std::vector<float>(data_.begin(),
                                                   data_.begin() + static_cast<std::ptrdiff_t>(n * cols_)));
    }

    void pop_front(std::size_t n) {
        data_.erase(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(n * cols_));
        rows_ -= n;
    }

    Matrix to_matrix() const { return Matrix(rows_, cols_, data_); }

    bool operator==(const RowBuffer&) const = default;

private:
    std::size_t cols_ = 0;
    std::size_t rows_ = 0;
    std::vector<float> data_;
};

}  // namespace detail

class QuantizedKVCache {
public:
    QuantizedKVCache() = default;

    static QuantizedKVCache from_prefill(const Matrix& k, const Matrix& v, const QuantConfig& qcfg,
                                         const WindowConfig& wcfg) {
        qcfg.validate();
        wcfg.validate(qcfg);
        if (k.rows() != v.rows() || k.cols() != v.cols())
            throw std::invalid_argument("kv cache: K and V shapes differ");
        const std::size_t d = k.cols();
        const auto G = static_cast<std::size_t>(qcfg.group_size);
        if (d % G != 0)
            throw std::invalid_argument("kv cache: d not divisible by group size");

        QuantizedKVCache c;
        c.qcfg_ = qcfg;
        c.wcfg_ = wcfg;
        c.initialized_ = true;
        const std::size_t n = k.rows();
        const std::size_t sink_n = std::min(wcfg.sink, n);
        std::size_t mid = 0;
        if (n > wcfg.sink + wcfg.recent) mid = n - wcfg.sink - wcfg.recent;

        c.k_sink_ = slice_rows(k, 0, sink_n);
        c.v_sink_ = slice_rows(v, 0, sink_n);

        // K middle: per-token groups, any token count.
        c.k_hat_ = quantize_matrix(slice_rows(k, sink_n, sink_n + mid), GroupAxis::Inner, qcfg,
                                   Phase::Prefill);
        // V middle: whole G-token blocks only; the remainder rides in v_recent.
        const std::size_t v_mid = (mid / G) * G;
        c.v_hat_ = quantize_matrix(transpose(slice_rows(v, sink_n, sink_n + v_mid)),
                                   GroupAxis::Inner, qcfg, Phase::Prefill);

        c.k_recent_ = detail::RowBuffer(d);
        c.k_recent_.append_rows(slice_rows(k, sink_n + mid, n));
        c.v_recent_ = detail::RowBuffer(d);
        c.v_recent_.append_rows(slice_rows(v, sink_n + v_mid, n));
        c.total_tokens_ = n;
        return c;
    }

    void append_token(const Vector& k_row, const Vector& v_row) {
        require_initialized();
        if (k_row.len() != width() || v_row.len() != width())
            throw std::invalid_argument("append_token: row width != d");
        k_recent_.append(k_row.data);
        v_recent_.append(v_row.data);
        ++total_tokens_;

        const auto G = static_cast<std::size_t>(qcfg_.group_size);
        while (k_recent_.rows() >= wcfg_.recent + G) {
            const Matrix block = k_recent_.front_rows(G);
            k_hat_ = concat_packed_rows(
                k_hat_, quantize_matrix(block, GroupAxis::Inner, qcfg_, Phase::Decode));
            k_recent_.pop_front(G);
        }
        while (v_recent_.rows() >= wcfg_.recent + G) {
            const Matrix block = transpose(v_recent_.front_rows(G));
            v_hat_ = concat_packed_cols(
                v_hat_, quantize_matrix(block, GroupAxis::Inner, qcfg_, Phase::Decode));
            v_recent_.pop_front(G);
        }
    }

    // Three non-overlapping regions in token order. The packed middle for K is
    // tokens x d; for V it is d x tokens (channel-major).
    struct Views {
        Matrix sink;
        PackedMatrix packed;
        Matrix recent;
    };

    Views assemble_key_views() const {
        require_initialized();
        return {k_sink_, k_hat_, k_recent_.to_matrix()};
    }

    Views assemble_value_views() const {
        require_initialized();
        return {v_sink_, v_hat_, v_recent_.to_matrix()};
    }

    bool initialized() const { return initialized_; }
    std::size_t width() const { return k_sink_.cols(); }
    std::size_t total_tokens() const { return total_tokens_; }
    std::size_t sink_tokens() const { return k_sink_.rows(); }
    std::size_t k_quantized_tokens() const { return k_hat_.logical_rows; }
    std::size_t v_quantized_tokens() const { return v_hat_.logical_cols; }
    std::size_t k_recent_tokens() const { return k_recent_.rows(); }
    std::size_t v_recent_tokens() const { return v_recent_.rows(); }

    const Matrix& k_sink() const { return k_sink_; }
    const Matrix& v_sink() const { return v_sink_; }
    const PackedMatrix& k_hat() const { return k_hat_; }
    const PackedMatrix& v_hat() const { return v_hat_; }
    Matrix k_recent_matrix() const { return k_recent_.to_matrix(); }
    Matrix v_recent_matrix() const { return v_recent_.to_matrix(); }

    const QuantConfig& quant_config() const { return qcfg_; }
    const WindowConfig& window_config() const { return wcfg_; }

    // Token conservation, V block granularity, and the recent-window band.
    void check_invariants() const {
        require_initialized();
        const auto G = static_cast<std::size_t>(qcfg_.group_size);
        if (sink_tokens() + k_quantized_tokens() + k_recent_tokens() != total_tokens_)
            throw std::logic_error("kv cache invariant: K token conservation violated");
        if (sink_tokens() + v_quantized_tokens() + v_recent_tokens() != total_tokens_)
            throw std::logic_error("kv cache invariant: V token conservation violated");
        if (v_quantized_tokens() % G != 0)
            throw std::logic_error("kv cache invariant: V quantized tokens not a multiple of G");
        if (total_tokens_ >= wcfg_.sink + wcfg_.recent + G) {
            for (std::size_t r : {k_recent_tokens(), v_recent_tokens()}) {
                if (r < wcfg_.recent || r >= wcfg_.recent + G)
                    throw std::logic_error("kv cache invariant: recent window out of band");
            }
        }
    }

    bool operator==(const QuantizedKVCache&) const = default;

private:
    void require_initialized() const {
        if (!initialized_) throw std::logic_error("kv cache: not initialized by prefill");
    }

    bool initialized_ = false;
    Matrix k_sink_, v_sink_;
    detail::RowBuffer k_recent_, v_recent_;
    PackedMatrix k_hat_;  // tokens x d, per-token groups
    PackedMatrix v_hat_;  // d x tokens, per-channel groups of G tokens
    std::size_t total_tokens_ = 0;
    QuantConfig qcfg_;
    WindowConfig wcfg_;

    friend void save_cache_snapshot(const QuantizedKVCache&, const std::filesystem::path&);
    friend QuantizedKVCache load_cache_snapshot(const std::filesystem::path&);
};

// --- snapshot ----------------------------------------------------------------
// A directory: manifest.json plus the four windows in the tensor file format
// and the two packed middles in the packed dump format.

inline void save_cache_snapshot(const QuantizedKVCache& c, const std::filesystem::path& dir) {
    if (!c.initialized()) throw std::logic_error("snapshot: cache not initialized");
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["total_tokens"] = c.total_tokens();
    manifest["quant"] = {{"bits", c.quant_config().bits},
                         {"group_size", c.quant_config().group_size},
                         {"mode", mode_name(c.quant_config().mode)}};
    manifest["windows"] = {{"sink", c.window_config().sink}, {"recent", c.window_config().recent}};
    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("snapshot: cannot write manifest");
    mf << manifest.dump(2) << "\n";

    save_tensor(c.k_sink_, dir / "k_sink.f32");
    save_tensor(c.v_sink_, dir / "v_sink.f32");
    save_tensor(c.k_recent_.to_matrix(), dir / "k_recent.f32");
    save_tensor(c.v_recent_.to_matrix(), dir / "v_recent.f32");
    save_packed(c.k_hat_, dir / "k_hat.iqkv");
    save_packed(c.v_hat_, dir / "v_hat.iqkv");
}

inline QuantizedKVCache load_cache_snapshot(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("snapshot: missing manifest.json");
    const nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.value("format_version", 0) != 1)
        throw std::runtime_error("snapshot: unsupported manifest version");

    QuantizedKVCache c;
    c.qcfg_.bits = manifest.at("quant").at("bits").get<int>();
    c.qcfg_.group_size = manifest.at("quant").at("group_size").get<int>();
    c.qcfg_.mode = mode_from_name(manifest.at("quant").at("mode").get<std::string>());
    c.wcfg_.sink = manifest.at("windows").at("sink").get<std::size_t>();
    c.wcfg_.recent = manifest.at("windows").at("recent").get<std::size_t>();
    c.total_tokens_ = manifest.at("total_tokens").get<std::size_t>();

    c.k_sink_ = load_tensor(dir / "k_sink.f32");
    c.v_sink_ = load_tensor(dir / "v_sink.f32");
    const Matrix kr = load_tensor(dir / "k_recent.f32");
    const Matrix vr = load_tensor(dir / "v_recent.f32");
    c.k_recent_ = detail::RowBuffer(kr.cols());
    c.k_recent_.append_rows(kr);
    c.v_recent_ = detail::RowBuffer(vr.cols());
    c.v_recent_.append_rows(vr);
    c.k_hat_ = load_packed(dir / "k_hat.iqkv");
    c.v_hat_ = load_packed(dir / "v_hat.iqkv");
    c.initialized_ = true;
    c.check_invariants();
    return c;
}

}  // namespace iqkv
