#pragma once

// Dense row-major f32 matrices and the reference linear algebra used as the
// correctness oracle by the quantized paths. Nothing here is performance
// sensitive; accumulation is done in double with a fixed order so equivalence
// tests can use tight tolerances.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace iqkv {

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw std::invalid_argument("Matrix: data length != rows*cols");
        for (float v : data_)
            if (!std::isfinite(v))
                throw std::invalid_argument("Matrix: non-finite value");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0f;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    float& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

    std::span<const float> row(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }
    std::span<float> row(std::size_t r) {
        return {data_.data() + r * cols_, cols_};
    }

    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Decode-phase row vector (query / attention-weight row). Unlike Matrix,
// entries may be -inf after masking, so no finiteness check at construction.
struct Vector {
    std::vector<float> data;

    Vector() = default;
    explicit Vector(std::size_t len) : data(len, 0.0f) {}
    explicit Vector(std::vector<float> d) : data(std::move(d)) {}

    std::size_t len() const { return data.size(); }
    float operator[](std::size_t i) const { return data[i]; }
    float& operator[](std::size_t i) { return data[i]; }

    bool operator==(const Vector&) const = default;
};

// C = A*B with per-element double accumulation, left-to-right over k, rounded
// to f32 once. Deterministic by construction.
inline Matrix matmul_ref(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul_ref: inner dimensions differ");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k)
                acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
            c.at(i, j) = static_cast<float>(acc);
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c)
            t.at(c, r) = m.at(r, c);
    return t;
}

// Numerically stable softmax of (s * scale). -inf entries get weight 0.
inline Vector softmax_row(const Vector& s, float scale) {
    if (s.len() == 0)
        throw std::invalid_argument("softmax_row: empty vector");
    std::vector<double> scaled(s.len());
    double max_v = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < s.len(); ++i) {
        scaled[i] = static_cast<double>(s[i]) * static_cast<double>(scale);
        max_v = std::max(max_v, scaled[i]);
    }
    if (!std::isfinite(max_v))
        throw std::domain_error("softmax_row: no finite entries");
    double sum = 0.0;
    for (double& v : scaled) {
        v = std::exp(v - max_v);
        sum += v;
    }
    Vector p(s.len());
    for (std::size_t i = 0; i < s.len(); ++i)
        p[i] = static_cast<float>(scaled[i] / sum);
    return p;
}

// Rows [from, to). slice_rows(concat_rows(a, b), 0, a.rows()) == a.
inline Matrix slice_rows(const Matrix& m, std::size_t from, std::size_t to) {
    if (from > to || to > m.rows())
        throw std::out_of_range("slice_rows: bad range");
    Matrix s(to - from, m.cols());
    std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(from * m.cols()),
              m.data().begin() + static_cast<std::ptrdiff_t>(to * m.cols()),
              s.data().begin());
    return s;
}

// Last n rows, the A[-n:, :] idiom.
inline Matrix slice_rows_from_end(const Matrix& m, std::size_t n) {
    if (n > m.rows())
        throw std::out_of_range("slice_rows_from_end: n > rows");
    return slice_rows(m, m.rows() - n, m.rows());
}

inline Matrix concat_rows(const Matrix& a, const Matrix& b) {
    if (a.rows() == 0) return b;
    if (b.rows() == 0) return a;
    if (a.cols() != b.cols())
        throw std::invalid_argument("concat_rows: column counts differ");
    Matrix c(a.rows() + b.rows(), a.cols());
    std::copy(a.data().begin(), a.data().end(), c.data().begin());
    std::copy(b.data().begin(), b.data().end(),
              c.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
    return c;
}

inline Matrix slice_cols(const Matrix& m, std::size_t from, std::size_t to) {
    if (from > to || to > m.cols())
        throw std::out_of_range("slice_cols: bad range");
    Matrix s(m.rows(), to - from);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = from; c < to; ++c)
            s.at(r, c - from) = m.at(r, c);
    return s;
}

// --- tensor file format -----------------------------------------------------
// Raw little-endian f32, row-major, with a JSON sidecar at <path>.json holding
// {"shape": [rows, cols]}.

inline void save_tensor(const Matrix& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_tensor: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(m.data().data()),
              static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!out) throw std::runtime_error("save_tensor: write failed: " + path.string());

    nlohmann::json sidecar;
    sidecar["shape"] = {m.rows(), m.cols()};
    std::ofstream meta(path.string() + ".json");
    if (!meta) throw std::runtime_error("save_tensor: cannot open sidecar for " + path.string());
    meta << sidecar.dump() << "\n";
}

inline Matrix load_tensor(const std::filesystem::path& path) {
    std::ifstream meta(path.string() + ".json");
    if (!meta) throw std::runtime_error("load_tensor: missing sidecar for " + path.string());
    nlohmann::json sidecar = nlohmann::json::parse(meta);
    if (!sidecar.contains("shape") || !sidecar["shape"].is_array() || sidecar["shape"].size() != 2)
        throw std::runtime_error("load_tensor: malformed sidecar for " + path.string());
    const auto rows = sidecar["shape"][0].get<std::size_t>();
    const auto cols = sidecar["shape"][1].get<std::size_t>();

    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_tensor: cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (bytes != rows * cols * sizeof(float))
        throw std::runtime_error("load_tensor: data length does not match shape: " + path.string());
    std::vector<float> data(rows * cols);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw std::runtime_error("load_tensor: read failed: " + path.string());
    return Matrix(rows, cols, std::move(data));
}

}  // namespace iqkv
