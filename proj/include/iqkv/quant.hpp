#pragma once

// Group-wise b-bit quantization with four modes:
//   Asym   - zero point = group min, unsigned codes (Eq. 9 style).
//   Sym    - zero point 0, magnitude codes plus a packed sign word.
//   Hybrid - per group, both encodings are built and the one with the lower
//            sum of squared reconstruction error wins; ties go symmetric.
//   HybridPrefill - Hybrid while quantizing prefill tokens, Sym afterwards.
//
// The unified per-group layout is: b-bit codes, one f32 scale, one 32-bit aux
// word (f32 zero-point bits when asymmetric, packed sign bits when symmetric)
// and one mode-mask bit (1 = asymmetric). Quantization math runs in double
// and rounds half-to-even; scale and zero point are stored as f32.

#include <array>
#include <bit>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define IQKV_QUANT_AVX2 1
#endif

#include "iqkv/bitpack.hpp"
#include "iqkv/tensor.hpp"

namespace iqkv {

enum class Mode : std::uint8_t { Asym = 0, Sym = 1, Hybrid = 2, HybridPrefill = 3 };
enum class GroupAxis : std::uint8_t { Inner = 0, Outer = 1 };
enum class Phase { Prefill, Decode };

inline bool is_hybrid(Mode m) { return m == Mode::Hybrid || m == Mode::HybridPrefill; }

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::Asym: return "asym";
        case Mode::Sym: return "sym";
        case Mode::Hybrid: return "hybrid";
        case Mode::HybridPrefill: return "hybrid-prefill";
    }
    return "?";
}

inline Mode mode_from_name(const std::string& s) {
    if (s == "asym") return Mode::Asym;
    if (s == "sym") return Mode::Sym;
    if (s == "hybrid") return Mode::Hybrid;
    if (s == "hybrid-prefill") return Mode::HybridPrefill;
    throw std::invalid_argument("unknown quantization mode: " + s);
}

struct QuantConfig {
    int bits = 2;
    int group_size = 32;
    Mode mode = Mode::Hybrid;

    void validate() const {
        if (bits < 1 || bits > 8)
            throw std::invalid_argument("QuantConfig: bits must be in [1, 8]");
        if (group_size != 8 && group_size != 16 && group_size != 32)
            throw std::invalid_argument("QuantConfig: group size must be 8, 16 or 32");
        if (is_hybrid(mode) && group_size != 32)
            throw std::invalid_argument(
                "QuantConfig: hybrid modes need G=32 (sign word must fill the 32-bit aux slot)");
    }

    // Mode actually applied to a group created in the given phase.
    Mode group_mode(Phase phase) const {
        if (mode == Mode::HybridPrefill)
            return phase == Phase::Prefill ? Mode::Hybrid : Mode::Sym;
        return mode;
    }

    bool operator==(const QuantConfig&) const = default;
};

struct GroupEncoding {
    std::vector<std::uint32_t> codes;  // magnitudes when symmetric, each < 2^b
    float scale = 0.0f;
    std::uint32_t aux = 0;  // f32 zero-point bits (asym) or packed signs (sym)
    bool is_symmetric = false;

    bool operator==(const GroupEncoding&) const = default;
};

struct GroupErrorStats {
    double sse_sym = 0.0;
    double sse_asym = 0.0;
};

namespace detail {

inline constexpr std::size_t kMaxGroup = 32;

// Stack-only group encoding, shared by the per-group API and the matrix path
// so both produce bit-identical results. The hybrid encoder keeps the exact
// SSE of both candidates.
struct RawGroup {
    std::array<std::uint32_t, kMaxGroup> codes{};
    float scale = 0.0f;
    std::uint32_t aux = 0;
    bool is_symmetric = false;
    double sse_sym = 0.0;
    double sse_asym = 0.0;
};

// Round half to even. nearbyint honors the default FE_TONEAREST mode.
inline double round_half_even(double v) { return std::nearbyint(v); }

// SSE sums run in four interleaved lanes combined pairwise at the end; every
// SSE producer uses this order so exact comparisons across paths hold.
inline double lane_sum(const double acc[4]) {
    return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

// The group min/max never round (comparisons only), so scanning in f32 and
// widening once matches the all-double scan bit for bit.
inline void scan_min_max(const float* v, std::size_t n, float& lo, float& hi) {
    lo = v[0];
    hi = v[0];
    for (std::size_t i = 1; i < n; ++i) {
        lo = std::min(lo, v[i]);
        hi = std::max(hi, v[i]);
    }
}

inline void encode_asym_scalar(const float* v, std::size_t n, double lo, double hi, int bits,
                               RawGroup& out) {
    const double max_code = static_cast<double>((1u << bits) - 1);
    out.is_symmetric = false;
    out.aux = std::bit_cast<std::uint32_t>(static_cast<float>(lo));
    if (hi == lo) {
        out.scale = 0.0f;  // constant group: dequant returns the zero point exactly
        std::fill_n(out.codes.begin(), n, 0u);
        return;
    }
    const double scale = (hi - lo) / max_code;
    out.scale = static_cast<float>(scale);
    for (std::size_t i = 0; i < n; ++i) {
        double q = round_half_even((static_cast<double>(v[i]) - lo) / scale);
        q = std::clamp(q, 0.0, max_code);
        out.codes[i] = static_cast<std::uint32_t>(q);
    }
}

inline void encode_sym_scalar(const float* v, std::size_t n, double amax, int bits,
                              RawGroup& out) {
    const double max_code = static_cast<double>((1u << bits) - 1);
    out.is_symmetric = true;
    if (amax == 0.0) {
        out.scale = 0.0f;
        out.aux = 0;
        std::fill_n(out.codes.begin(), n, 0u);
        return;
    }
    const double scale = amax / max_code;
    out.scale = static_cast<float>(scale);
    std::uint32_t signs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double q = round_half_even(std::abs(static_cast<double>(v[i])) / scale);
        if (q > max_code) q = max_code;
        out.codes[i] = static_cast<std::uint32_t>(q);
        if (v[i] < 0.0f) signs |= 1u << i;
    }
    out.aux = signs;
}

#ifdef IQKV_QUANT_AVX2

// 4-lane double pipeline, bit-identical to the scalar path: vdivpd is
// correctly rounded, _MM_FROUND_TO_NEAREST_INT is half-to-even, and the SSE
// terms are drained to a stack buffer and summed in element order.
inline void encode_sym_avx2(const float* v, std::size_t n, double amax, int bits, RawGroup& out,
                            double* sse) {
    const double max_code = static_cast<double>((1u << bits) - 1);
    out.is_symmetric = true;
    if (amax == 0.0) {
        out.scale = 0.0f;
        out.aux = 0;
        std::fill_n(out.codes.begin(), n, 0u);
        if (sse) *sse = 0.0;
        return;
    }
    const double scale = amax / max_code;
    out.scale = static_cast<float>(scale);
    const __m256d sv = _mm256_set1_pd(scale);
    const __m256d sfv = _mm256_set1_pd(static_cast<double>(out.scale));
    const __m256d maxv = _mm256_set1_pd(max_code);
    const __m256d abs_mask = _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffll));
    const __m128 zero = _mm_setzero_ps();
    std::uint32_t signs = 0;
    __m256d accv = _mm256_setzero_pd();
    for (std::size_t i = 0; i < n; i += 4) {
        const __m128 f = _mm_loadu_ps(v + i);
        signs |= static_cast<std::uint32_t>(_mm_movemask_ps(_mm_cmplt_ps(f, zero))) << i;
        const __m256d x = _mm256_cvtps_pd(f);
        const __m256d ax = _mm256_and_pd(x, abs_mask);
        __m256d q = _mm256_round_pd(_mm256_div_pd(ax, sv),
                                    _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
        q = _mm256_min_pd(q, maxv);
        _mm_storeu_si128(reinterpret_cast<__m128i*>(out.codes.data() + i),
                         _mm256_cvtpd_epi32(q));
        if (sse) {
            // mul then sub, matching the scalar path (no fused rounding)
            const __m256d e = _mm256_sub_pd(ax, _mm256_mul_pd(sfv, q));
            accv = _mm256_add_pd(accv, _mm256_mul_pd(e, e));
        }
    }
    out.aux = signs;
    if (sse) {
        alignas(32) double acc[4];
        _mm256_store_pd(acc, accv);
        *sse = lane_sum(acc);
    }
}

inline void encode_asym_avx2(const float* v, std::size_t n, double lo, double hi, int bits,
                             RawGroup& out, double* sse) {
    const double max_code = static_cast<double>((1u << bits) - 1);
    out.is_symmetric = false;
    const float zp = static_cast<float>(lo);
    out.aux = std::bit_cast<std::uint32_t>(zp);
    if (hi == lo) {
        out.scale = 0.0f;
        std::fill_n(out.codes.begin(), n, 0u);
        if (sse) *sse = 0.0;
        return;
    }
    const double scale = (hi - lo) / max_code;
    out.scale = static_cast<float>(scale);
    const __m256d sv = _mm256_set1_pd(scale);
    const __m256d sfv = _mm256_set1_pd(static_cast<double>(out.scale));
    const __m256d lov = _mm256_set1_pd(lo);
    const __m256d zpv = _mm256_set1_pd(static_cast<double>(zp));
    const __m256d maxv = _mm256_set1_pd(max_code);
    const __m256d zerov = _mm256_setzero_pd();
    __m256d accv = _mm256_setzero_pd();
    for (std::size_t i = 0; i < n; i += 4) {
        const __m256d x = _mm256_cvtps_pd(_mm_loadu_ps(v + i));
        __m256d q = _mm256_round_pd(_mm256_div_pd(_mm256_sub_pd(x, lov), sv),
                                    _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
        q = _mm256_min_pd(_mm256_max_pd(q, zerov), maxv);
        _mm_storeu_si128(reinterpret_cast<__m128i*>(out.codes.data() + i),
                         _mm256_cvtpd_epi32(q));
        if (sse) {
            const __m256d rec = _mm256_add_pd(_mm256_mul_pd(sfv, q), zpv);
            const __m256d e = _mm256_sub_pd(x, rec);
            accv = _mm256_add_pd(accv, _mm256_mul_pd(e, e));
        }
    }
    if (sse) {
        alignas(32) double acc[4];
        _mm256_store_pd(acc, accv);
        *sse = lane_sum(acc);
    }
}

// Single pass over the data computing both candidates and their SSEs; the
// arithmetic matches the separate sym/asym paths op for op.
inline void encode_hybrid_avx2(const float* v, std::size_t n, double lo, double hi, double amax,
                               int bits, RawGroup& sym, RawGroup& asym, double& sse_sym,
                               double& sse_asym) {
    const double max_code = static_cast<double>((1u << bits) - 1);
    const double ss = amax / max_code;
    const double sa = (hi - lo) / max_code;
    sym.is_symmetric = true;
    sym.scale = static_cast<float>(ss);
    asym.is_symmetric = false;
    asym.scale = static_cast<float>(sa);
    const float zp = static_cast<float>(lo);
    asym.aux = std::bit_cast<std::uint32_t>(zp);

    const __m256d ssv = _mm256_set1_pd(ss);
    const __m256d sav = _mm256_set1_pd(sa);
    const __m256d sfsv = _mm256_set1_pd(static_cast<double>(sym.scale));
    const __m256d sfav = _mm256_set1_pd(static_cast<double>(asym.scale));
    const __m256d lov = _mm256_set1_pd(lo);
    const __m256d zpv = _mm256_set1_pd(static_cast<double>(zp));
    const __m256d maxv = _mm256_set1_pd(max_code);
    const __m256d zerov = _mm256_setzero_pd();
    const __m256d abs_mask = _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffll));
    const __m128 zero_ps = _mm_setzero_ps();

    std::uint32_t signs = 0;
    __m256d accs = _mm256_setzero_pd();
    __m256d acca = _mm256_setzero_pd();
    for (std::size_t i = 0; i < n; i += 4) {
        const __m128 f = _mm_loadu_ps(v + i);
        signs |= static_cast<std::uint32_t>(_mm_movemask_ps(_mm_cmplt_ps(f, zero_ps))) << i;
        const __m256d x = _mm256_cvtps_pd(f);
        const __m256d ax = _mm256_and_pd(x, abs_mask);

        __m256d qs = _mm256_round_pd(_mm256_div_pd(ax, ssv),
                                     _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
        qs = _mm256_min_pd(qs, maxv);
        _mm_storeu_si128(reinterpret_cast<__m128i*>(sym.codes.data() + i),
                         _mm256_cvtpd_epi32(qs));
        const __m256d es = _mm256_sub_pd(ax, _mm256_mul_pd(sfsv, qs));
        accs = _mm256_add_pd(accs, _mm256_mul_pd(es, es));

        __m256d qa = _mm256_round_pd(_mm256_div_pd(_mm256_sub_pd(x, lov), sav),
                                     _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
        qa = _mm256_min_pd(_mm256_max_pd(qa, zerov), maxv);
        _mm_storeu_si128(reinterpret_cast<__m128i*>(asym.codes.data() + i),
                         _mm256_cvtpd_epi32(qa));
        const __m256d ea = _mm256_sub_pd(x, _mm256_add_pd(_mm256_mul_pd(sfav, qa), zpv));
        acca = _mm256_add_pd(acca, _mm256_mul_pd(ea, ea));
    }
    sym.aux = signs;
    alignas(32) double acc[4];
    _mm256_store_pd(acc, accs);
    sse_sym = lane_sum(acc);
    _mm256_store_pd(acc, acca);
    sse_asym = lane_sum(acc);
}

#endif  // IQKV_QUANT_AVX2

inline void encode_asym_raw(const float* v, std::size_t n, int bits, RawGroup& out) {
    float lo, hi;
    scan_min_max(v, n, lo, hi);
#ifdef IQKV_QUANT_AVX2
    if (n % 4 == 0) {
        encode_asym_avx2(v, n, lo, hi, bits, out, nullptr);
        return;
    }
#endif
    encode_asym_scalar(v, n, lo, hi, bits, out);
}

inline void encode_sym_raw(const float* v, std::size_t n, int bits, RawGroup& out) {
    float lo, hi;
    scan_min_max(v, n, lo, hi);
    const double amax = std::max(std::abs(static_cast<double>(lo)),
                                 std::abs(static_cast<double>(hi)));
#ifdef IQKV_QUANT_AVX2
    if (n % 4 == 0) {
        encode_sym_avx2(v, n, amax, bits, out, nullptr);
        return;
    }
#endif
    encode_sym_scalar(v, n, amax, bits, out);
}

// Both candidates from one min/max scan. Reconstruction error is measured in
// double (codes x scale, plus zero point for the asymmetric side); the lower
// sum of squares wins, exact ties go symmetric.
inline void encode_hybrid_raw(const float* v, std::size_t n, int bits, RawGroup& out) {
    float lo_f, hi_f;
    scan_min_max(v, n, lo_f, hi_f);
    const double lo = lo_f, hi = hi_f;
    const double amax = std::max(std::abs(lo), std::abs(hi));

    RawGroup sym;
    double sse_sym = 0.0;
    RawGroup asym;
    double sse_asym = 0.0;

#ifdef IQKV_QUANT_AVX2
    if (n % 4 == 0) {
        if (hi != lo) {
            encode_hybrid_avx2(v, n, lo, hi, amax, bits, sym, asym, sse_sym, sse_asym);
        } else {
            encode_sym_avx2(v, n, amax, bits, sym, &sse_sym);
            encode_asym_avx2(v, n, lo, hi, bits, asym, &sse_asym);
        }
    } else
#endif
    {
        encode_sym_scalar(v, n, amax, bits, sym);
        if (amax != 0.0) {
            const double sf = sym.scale;
            double acc[4] = {0.0, 0.0, 0.0, 0.0};
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::abs(static_cast<double>(v[i])) - sf * sym.codes[i];
                acc[i & 3] += e * e;
            }
            sse_sym = lane_sum(acc);
        }
        encode_asym_scalar(v, n, lo, hi, bits, asym);
        if (hi != lo) {
            const double sf = asym.scale;
            const double zp = std::bit_cast<float>(asym.aux);
            double acc[4] = {0.0, 0.0, 0.0, 0.0};
            for (std::size_t i = 0; i < n; ++i) {
                const double e = static_cast<double>(v[i]) - (sf * asym.codes[i] + zp);
                acc[i & 3] += e * e;
            }
            sse_asym = lane_sum(acc);
        }
    }

    out = sse_asym < sse_sym ? asym : sym;
    out.sse_sym = sse_sym;
    out.sse_asym = sse_asym;
}

inline void validate_group_input(std::span<const float> values, int bits, const char* who) {
    if (values.empty() || values.size() > kMaxGroup)
        throw std::invalid_argument(std::string(who) + ": group size must be in [1, 32]");
    if (bits < 1 || bits > 8)
        throw std::invalid_argument(std::string(who) + ": bits out of range");
    for (float v : values)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite value");
}

inline GroupEncoding to_encoding(const RawGroup& rg, std::size_t n) {
    GroupEncoding enc;
    enc.codes.assign(rg.codes.begin(), rg.codes.begin() + static_cast<std::ptrdiff_t>(n));
    enc.scale = rg.scale;
    enc.aux = rg.aux;
    enc.is_symmetric = rg.is_symmetric;
    return enc;
}

}  // namespace detail

inline GroupEncoding quantize_group_asym(std::span<const float> values, int bits) {
    detail::validate_group_input(values, bits, "quantize_group_asym");
    detail::RawGroup rg;
    detail::encode_asym_raw(values.data(), values.size(), bits, rg);
    return detail::to_encoding(rg, values.size());
}

inline GroupEncoding quantize_group_sym(std::span<const float> values, int bits) {
    detail::validate_group_input(values, bits, "quantize_group_sym");
    detail::RawGroup rg;
    detail::encode_sym_raw(values.data(), values.size(), bits, rg);
    return detail::to_encoding(rg, values.size());
}

inline std::vector<float> dequantize_group(const GroupEncoding& enc) {
    std::vector<float> out(enc.codes.size());
    if (enc.is_symmetric) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double mag = static_cast<double>(enc.scale) * enc.codes[i];
            out[i] = static_cast<float>((enc.aux >> i) & 1u ? -mag : mag);
        }
    } else {
        const float zp = std::bit_cast<float>(enc.aux);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<float>(static_cast<double>(enc.scale) * enc.codes[i] +
                                        static_cast<double>(zp));
    }
    return out;
}

// Reconstruction error against the source values. The reconstruction is
// evaluated in double (codes x scale, plus zero point when asymmetric) -- the
// same metric hybrid selection minimizes.
inline double group_sse(std::span<const float> values, const GroupEncoding& enc) {
    double acc[4] = {0.0, 0.0, 0.0, 0.0};
    const double scale = enc.scale;
    if (enc.is_symmetric) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double mag = scale * enc.codes[i];
            const double rec = (enc.aux >> i) & 1u ? -mag : mag;
            const double e = static_cast<double>(values[i]) - rec;
            acc[i & 3] += e * e;
        }
    } else {
        const double zp = std::bit_cast<float>(enc.aux);
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double e = static_cast<double>(values[i]) - (scale * enc.codes[i] + zp);
            acc[i & 3] += e * e;
        }
    }
    return detail::lane_sum(acc);
}

// Builds both encodings, keeps the one with strictly lower SSE; ties go to
// the symmetric encoding (cheaper dequant: no zero-point add).
inline std::pair<GroupEncoding, GroupErrorStats> quantize_group_hybrid(std::span<const float> values,
                                                                       int bits) {
    detail::validate_group_input(values, bits, "quantize_group_hybrid");
    detail::RawGroup rg;
    detail::encode_hybrid_raw(values.data(), values.size(), bits, rg);
    return {detail::to_encoding(rg, values.size()), GroupErrorStats{rg.sse_sym, rg.sse_asym}};
}

// --- packed matrices ---------------------------------------------------------

// A quantized matrix in the unified group layout. Groups are contiguous runs
// of G elements along the grouping axis:
//   Inner: along columns within a row;  group order (row, group-in-row)
//   Outer: along rows within a column;  group order (col, group-in-col)
// Codes are packed group-major into a 32-bit word stream (element j of group
// g sits at bit (g*G + j)*b). One scale, one aux word and one mask bit per
// group; mask bit 1 means the group is asymmetric.
struct PackedMatrix {
    std::size_t logical_rows = 0;
    std::size_t logical_cols = 0;
    int bits = 2;
    int group_size = 32;
    Mode mode = Mode::Sym;
    GroupAxis axis = GroupAxis::Inner;
    std::vector<std::uint32_t> code_words;
    std::vector<float> scales;
    std::vector<std::uint32_t> aux_words;
    std::vector<std::uint8_t> mode_mask;  // bit-packed, 1 bit per group

    std::size_t element_count() const { return logical_rows * logical_cols; }
    std::size_t group_count() const { return element_count() / static_cast<std::size_t>(group_size); }
    std::size_t groups_per_row() const { return logical_cols / static_cast<std::size_t>(group_size); }
    std::size_t groups_per_col() const { return logical_rows / static_cast<std::size_t>(group_size); }

    bool group_is_asym(std::size_t g) const { return (mode_mask[g >> 3] >> (g & 7)) & 1u; }
    void set_group_asym(std::size_t g, bool asym) {
        if (asym)
            mode_mask[g >> 3] |= static_cast<std::uint8_t>(1u << (g & 7));
        else
            mode_mask[g >> 3] &= static_cast<std::uint8_t>(~(1u << (g & 7)));
    }

    std::uint32_t code_at(std::size_t g, std::size_t j) const {
        return read_code(code_words, g * static_cast<std::size_t>(group_size) + j, bits);
    }

    GroupEncoding group_encoding(std::size_t g) const {
        GroupEncoding enc;
        enc.codes.resize(static_cast<std::size_t>(group_size));
        for (std::size_t j = 0; j < enc.codes.size(); ++j) enc.codes[j] = code_at(g, j);
        enc.scale = scales[g];
        enc.aux = aux_words[g];
        enc.is_symmetric = !group_is_asym(g);
        return enc;
    }

    // Dequantizes group g into out[0..G).
    void decode_group_into(std::size_t g, std::span<float> out) const {
        const std::size_t G = static_cast<std::size_t>(group_size);
        const double scale = scales[g];
        if (group_is_asym(g)) {
            const double zp = std::bit_cast<float>(aux_words[g]);
            for (std::size_t j = 0; j < G; ++j)
                out[j] = static_cast<float>(scale * code_at(g, j) + zp);
        } else {
            const std::uint32_t signs = aux_words[g];
            for (std::size_t j = 0; j < G; ++j) {
                const double mag = scale * code_at(g, j);
                out[j] = static_cast<float>((signs >> j) & 1u ? -mag : mag);
            }
        }
    }

    bool operator==(const PackedMatrix&) const = default;
};

namespace detail {

inline PackedMatrix make_packed_shell(std::size_t rows, std::size_t cols, GroupAxis axis,
                                      const QuantConfig& cfg) {
    cfg.validate();
    const auto G = static_cast<std::size_t>(cfg.group_size);
    if (axis == GroupAxis::Inner ? (cols % G != 0) : (rows % G != 0))
        throw std::invalid_argument("quantize_matrix: grouped dimension not divisible by group size");
    PackedMatrix p;
    p.logical_rows = rows;
    p.logical_cols = cols;
    p.bits = cfg.bits;
    p.group_size = cfg.group_size;
    p.mode = cfg.mode;
    p.axis = axis;
    const std::size_t groups = rows * cols / G;
    p.code_words.assign(packed_word_count(rows * cols, cfg.bits), 0u);
    p.scales.assign(groups, 0.0f);
    p.aux_words.assign(groups, 0u);
    p.mode_mask.assign((groups + 7) / 8, 0u);
    return p;
}

inline void encode_group_raw(const float* src, std::size_t n, int bits, Mode mode, RawGroup& rg) {
    switch (mode) {
        case Mode::Asym: encode_asym_raw(src, n, bits, rg); break;
        case Mode::Sym: encode_sym_raw(src, n, bits, rg); break;
        default: encode_hybrid_raw(src, n, bits, rg); break;
    }
}

inline void store_group_raw(PackedMatrix& p, std::size_t g, const RawGroup& rg) {
    const auto G = static_cast<std::size_t>(p.group_size);
    const auto bits = static_cast<std::size_t>(p.bits);
    if ((G * bits) % 32 == 0) {
        // Groups start word-aligned: pack each word with direct shifts.
        const std::size_t words = G * bits / 32;
        const std::size_t cpw = 32 / bits;
        std::size_t w = g * words;
        std::size_t j = 0;
        for (std::size_t k = 0; k < words; ++k, ++w) {
            std::uint32_t word = 0;
            for (std::size_t t = 0; t < cpw; ++t, ++j)
                word |= rg.codes[j] << (t * bits);
            p.code_words[w] = word;
        }
    } else {
        for (std::size_t j = 0; j < G; ++j)
            write_code(p.code_words, g * G + j, p.bits, rg.codes[j]);
    }
    p.scales[g] = rg.scale;
    p.aux_words[g] = rg.aux;
    p.set_group_asym(g, !rg.is_symmetric);
}

}  // namespace detail

inline PackedMatrix quantize_matrix(const Matrix& m, GroupAxis axis, const QuantConfig& cfg,
                                    Phase phase = Phase::Prefill) {
    PackedMatrix p = detail::make_packed_shell(m.rows(), m.cols(), axis, cfg);
    const auto G = static_cast<std::size_t>(cfg.group_size);
    const Mode mode = cfg.group_mode(phase);
    detail::RawGroup rg;
    if (axis == GroupAxis::Inner) {
        const std::size_t gpr = p.groups_per_row();
        for (std::size_t r = 0; r < m.rows(); ++r) {
            const float* row = m.data().data() + r * m.cols();
            for (std::size_t g = 0; g < gpr; ++g) {
                detail::encode_group_raw(row + g * G, G, cfg.bits, mode, rg);
                detail::store_group_raw(p, r * gpr + g, rg);
            }
        }
    } else {
        std::array<float, detail::kMaxGroup> buf{};
        const std::size_t gpc = p.groups_per_col();
        for (std::size_t c = 0; c < m.cols(); ++c) {
            for (std::size_t g = 0; g < gpc; ++g) {
                for (std::size_t j = 0; j < G; ++j) buf[j] = m.at(g * G + j, c);
                detail::encode_group_raw(buf.data(), G, cfg.bits, mode, rg);
                detail::store_group_raw(p, c * gpc + g, rg);
            }
        }
    }
    return p;
}

inline Matrix dequantize_matrix(const PackedMatrix& p) {
    Matrix m(p.logical_rows, p.logical_cols);
    const auto G = static_cast<std::size_t>(p.group_size);
    std::array<float, 32> buf{};
    if (p.axis == GroupAxis::Inner) {
        const std::size_t gpr = p.groups_per_row();
        for (std::size_t r = 0; r < p.logical_rows; ++r) {
            for (std::size_t g = 0; g < gpr; ++g) {
                p.decode_group_into(r * gpr + g, buf);
                float* dst = m.data().data() + r * p.logical_cols + g * G;
                std::copy_n(buf.data(), G, dst);
            }
        }
    } else {
        const std::size_t gpc = p.groups_per_col();
        for (std::size_t c = 0; c < p.logical_cols; ++c) {
            for (std::size_t g = 0; g < gpc; ++g) {
                p.decode_group_into(c * gpc + g, buf);
                for (std::size_t j = 0; j < G; ++j) m.at(g * G + j, c) = buf[j];
            }
        }
    }
    return m;
}

// Double-reconstruction SSE of a packed matrix against its source, group
// order, the same metric hybrid selection uses.
inline double matrix_quantization_sse(const Matrix& m, const PackedMatrix& p) {
    if (m.rows() != p.logical_rows || m.cols() != p.logical_cols)
        throw std::invalid_argument("matrix_quantization_sse: shape mismatch");
    const auto G = static_cast<std::size_t>(p.group_size);
    double sse = 0.0;
    for (std::size_t g = 0; g < p.group_count(); ++g) {
        const double scale = p.scales[g];
        const bool asym = p.group_is_asym(g);
        const double zp = asym ? std::bit_cast<float>(p.aux_words[g]) : 0.0;
        const std::uint32_t signs = asym ? 0u : p.aux_words[g];
        double acc[4] = {0.0, 0.0, 0.0, 0.0};
        for (std::size_t j = 0; j < G; ++j) {
            const float v = p.axis == GroupAxis::Inner
                                ? m.at(g / p.groups_per_row(),
                                       (g % p.groups_per_row()) * G + j)
                                : m.at((g % p.groups_per_col()) * G + j,
                                       g / p.groups_per_col());
            double rec;
            if (asym) {
                rec = scale * p.code_at(g, j) + zp;
            } else {
                const double mag = scale * p.code_at(g, j);
                rec = (signs >> j) & 1u ? -mag : mag;
            }
            const double e = static_cast<double>(v) - rec;
            acc[j & 3] += e * e;
        }
        sse += detail::lane_sum(acc);
    }
    return sse;
}

// Bits needed by the packed payload of `elements` values: codes plus one f32
// scale and one 32-bit aux word per group, plus one mask bit per group for the
// hybrid modes (uniform modes need no stored mask).
inline std::uint64_t estimate_packed_bits(const QuantConfig& cfg, std::uint64_t elements) {
    cfg.validate();
    const auto G = static_cast<std::uint64_t>(cfg.group_size);
    if (elements % G != 0)
        throw std::invalid_argument("estimate_packed_bits: elements not divisible by group size");
    const std::uint64_t groups = elements / G;
    std::uint64_t bits = elements * static_cast<std::uint64_t>(cfg.bits) + groups * (32 + 32);
    if (is_hybrid(cfg.mode)) bits += groups;
    return bits;
}

// --- concatenation helpers used by the cache ---------------------------------

namespace detail {

inline void require_compatible(const PackedMatrix& a, const PackedMatrix& b) {
    if (a.bits != b.bits || a.group_size != b.group_size || a.axis != b.axis)
        throw std::invalid_argument("packed concat: layout mismatch");
}

}  // namespace detail

// Vertical concat of two Inner-grouped matrices (same cols). Group order is
// (row, group-in-row), so b's groups append after a's.
inline PackedMatrix concat_packed_rows(const PackedMatrix& a, const PackedMatrix& b) {
    if (a.element_count() == 0 && a.logical_rows == 0) {
        PackedMatrix r = b;
        return r;
    }
    if (b.element_count() == 0 && b.logical_rows == 0) return a;
    detail::require_compatible(a, b);
    if (a.axis != GroupAxis::Inner || a.logical_cols != b.logical_cols)
        throw std::invalid_argument("concat_packed_rows: shape mismatch");
    PackedMatrix r = a;
    r.logical_rows += b.logical_rows;
    const std::size_t a_codes = a.element_count();
    const std::size_t b_codes = b.element_count();
    r.code_words.resize(packed_word_count(a_codes + b_codes, a.bits), 0u);
    for (std::size_t i = 0; i < b_codes; ++i)
        write_code(r.code_words, a_codes + i, a.bits, read_code(b.code_words, i, a.bits));
    r.scales.insert(r.scales.end(), b.scales.begin(), b.scales.end());
    r.aux_words.insert(r.aux_words.end(), b.aux_words.begin(), b.aux_words.end());
    const std::size_t a_groups = a.group_count();
    const std::size_t total_groups = a_groups + b.group_count();
    r.mode_mask.resize((total_groups + 7) / 8, 0u);
    for (std::size_t g = 0; g < b.group_count(); ++g)
        r.set_group_asym(a_groups + g, b.group_is_asym(g));
    return r;
}

// Horizontal concat of two Inner-grouped matrices (same rows). Per-row group
// runs interleave, so the packed streams are rebuilt.
inline PackedMatrix concat_packed_cols(const PackedMatrix& a, const PackedMatrix& b) {
    if (a.element_count() == 0 && a.logical_cols == 0) return b;
    if (b.element_count() == 0 && b.logical_cols == 0) return a;
    detail::require_compatible(a, b);
    if (a.axis != GroupAxis::Inner || a.logical_rows != b.logical_rows)
        throw std::invalid_argument("concat_packed_cols: shape mismatch");
    PackedMatrix r;
    r.logical_rows = a.logical_rows;
    r.logical_cols = a.logical_cols + b.logical_cols;
    r.bits = a.bits;
    r.group_size = a.group_size;
    r.mode = a.mode;
    r.axis = GroupAxis::Inner;
    const std::size_t G = static_cast<std::size_t>(a.group_size);
    const std::size_t ga = a.groups_per_row(), gb = b.groups_per_row();
    const std::size_t groups = (ga + gb) * r.logical_rows;
    r.code_words.assign(packed_word_count(r.element_count(), r.bits), 0u);
    r.scales.assign(groups, 0.0f);
    r.aux_words.assign(groups, 0u);
    r.mode_mask.assign((groups + 7) / 8, 0u);
    for (std::size_t row = 0; row < r.logical_rows; ++row) {
        for (std::size_t g = 0; g < ga + gb; ++g) {
            const PackedMatrix& src = g < ga ? a : b;
            const std::size_t src_g = row * (g < ga ? ga : gb) + (g < ga ? g : g - ga);
            const std::size_t dst_g = row * (ga + gb) + g;
            for (std::size_t j = 0; j < G; ++j)
                write_code(r.code_words, dst_g * G + j, r.bits, src.code_at(src_g, j));
            r.scales[dst_g] = src.scales[src_g];
            r.aux_words[dst_g] = src.aux_words[src_g];
            r.set_group_asym(dst_g, src.group_is_asym(src_g));
        }
    }
    return r;
}

// Column-range slice of an Inner-grouped matrix; bounds must be group-aligned.
inline PackedMatrix slice_packed_cols(const PackedMatrix& p, std::size_t c0, std::size_t c1) {
    if (p.axis != GroupAxis::Inner)
        throw std::invalid_argument("slice_packed_cols: Inner axis required");
    const std::size_t G = static_cast<std::size_t>(p.group_size);
    if (c0 % G != 0 || c1 % G != 0 || c0 > c1 || c1 > p.logical_cols)
        throw std::invalid_argument("slice_packed_cols: bounds not group-aligned");
    PackedMatrix r;
    r.logical_rows = p.logical_rows;
    r.logical_cols = c1 - c0;
    r.bits = p.bits;
    r.group_size = p.group_size;
    r.mode = p.mode;
    r.axis = GroupAxis::Inner;
    const std::size_t gpr = p.groups_per_row();
    const std::size_t g0 = c0 / G, gn = (c1 - c0) / G;
    const std::size_t groups = gn * r.logical_rows;
    r.code_words.assign(packed_word_count(r.element_count(), r.bits), 0u);
    r.scales.assign(groups, 0.0f);
    r.aux_words.assign(groups, 0u);
    r.mode_mask.assign((groups + 7) / 8, 0u);
    for (std::size_t row = 0; row < r.logical_rows; ++row) {
        for (std::size_t g = 0; g < gn; ++g) {
            const std::size_t src_g = row * gpr + g0 + g;
            const std::size_t dst_g = row * gn + g;
            for (std::size_t j = 0; j < G; ++j)
                write_code(r.code_words, dst_g * G + j, r.bits, p.code_at(src_g, j));
            r.scales[dst_g] = p.scales[src_g];
            r.aux_words[dst_g] = p.aux_words[src_g];
            r.set_group_asym(dst_g, p.group_is_asym(src_g));
        }
    }
    return r;
}

// Row-range slice of an Inner-grouped matrix (rows are group-independent).
inline PackedMatrix slice_packed_rows(const PackedMatrix& p, std::size_t r0, std::size_t r1) {
    if (p.axis != GroupAxis::Inner)
        throw std::invalid_argument("slice_packed_rows: Inner axis required");
    if (r0 > r1 || r1 > p.logical_rows)
        throw std::invalid_argument("slice_packed_rows: bad range");
    PackedMatrix r;
    r.logical_rows = r1 - r0;
    r.logical_cols = p.logical_cols;
    r.bits = p.bits;
    r.group_size = p.group_size;
    r.mode = p.mode;
    r.axis = GroupAxis::Inner;
    const std::size_t G = static_cast<std::size_t>(p.group_size);
    const std::size_t gpr = p.groups_per_row();
    const std::size_t groups = gpr * r.logical_rows;
    r.code_words.assign(packed_word_count(r.element_count(), r.bits), 0u);
    r.scales.assign(groups, 0.0f);
    r.aux_words.assign(groups, 0u);
    r.mode_mask.assign((groups + 7) / 8, 0u);
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t src_g = r0 * gpr + g;
        for (std::size_t j = 0; j < G; ++j)
            write_code(r.code_words, g * G + j, r.bits, p.code_at(src_g, j));
        r.scales[g] = p.scales[src_g];
        r.aux_words[g] = p.aux_words[src_g];
        r.set_group_asym(g, p.group_is_asym(src_g));
    }
    return r;
}

// --- bit-exact dump format ----------------------------------------------------
// magic "IQKV", version u32 LE, bits u8, G u8, mode u8, axis u8, rows u64 LE,
// cols u64 LE, then codes / scales / aux words / mode mask as contiguous LE
// arrays. The mask section exists only for hybrid modes; for uniform modes the
// header's mode field determines every bit.

inline constexpr std::uint32_t kPackedFormatVersion = 1;
inline constexpr char kPackedMagic[4] = {'I', 'Q', 'K', 'V'};

struct PackedSectionSizes {
    std::size_t code_bytes = 0;
    std::size_t scale_bytes = 0;
    std::size_t aux_bytes = 0;
    std::size_t mask_bytes = 0;

    std::size_t payload_bytes() const { return code_bytes + scale_bytes + aux_bytes + mask_bytes; }
};

inline PackedSectionSizes packed_section_sizes(const PackedMatrix& p) {
    PackedSectionSizes s;
    s.code_bytes = p.element_count() * static_cast<std::size_t>(p.bits) / 8;
    s.scale_bytes = p.group_count() * sizeof(float);
    s.aux_bytes = p.group_count() * sizeof(std::uint32_t);
    s.mask_bytes = is_hybrid(p.mode) ? (p.group_count() + 7) / 8 : 0;
    return s;
}

namespace detail {

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T read_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size())
        throw std::runtime_error("packed matrix: truncated file");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
    pos += sizeof(T);
    return static_cast<T>(v);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_packed(const PackedMatrix& p) {
    const PackedSectionSizes sizes = packed_section_sizes(p);
    std::vector<std::uint8_t> out;
    out.reserve(28 + sizes.payload_bytes());
    out.insert(out.end(), kPackedMagic, kPackedMagic + 4);
    detail::append_le<std::uint32_t>(out, kPackedFormatVersion);
    out.push_back(static_cast<std::uint8_t>(p.bits));
    out.push_back(static_cast<std::uint8_t>(p.group_size));
    out.push_back(static_cast<std::uint8_t>(p.mode));
    out.push_back(static_cast<std::uint8_t>(p.axis));
    detail::append_le<std::uint64_t>(out, p.logical_rows);
    detail::append_le<std::uint64_t>(out, p.logical_cols);
    // Code words stream out as little-endian bytes, truncated to exactly the
    // payload bit count (the trailing word may be partial).
    for (std::size_t i = 0; i < sizes.code_bytes; ++i) {
        const std::uint32_t w = p.code_words[i / 4];
        out.push_back(static_cast<std::uint8_t>((w >> (8 * (i % 4))) & 0xff));
    }
    for (float s : p.scales) detail::append_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(s));
    for (std::uint32_t a : p.aux_words) detail::append_le<std::uint32_t>(out, a);
    if (is_hybrid(p.mode))
        out.insert(out.end(), p.mode_mask.begin(), p.mode_mask.end());
    return out;
}

inline PackedMatrix deserialize_packed(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kPackedMagic, 4) != 0)
        throw std::runtime_error("packed matrix: bad magic");
    pos = 4;
    const auto version = detail::read_le<std::uint32_t>(bytes, pos);
    if (version != kPackedFormatVersion)
        throw std::runtime_error("packed matrix: unsupported format version " + std::to_string(version));
    PackedMatrix p;
    p.bits = detail::read_le<std::uint8_t>(bytes, pos);
    p.group_size = detail::read_le<std::uint8_t>(bytes, pos);
    p.mode = static_cast<Mode>(detail::read_le<std::uint8_t>(bytes, pos));
    p.axis = static_cast<GroupAxis>(detail::read_le<std::uint8_t>(bytes, pos));
    p.logical_rows = detail::read_le<std::uint64_t>(bytes, pos);
    p.logical_cols = detail::read_le<std::uint64_t>(bytes, pos);
    if (p.bits < 1 || p.bits > 8 ||
        (p.group_size != 8 && p.group_size != 16 && p.group_size != 32))
        throw std::runtime_error("packed matrix: invalid header fields");
    if (static_cast<std::uint8_t>(p.mode) > 3 || static_cast<std::uint8_t>(p.axis) > 1)
        throw std::runtime_error("packed matrix: invalid header fields");
    const std::size_t grouped_dim =
        p.axis == GroupAxis::Inner ? p.logical_cols : p.logical_rows;
    if (p.element_count() != 0 && grouped_dim % static_cast<std::size_t>(p.group_size) != 0)
        throw std::runtime_error("packed matrix: grouped dimension not divisible by group size");
    const std::size_t groups = p.group_count();
    const PackedSectionSizes sizes{
        p.element_count() * static_cast<std::size_t>(p.bits) / 8,
        groups * sizeof(float), groups * sizeof(std::uint32_t),
        is_hybrid(p.mode) ? (groups + 7) / 8 : 0};
    if (bytes.size() != pos + sizes.payload_bytes())
        throw std::runtime_error("packed matrix: truncated file");
    p.code_words.assign(packed_word_count(p.element_count(), p.bits), 0u);
    for (std::size_t i = 0; i < sizes.code_bytes; ++i)
        p.code_words[i / 4] |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * (i % 4));
    pos += sizes.code_bytes;
    p.scales.resize(groups);
    for (std::size_t g = 0; g < groups; ++g)
        p.scales[g] = std::bit_cast<float>(detail::read_le<std::uint32_t>(bytes, pos));
    p.aux_words.resize(groups);
    for (std::size_t g = 0; g < groups; ++g)
        p.aux_words[g] = detail::read_le<std::uint32_t>(bytes, pos);
    p.mode_mask.assign((groups + 7) / 8, 0u);
    if (is_hybrid(p.mode)) {
        std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), sizes.mask_bytes,
                    p.mode_mask.begin());
        pos += sizes.mask_bytes;
    } else if (p.mode == Mode::Asym) {
        for (std::size_t g = 0; g < groups; ++g) p.set_group_asym(g, true);
    }
    return p;
}

inline void save_packed(const PackedMatrix& p, const std::filesystem::path& path) {
    const auto bytes = serialize_packed(p);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_packed: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("save_packed: write failed: " + path.string());
}

inline PackedMatrix load_packed(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_packed: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize_packed(bytes);
}

}  // namespace iqkv
