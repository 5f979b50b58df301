// Acceptance suite: one pass/fail line per criterion, pinned tolerances.
// Returns the number of failed criteria as the exit code.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "iqkv/iqkv.hpp"

using namespace iqkv;

namespace {

int g_failures = 0;

void run_criterion(int id, const std::string& name, const std::function<std::string()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = true;
    std::string detail;
    try {
        detail = body();
    } catch (const std::exception& e) {
        pass = false;
        detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion-%02d [%6.2fs] %s%s%s\n", pass ? "PASS" : "FAIL", id, secs,
                name.c_str(), detail.empty() ? "" : ": ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

struct Check {
    void require(bool ok, const std::string& msg) {
        if (!ok) throw std::runtime_error(msg);
    }
    void require_lt(double a, double b, const std::string& msg) {
        if (!(a < b)) {
            std::ostringstream os;
            os << msg << " (" << a << " >= " << b << ")";
            throw std::runtime_error(os.str());
        }
    }
};

std::vector<float> random_group_values(std::mt19937_64& rng, std::size_t n, bool uniform) {
    std::vector<float> v(n);
    if (uniform) {
        std::uniform_real_distribution<float> dist(-4.f, 4.f);
        for (auto& x : v) x = dist(rng);
    } else {
        std::normal_distribution<float> dist(0.f, 1.5f);
        for (auto& x : v) x = dist(rng);
    }
    return v;
}

bool encodings_bit_identical(const GroupEncoding& a, const GroupEncoding& b) {
    return a.codes == b.codes &&
           std::bit_cast<std::uint32_t>(a.scale) == std::bit_cast<std::uint32_t>(b.scale) &&
           a.aux == b.aux && a.is_symmetric == b.is_symmetric;
}

// --- criterion 1: round-trip bound ------------------------------------------------

std::string criterion_round_trip() {
    Check c;
    std::mt19937_64 rng(1001);
    const std::size_t groups = 10000;
    double worst_slack = 0.0;
    for (std::size_t i = 0; i < groups; ++i) {
        const int bits = i % 2 ? 2 : 4;
        const double max_code = double((1u << bits) - 1);
        const auto v = random_group_values(rng, 32, i % 4 < 2);

        const GroupEncoding asym = quantize_group_asym(v, bits);
        const auto rec_a = dequantize_group(asym);
        double lo = v[0], hi = v[0];
        for (float x : v) {
            lo = std::min(lo, double(x));
            hi = std::max(hi, double(x));
        }
        const double s_exact = hi == lo ? 0.0 : (hi - lo) / max_code;
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double q = s_exact == 0.0 ? 0.0 : std::nearbyint((double(v[j]) - lo) / s_exact);
            if (q < 0.0 || q > max_code) continue;  // clipped, excluded by the criterion
            const double s = asym.scale;
            const double tol = s / 2 + s * 2e-6 + (std::abs(double(v[j])) + 1.0) * 2e-7;
            const double err = std::abs(double(v[j]) - double(rec_a[j]));
            c.require(err <= tol, "asym round-trip bound violated");
            worst_slack = std::max(worst_slack, err - s / 2);
        }

        const GroupEncoding sym = quantize_group_sym(v, bits);
        const auto rec_s = dequantize_group(sym);
        double amax = 0.0;
        for (float x : v) amax = std::max(amax, std::abs(double(x)));
        const double ss_exact = amax == 0.0 ? 0.0 : amax / max_code;
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double q = ss_exact == 0.0 ? 0.0 : std::nearbyint(std::abs(double(v[j])) / ss_exact);
            if (q > max_code) continue;
            const double s = sym.scale;
            const double tol = s / 2 + s * 2e-6 + (std::abs(double(v[j])) + 1.0) * 2e-7;
            c.require(std::abs(double(v[j]) - double(rec_s[j])) <= tol,
                      "sym round-trip bound violated");
        }
    }
    std::ostringstream os;
    os << groups << " groups x {asym,sym}, b in {2,4}; worst ulp excess over S/2 = "
       << std::scientific << worst_slack;
    return os.str();
}

// --- criterion 2: hybrid optimality ------------------------------------------------

std::string criterion_hybrid_optimality() {
    Check c;
    std::mt19937_64 rng(1002);
    for (std::size_t i = 0; i < 10000; ++i) {
        const int bits = i % 3 ? 2 : 4;
        auto v = random_group_values(rng, 32, i % 2);
        if (i % 7 == 0)
            for (auto& x : v) x = std::abs(x) + 0.5f;  // positive data exercises asym wins
        const auto [enc, stats] = quantize_group_hybrid(v, bits);
        const GroupEncoding sym = quantize_group_sym(v, bits);
        const GroupEncoding asym = quantize_group_asym(v, bits);
        c.require(stats.sse_sym == group_sse(v, sym), "reported sym SSE mismatch");
        c.require(stats.sse_asym == group_sse(v, asym), "reported asym SSE mismatch");
        c.require(group_sse(v, enc) == std::min(stats.sse_sym, stats.sse_asym),
                  "hybrid SSE is not the exact min");
        const GroupEncoding& want = stats.sse_asym < stats.sse_sym ? asym : sym;
        c.require(encodings_bit_identical(enc, want),
                  "hybrid encoding not bit-identical to the winning mode");
    }
    return "10000 groups, SSE(hybrid) = min(sym, asym) exactly, winner returned verbatim";
}

// --- criterion 3: kernel equivalence -----------------------------------------------

std::string criterion_kernel_equivalence() {
    Check c;
    std::mt19937_64 rng(1003);
    const std::size_t k_grid[] = {64, 256, 4096};
    const Mode modes[] = {Mode::Asym, Mode::Sym, Mode::Hybrid, Mode::HybridPrefill};
    double worst = 0.0;
    for (int inst = 0; inst < 500; ++inst) {
        const std::size_t k = k_grid[rng() % 3];
        const std::size_t n = 1 + rng() % 64;
        QuantConfig cfg;
        cfg.mode = modes[rng() % 4];
        std::normal_distribution<float> dist(0.f, 1.f);
        Vector a(k);
        for (auto& x : a.data) x = dist(rng);

        Vector got, want;
        if (inst % 2 == 0) {
            Matrix bt(n, k);
            for (auto& x : bt.data()) x = dist(rng);
            const PackedMatrix p = quantize_matrix(bt, GroupAxis::Inner, cfg);
            got = qgemv_inner(a, p).output;
            want = Vector(matmul_ref(Matrix(1, k, a.data), transpose(dequantize_matrix(p))).data());
        } else {
            Matrix b(k, n);
            for (auto& x : b.data()) x = dist(rng);
            const PackedMatrix p = quantize_matrix(b, GroupAxis::Outer, cfg);
            got = qgemv_outer(a, p).output;
            want = Vector(matmul_ref(Matrix(1, k, a.data), dequantize_matrix(p)).data());
        }
        for (std::size_t j = 0; j < got.len(); ++j) {
            const double rel = std::abs(double(got[j]) - double(want[j])) /
                               (1.0 + std::abs(double(want[j])));
            worst = std::max(worst, rel);
            c.require(rel <= 1e-4, "kernel output deviates from dequantize-then-matmul oracle");
        }
    }
    std::ostringstream os;
    os << "500 instances, K in {64,256,4096}, N_out in [1,64], all modes, both axes; worst rel err "
       << std::scientific << worst;
    return os.str();
}

// --- criterion 4: traffic ratio + bench table ---------------------------------------

std::string criterion_traffic_and_bench() {
    Check c;
    BenchSpec spec;  // full paper grid, capped by max_bytes (memory permitting)
    spec.warmup = 1;
    spec.reps = 3;
    spec.seed = 1004;
    spec.quant.bits = 2;
    spec.quant.mode = Mode::Hybrid;
    spec.max_bytes = 700ull << 20;

    const BenchMatmulReport rep = cmd_bench_matmul(spec);
    c.require(!rep.rows.empty(), "bench produced no rows");
    c.require(!rep.traffic.empty(), "bench produced no traffic stats");
    for (const auto& t : rep.traffic)
        c.require(t.outer_scale_loads == t.inner_scale_loads * 32,
                  "scale-load ratio outer/inner != G");
    double max_inner_ms = 0.0;
    std::size_t inner_rows = 0;
    for (const auto& r : rep.rows)
        if (r.method == "qgemv-inner") {
            ++inner_rows;
            c.require(r.median_ms > 0.0, "inner wall-clock missing");
            max_inner_ms = std::max(max_inner_ms, r.median_ms);
        }
    c.require(inner_rows == rep.traffic.size(), "inner wall-clock row count mismatch");

    std::printf("--- bench-matmul (appendix layout, median ms; reduced reps) ---\n%s",
                rep.to_appendix_table().markdown().c_str());
    std::ostringstream os;
    os << rep.traffic.size()
       << " shapes across 3 presets; scale-load ratio exactly 32 on every shape; "
          "inner wall-clock reported (max "
       << max_inner_ms << " ms)";
    return os.str();
}

// --- criterion 5: hybrid quantization latency parity ---------------------------------

std::string criterion_quant_latency() {
    Check c;
    const ModelPreset model = preset_by_name("llama-3.2-1b");
    const std::size_t seqs[] = {2048, 8192};
    const int pairs = 75;  // interleaved medians over ~5s absorb machine drift
    QuantConfig sym;
    sym.mode = Mode::Sym;
    QuantConfig hybrid;
    hybrid.mode = Mode::Hybrid;

    std::ostringstream os;
    os << "hybrid/sym median ratio:";
    for (const std::size_t seq : seqs) {
        const Matrix m = gaussian_matrix(1005 ^ seq, seq, model.d);
        PackedMatrix sink;
        auto run_sym = [&] { sink = quantize_matrix(m, GroupAxis::Inner, sym); };
        auto run_hybrid = [&] { sink = quantize_matrix(m, GroupAxis::Inner, hybrid); };
        for (int i = 0; i < 3; ++i) {
            run_sym();
            run_hybrid();
        }
        // Interleaved sampling: adjacent sym/hybrid pairs cancel machine
        // drift that separate timing windows would fold into the ratio.
        std::vector<double> ts, th;
        for (int i = 0; i < pairs; ++i) {
            ts.push_back(time_kernel(run_sym, 1, 0));
            th.push_back(time_kernel(run_hybrid, 1, 0));
        }
        std::sort(ts.begin(), ts.end());
        std::sort(th.begin(), th.end());
        const double ratio = th[pairs / 2] / ts[pairs / 2];
        os << " " << seq << "->" << detail::fmt(ratio, 3);
        c.require_lt(ratio, 1.5, "hybrid quantization latency exceeds 1.5x symmetric");
    }
    return os.str();
}

// --- criterion 6: end-to-end degenerate equivalence ----------------------------------

std::string criterion_degenerate_equivalence() {
    Check c;
    std::mt19937_64 rng(1006);
    const std::size_t d_grid[] = {64, 96, 128};
    double worst = 0.0;
    for (int cfg_i = 0; cfg_i < 20; ++cfg_i) {
        const std::size_t d = d_grid[rng() % 3];
        const std::size_t heads = rng() % 2 ? 2 : 4;
        const std::size_t n = 1 + rng() % 64;
        ModelDims dims{d, heads};
        AttentionConfig cfg;
        cfg.quant.mode = Mode::Hybrid;
        cfg.windows.sink = 32;
        cfg.windows.recent = n + 16 + 64;  // quantization disabled: windows cover the run
        cfg.normalize = false;
        const SimulateResult res = cmd_simulate_decode(dims, cfg, n, 16, rng());
        worst = std::max(worst, res.max_error);
        c.require(res.ok, "cache invariant violated");
        c.require(res.max_error <= 1e-5, "decode output deviates from full-precision shadow");
    }
    std::ostringstream os;
    os << "20 configs (d<=128, N<=64, 16 steps), max |err| = " << std::scientific << worst;
    return os.str();
}

// --- criterion 7: fold equivalence -----------------------------------------------------

std::string criterion_fold_equivalence() {
    Check c;
    std::mt19937_64 rng(1007);
    double worst = 0.0;
    for (int inst = 0; inst < 200; ++inst) {
        const std::size_t heads = rng() % 2 ? 2 : 4;
        const std::size_t dh_grid[] = {8, 16, 32};
        const std::size_t d = heads * dh_grid[rng() % 3];
        const ModelDims dims{d, heads};
        const std::size_t n = 2 + rng() % 23;
        std::normal_distribution<float> dist(0.f, 1.f);
        auto rand_m = [&](std::size_t r, std::size_t cc) {
            Matrix m(r, cc);
            for (auto& x : m.data()) x = dist(rng) / std::sqrt(float(cc));
            return m;
        };
        const AttentionWeights w{rand_m(d, d), rand_m(d, d), rand_m(d, d), rand_m(d, d)};
        Matrix x(n, d);
        for (auto& e : x.data()) e = dist(rng);
        std::vector<std::size_t> pos(n);
        for (std::size_t i = 0; i < n; ++i) pos[i] = i;
        const RopeParams rope;

        const Matrix q_u = rope_apply(matmul_ref(x, w.w_q), pos, dims, rope);
        const Matrix k_u = rope_apply(matmul_ref(x, w.w_k), pos, dims, rope);
        NormState norm = compute_key_norm(k_u);
        const AttentionWeights fw = fold_normalization(w, norm);
        const Matrix q_f = rope_apply(matmul_ref(x, fw.w_q), pos, dims, rope);
        const Matrix k_f = rope_apply(matmul_ref(x, fw.w_k), pos, dims, rope);

        // Score vector of the newest position against all cached tokens.
        const std::size_t i = n - 1;
        std::vector<double> su(n, 0.0), sf(n, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t ch = 0; ch < d; ++ch) {
                su[t] += double(q_u.at(i, ch)) * double(k_u.at(t, ch));
                sf[t] += double(q_f.at(i, ch)) * double(k_f.at(t, ch));
            }
            const double rel = std::abs(sf[t] - su[t]) / (1.0 + std::abs(su[t]));
            worst = std::max(worst, rel);
            c.require(rel <= 1e-4, "folded score deviates beyond 1e-4 relative");
        }
        std::size_t argmax_u = 0, argmax_f = 0;
        for (std::size_t t = 1; t < n; ++t) {
            if (su[t] > su[argmax_u]) argmax_u = t;
            if (sf[t] > sf[argmax_f]) argmax_f = t;
        }
        c.require(argmax_u == argmax_f, "argmax changed under folding");
    }
    std::ostringstream os;
    os << "200 instances with RoPE active; worst rel score err " << std::scientific << worst
       << "; argmax identical";
    return os.str();
}

// --- criterion 8: window invariants ------------------------------------------------------

std::string criterion_window_invariants() {
    Check c;
    std::mt19937_64 rng(1008);
    const std::size_t d = 64;
    std::normal_distribution<float> dist(0.f, 1.f);
    Matrix k(300, d), v(300, d);
    for (auto& x : k.data()) x = dist(rng);
    for (auto& x : v.data()) x = dist(rng);
    QuantConfig q;
    q.bits = 2;
    q.group_size = 32;
    q.mode = Mode::Hybrid;
    QuantizedKVCache cache = QuantizedKVCache::from_prefill(k, v, q, {32, 96});
    const Matrix sink_k = cache.k_sink();
    const Matrix sink_v = cache.v_sink();

    for (int step = 1; step <= 1000; ++step) {
        Vector kr(d), vr(d);
        for (auto& x : kr.data) x = dist(rng);
        for (auto& x : vr.data) x = dist(rng);
        cache.append_token(kr, vr);
        cache.check_invariants();
        c.require(cache.total_tokens() == 300 + std::size_t(step), "token count wrong");
        c.require(cache.k_sink() == sink_k && cache.v_sink() == sink_v, "sink bytes changed");
        c.require(cache.k_recent_tokens() >= 96 && cache.k_recent_tokens() < 128,
                  "K recent window out of [w_recent, w_recent+G)");
        c.require(cache.v_recent_tokens() >= 96 && cache.v_recent_tokens() < 128,
                  "V recent window out of [w_recent, w_recent+G)");
    }
    return "1000 decode steps after a 300-token prefill; conservation, frozen sink, "
           "recent in [96,128) at every step";
}

// --- criterion 9: packed-size formula ------------------------------------------------------

std::string criterion_packed_size_formula() {
    Check c;
    std::mt19937_64 rng(1009);
    for (int cfg_i = 0; cfg_i < 50; ++cfg_i) {
        QuantConfig q;
        const int bit_grid[] = {1, 2, 4, 8};
        q.bits = bit_grid[rng() % 4];
        const Mode mode_grid[] = {Mode::Asym, Mode::Sym, Mode::Hybrid};
        q.mode = mode_grid[rng() % 3];
        q.group_size = is_hybrid(q.mode) ? 32 : std::array{8, 16, 32}[rng() % 3];
        const std::size_t G = std::size_t(q.group_size);

        const GroupAxis axis = rng() % 2 ? GroupAxis::Inner : GroupAxis::Outer;
        // Group counts stay a multiple of 8 so the bit-packed mask fills whole bytes.
        const std::size_t grouped = G * (1 + rng() % 6);
        const std::size_t other = 8 * (1 + rng() % 8);
        const std::size_t rows = axis == GroupAxis::Inner ? other : grouped;
        const std::size_t cols = axis == GroupAxis::Inner ? grouped : other;

        std::normal_distribution<float> dist(0.f, 1.f);
        Matrix m(rows, cols);
        for (auto& x : m.data()) x = dist(rng);
        const PackedMatrix p = quantize_matrix(m, axis, q);
        const auto bytes = serialize_packed(p);
        const std::uint64_t payload = bytes.size() - 28;  // fixed header
        const std::uint64_t want_bits = estimate_packed_bits(q, rows * cols);
        c.require(want_bits == payload * 8, "estimate_packed_bits != 8 x serialized payload bytes");

        const PackedSectionSizes s = packed_section_sizes(p);
        c.require(s.payload_bytes() == payload, "section size bookkeeping mismatch");
    }
    return "50 random configs (bits, G, mode, axis): formula == 8 x serialized payload bytes";
}

// --- criterion 10: snapshot round trip --------------------------------------------------------

std::string criterion_snapshot_round_trip() {
    namespace fs = std::filesystem;
    Check c;
    std::mt19937_64 rng(1010);
    const fs::path base = fs::temp_directory_path() / "iqkv_acceptance_snap";
    fs::remove_all(base);
    for (int i = 0; i < 20; ++i) {
        QuantConfig q;
        q.bits = i % 2 ? 2 : 4;
        const Mode mode_grid[] = {Mode::Sym, Mode::Asym, Mode::Hybrid, Mode::HybridPrefill};
        q.mode = mode_grid[i % 4];
        WindowConfig w{i % 3 == 0 ? 0u : 32u, i % 5 == 0 ? 32u : 96u};
        const std::size_t prefill = 50 + rng() % 350;
        const std::size_t appends = rng() % 80;
        const QuantizedKVCache cache =
            build_seeded_cache(q, w, 64, prefill, appends, rng());

        const fs::path dir_a = base / ("a" + std::to_string(i));
        const fs::path dir_b = base / ("b" + std::to_string(i));
        save_cache_snapshot(cache, dir_a);
        const QuantizedKVCache loaded = load_cache_snapshot(dir_a);
        c.require(loaded == cache, "loaded cache differs from the original");
        save_cache_snapshot(loaded, dir_b);
        for (const auto& entry : fs::directory_iterator(dir_a)) {
            const auto name = entry.path().filename();
            std::ifstream fa(dir_a / name, std::ios::binary), fb(dir_b / name, std::ios::binary);
            const std::string ba((std::istreambuf_iterator<char>(fa)),
                                 std::istreambuf_iterator<char>());
            const std::string bb((std::istreambuf_iterator<char>(fb)),
                                 std::istreambuf_iterator<char>());
            c.require(ba == bb, "snapshot file not byte-identical after round trip: " +
                                    name.string());
        }
    }
    fs::remove_all(base);
    return "20 random cache states (all modes, hybrid masks included) byte-identical after "
           "dump -> load -> dump";
}

}  // namespace

int main() {
    std::printf("acceptance suite\n");
    run_criterion(1, "quantization round-trip bound", criterion_round_trip);
    run_criterion(2, "hybrid optimality", criterion_hybrid_optimality);
    run_criterion(3, "kernel equivalence", criterion_kernel_equivalence);
    run_criterion(4, "traffic ratio and bench table", criterion_traffic_and_bench);
    run_criterion(5, "hybrid quantization latency parity", criterion_quant_latency);
    run_criterion(6, "end-to-end degenerate equivalence", criterion_degenerate_equivalence);
    run_criterion(7, "fold equivalence", criterion_fold_equivalence);
    run_criterion(8, "window invariants", criterion_window_invariants);
    run_criterion(9, "packed-size formula", criterion_packed_size_formula);
    run_criterion(10, "snapshot round trip", criterion_snapshot_round_trip);
    std::printf("%d of 10 criteria failed\n", g_failures);
    return g_failures;
}
