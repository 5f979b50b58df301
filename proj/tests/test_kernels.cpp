#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <new>
#include <random>
#include <thread>

#include "iqkv/kernels.hpp"
#include "iqkv/quant.hpp"
#include "iqkv/tensor.hpp"

using namespace iqkv;

// Allocation counting hook: the kernels must work group-at-a-time and never
// materialize the dequantized matrix, so the _into variants are heap-free.
static std::atomic<std::uint64_t> g_alloc_count{0};

void* operator new(std::size_t size) {
    g_alloc_count.fetch_add(1, std::memory_order_relaxed);
    if (void* p = std::malloc(size)) return p;
    throw std::bad_alloc();
}
void* operator new[](std::size_t size) { return ::operator new(size); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::uniform_real_distribution<float> dist(-1.5f, 1.5f);
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = dist(rng);
    return m;
}

Vector random_vector(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<float> dist(-1.5f, 1.5f);
    Vector v(n);
    for (auto& x : v.data) x = dist(rng);
    return v;
}

double max_rel_err(const Vector& got, const Vector& want) {
    double worst = 0.0;
    for (std::size_t i = 0; i < got.len(); ++i)
        worst = std::max(worst, std::abs(double(got[i]) - double(want[i])) /
                                    (1.0 + std::abs(double(want[i]))));
    return worst;
}

}  // namespace

TEST_CASE("all-zero codes annihilate", "[kernels]") {
    QuantConfig cfg;
    cfg.mode = Mode::Asym;
    const Vector a(std::vector<float>(64, 1.f));

    const PackedMatrix inner = quantize_matrix(Matrix(4, 64), GroupAxis::Inner, cfg);
    for (float v : qgemv_inner(a, inner).output.data) CHECK(v == 0.f);

    const PackedMatrix outer = quantize_matrix(Matrix(64, 4), GroupAxis::Outer, cfg);
    for (float v : qgemv_outer(a, outer).output.data) CHECK(v == 0.f);
}

TEST_CASE("inner kernel matches the dequantize-then-multiply oracle", "[kernels]") {
    std::mt19937_64 rng(31);
    for (Mode mode : {Mode::Asym, Mode::Sym, Mode::Hybrid}) {
        QuantConfig cfg;
        cfg.mode = mode;
        // Logical multiply a(1x64) x B(64x4); the inner layout packs B^T.
        const Matrix bt = random_matrix(rng, 4, 64);
        const Vector a = random_vector(rng, 64);
        const PackedMatrix packed = quantize_matrix(bt, GroupAxis::Inner, cfg);
        const KernelReport rep = qgemv_inner(a, packed);
        const Vector want(
            matmul_ref(Matrix(1, 64, a.data), transpose(dequantize_matrix(packed))).data());
        CHECK(max_rel_err(rep.output, want) <= 1e-4);
    }
}

TEST_CASE("outer kernel matches the oracle on the same logical matrix", "[kernels]") {
    std::mt19937_64 rng(32);
    QuantConfig cfg;
    cfg.mode = Mode::Hybrid;
    const Matrix b = random_matrix(rng, 64, 4);  // K x N
    const Vector a = random_vector(rng, 64);

    const PackedMatrix outer = quantize_matrix(b, GroupAxis::Outer, cfg);
    const KernelReport rep_outer = qgemv_outer(a, outer);
    const Vector want(matmul_ref(Matrix(1, 64, a.data), dequantize_matrix(outer)).data());
    CHECK(max_rel_err(rep_outer.output, want) <= 1e-4);

    // Re-packed along the other axis, the same logical matrix must agree.
    const PackedMatrix inner = quantize_matrix(transpose(b), GroupAxis::Inner, cfg);
    const KernelReport rep_inner = qgemv_inner(a, inner);
    CHECK(max_rel_err(rep_inner.output, rep_outer.output) <= 2e-4);
}

TEST_CASE("traffic counters follow the per-row fetch model", "[kernels]") {
    QuantConfig cfg;
    cfg.mode = Mode::Sym;
    const Vector a(std::vector<float>(64, 0.5f));

    const PackedMatrix inner = quantize_matrix(Matrix(4, 64), GroupAxis::Inner, cfg);
    const TrafficStats si = qgemv_inner(a, inner).stats;
    CHECK(si.scale_loads == 8);  // N_out * K/G
    CHECK(si.aux_loads == 8);

    const PackedMatrix outer = quantize_matrix(Matrix(64, 4), GroupAxis::Outer, cfg);
    const TrafficStats so = qgemv_outer(a, outer).stats;
    CHECK(so.scale_loads == 256);  // N_out * K
    CHECK(so.scale_loads == si.scale_loads * 32);
}

TEST_CASE("traffic ratio is exactly G for group-aligned shapes", "[kernels]") {
    std::mt19937_64 rng(33);
    QuantConfig cfg;
    cfg.mode = Mode::Hybrid;
    for (auto [k, n] : {std::pair<std::size_t, std::size_t>{64, 32}, {128, 64}, {256, 32}}) {
        const Matrix b = random_matrix(rng, k, n);
        const Vector a = random_vector(rng, k);
        const TrafficStats so = qgemv_outer(a, quantize_matrix(b, GroupAxis::Outer, cfg)).stats;
        const TrafficStats si =
            qgemv_inner(a, quantize_matrix(transpose(b), GroupAxis::Inner, cfg)).stats;
        CHECK(so.scale_loads == si.scale_loads * std::uint64_t(cfg.group_size));
        CHECK(so.aux_loads == si.aux_loads * std::uint64_t(cfg.group_size));
    }
}

TEST_CASE("kernels reject mismatched layouts", "[kernels]") {
    QuantConfig cfg;
    cfg.mode = Mode::Sym;
    const PackedMatrix inner = quantize_matrix(Matrix(4, 64), GroupAxis::Inner, cfg);
    const PackedMatrix outer = quantize_matrix(Matrix(64, 4), GroupAxis::Outer, cfg);
    const Vector a(std::vector<float>(64, 1.f));
    CHECK_THROWS_AS(qgemv_inner(a, outer), std::invalid_argument);
    CHECK_THROWS_AS(qgemv_outer(a, inner), std::invalid_argument);
    CHECK_THROWS_AS(qgemv_inner(Vector(std::vector<float>(32, 1.f)), inner),
                    std::invalid_argument);
    CHECK_THROWS_AS(qgemv_outer(Vector(std::vector<float>(32, 1.f)), outer),
                    std::invalid_argument);
}

TEST_CASE("kernels are deterministic", "[kernels]") {
    std::mt19937_64 rng(34);
    QuantConfig cfg;
    cfg.mode = Mode::Hybrid;
    const Matrix bt = random_matrix(rng, 8, 128);
    const Vector a = random_vector(rng, 128);
    const PackedMatrix packed = quantize_matrix(bt, GroupAxis::Inner, cfg);
    const Vector first = qgemv_inner(a, packed).output;
    const Vector second = qgemv_inner(a, packed).output;
    CHECK(first.data == second.data);
}

TEST_CASE("kernels do not allocate beyond caller buffers", "[kernels]") {
    std::mt19937_64 rng(35);
    QuantConfig cfg;
    cfg.mode = Mode::Hybrid;
    const Matrix bt = random_matrix(rng, 8, 128);
    const Vector a = random_vector(rng, 128);
    const PackedMatrix inner = quantize_matrix(bt, GroupAxis::Inner, cfg);
    std::vector<float> out(8);
    TrafficStats stats;

    const std::uint64_t before = g_alloc_count.load();
    qgemv_inner_into(a, inner, out, stats);
    const std::uint64_t after = g_alloc_count.load();
    CHECK(after == before);

    const PackedMatrix outer = quantize_matrix(transpose(bt), GroupAxis::Outer, cfg);
    std::vector<float> out2(8);
    std::vector<double> acc(8);
    const std::uint64_t before2 = g_alloc_count.load();
    qgemv_outer_into(a, outer, out2, acc, stats);
    const std::uint64_t after2 = g_alloc_count.load();
    CHECK(after2 == before2);
}

TEST_CASE("time_kernel median behaviour", "[kernels]") {
    int calls = 0;
    const double single = time_kernel([&] { ++calls; }, 1, 0);
    CHECK(calls == 1);
    CHECK(single >= 0.0);

    calls = 0;
    time_kernel([&] { ++calls; }, 3, 2);
    CHECK(calls == 5);  // warmup runs execute but are not measured

    CHECK_THROWS_AS(time_kernel([] {}, 0, 0), std::invalid_argument);

    // Known-duration dummy kernel: median within scheduler jitter.
    const double t = time_kernel([] { std::this_thread::sleep_for(std::chrono::milliseconds(2)); },
                                 5, 1);
    CHECK(t >= 0.0019);
    CHECK(t < 0.05);
}
