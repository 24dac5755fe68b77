#include "featlab/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "featlab/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace featlab::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr long kParallelWork = 1L << 15;

void check_sizes(std::span<const float> a, std::size_t na, std::span<const float> b, std::size_t nb,
                 std::span<float> c, std::size_t nc)
{
    if (a.size() < na || b.size() < nb || c.size() < nc) throw ShapeError("gemm: operand too small");
}

} // namespace

namespace {

// Dot products of four rows of A against four rows of B; each B load is reused four times.
inline void dot_4x4(const float* a0, std::size_t k, const float* b0, float* out)
{
    const float* a1 = a0 + k;
    const float* a2 = a1 + k;
    const float* a3 = a2 + k;
    const float* b1 = b0 + k;
    const float* b2 = b1 + k;
    const float* b3 = b2 + k;
    float s00 = 0.f, s01 = 0.f, s02 = 0.f, s03 = 0.f, s10 = 0.f, s11 = 0.f, s12 = 0.f, s13 = 0.f;
    float s20 = 0.f, s21 = 0.f, s22 = 0.f, s23 = 0.f, s30 = 0.f, s31 = 0.f, s32 = 0.f, s33 = 0.f;
#pragma omp simd reduction(+ : s00, s01, s02, s03, s10, s11, s12, s13, s20, s21, s22, s23, s30, s31, s32, s33)
    for (std::size_t p = 0; p < k; ++p) {
        const float x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
        const float y0 = b0[p], y1 = b1[p], y2 = b2[p], y3 = b3[p];
        s00 += x0 * y0; s01 += x0 * y1; s02 += x0 * y2; s03 += x0 * y3;
        s10 += x1 * y0; s11 += x1 * y1; s12 += x1 * y2; s13 += x1 * y3;
        s20 += x2 * y0; s21 += x2 * y1; s22 += x2 * y2; s23 += x2 * y3;
        s30 += x3 * y0; s31 += x3 * y1; s32 += x3 * y2; s33 += x3 * y3;
    }
    const float s[16] = {s00, s01, s02, s03, s10, s11, s12, s13, s20, s21, s22, s23, s30, s31, s32, s33};
    std::copy(s, s + 16, out);
}

inline float dot(const float* a, const float* b, std::size_t k)
{
    float s = 0.f;
#pragma omp simd reduction(+ : s)
    for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
    return s;
}

} // namespace

void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate)
{
    check_sizes(a, std::size_t(m) * k, b, std::size_t(n) * k, c, std::size_t(m) * n);
    const float* A = a.data();
    const float* B = b.data();
    float* C = c.data();
    const std::size_t K = std::size_t(k);
    const int mb = (m + 3) / 4;
    const bool par = long(m) * n * k >= kParallelWork;
    // Work is split by fixed four-row blocks, so every element sees the same
    // summation order whatever the thread count.
#pragma omp parallel for schedule(static) if (par)
    for (int blk = 0; blk < mb; ++blk) {
        const int i0 = blk * 4;
        const int rows = std::min(4, m - i0);
        auto store = [&](int i, int j, float s) {
            float& dst = C[std::size_t(i) * n + j];
            dst = accumulate ? dst + s : s;
        };
        if (rows == 4) {
            float s[16];
            int j = 0;
            for (; j + 4 <= n; j += 4) {
                dot_4x4(A + std::size_t(i0) * K, K, B + std::size_t(j) * K, s);
                for (int r = 0; r < 4; ++r)
                    for (int q = 0; q < 4; ++q) store(i0 + r, j + q, s[r * 4 + q]);
            }
            for (; j < n; ++j)
                for (int r = 0; r < 4; ++r) store(i0 + r, j, dot(A + std::size_t(i0 + r) * K, B + std::size_t(j) * K, K));
        } else {
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < n; ++j) store(i0 + r, j, dot(A + std::size_t(i0 + r) * K, B + std::size_t(j) * K, K));
        }
    }
}

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate)
{
    check_sizes(a, std::size_t(m) * k, b, std::size_t(k) * n, c, std::size_t(m) * n);
    const float* A = a.data();
    const float* B = b.data();
    float* C = c.data();
    const bool par = long(m) * n * k >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < m; ++i) {
        float* ci = C + std::size_t(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) ci[j] = 0.f;
        }
        const float* ai = A + std::size_t(i) * k;
        for (int p = 0; p < k; ++p) {
            const float x = ai[p];
            if (x == 0.f) continue;
            const float* bp = B + std::size_t(p) * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) ci[j] += x * bp[j];
        }
    }
}

void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate)
{
    check_sizes(a, std::size_t(k) * m, b, std::size_t(k) * n, c, std::size_t(m) * n);
    const float* A = a.data();
    const float* B = b.data();
    float* C = c.data();
    const bool par = long(m) * n * k >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < m; ++i) {
        float* ci = C + std::size_t(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) ci[j] = 0.f;
        }
        for (int p = 0; p < k; ++p) {
            const float x = A[std::size_t(p) * m + i];
            if (x == 0.f) continue;
            const float* bp = B + std::size_t(p) * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) ci[j] += x * bp[j];
        }
    }
}

void add_row_bias(std::span<float> c, std::span<const float> bias, int rows, int n)
{
    if (c.size() < std::size_t(rows) * n || bias.size() < std::size_t(n)) throw ShapeError("add_row_bias");
    for (int i = 0; i < rows; ++i) {
        float* ci = c.data() + std::size_t(i) * n;
#pragma omp simd
        for (int j = 0; j < n; ++j) ci[j] += bias[j];
    }
}

void accumulate_column_sums(std::span<const float> g, std::span<float> out, int rows, int n)
{
    if (g.size() < std::size_t(rows) * n || out.size() < std::size_t(n)) throw ShapeError("accumulate_column_sums");
    for (int i = 0; i < rows; ++i) {
        const float* gi = g.data() + std::size_t(i) * n;
#pragma omp simd
        for (int j = 0; j < n; ++j) out[j] += gi[j];
    }
}

// tanh approximation of GELU.
float gelu(float x)
{
    constexpr float c = 0.7978845608028654f; // sqrt(2/pi)
    const float u = c * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

float gelu_grad(float x)
{
    constexpr float c = 0.7978845608028654f;
    const float x2 = x * x;
    const float u = c * (x + 0.044715f * x2 * x);
    const float t = std::tanh(u);
    const float du = c * (1.0f + 3.0f * 0.044715f * x2);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

namespace reference {

void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate)
{
    check_sizes(a, std::size_t(m) * k, b, std::size_t(n) * k, c, std::size_t(m) * n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = accumulate ? c[std::size_t(i) * n + j] : 0.0;
            for (int p = 0; p < k; ++p) s += double(a[std::size_t(i) * k + p]) * b[std::size_t(j) * k + p];
            c[std::size_t(i) * n + j] = float(s);
        }
    }
}

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate)
{
    check_sizes(a, std::size_t(m) * k, b, std::size_t(k) * n, c, std::size_t(m) * n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = accumulate ? c[std::size_t(i) * n + j] : 0.0;
            for (int p = 0; p < k; ++p) s += double(a[std::size_t(i) * k + p]) * b[std::size_t(p) * n + j];
            c[std::size_t(i) * n + j] = float(s);
        }
    }
}

void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate)
{
    check_sizes(a, std::size_t(k) * m, b, std::size_t(k) * n, c, std::size_t(m) * n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = accumulate ? c[std::size_t(i) * n + j] : 0.0;
            for (int p = 0; p < k; ++p) s += double(a[std::size_t(p) * m + i]) * b[std::size_t(p) * n + j];
            c[std::size_t(i) * n + j] = float(s);
        }
    }
}

} // namespace reference

int max_threads()
{
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n)
{
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

} // namespace featlab::kernels
