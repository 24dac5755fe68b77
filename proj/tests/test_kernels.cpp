#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "featlab/kernels.hpp"
#include "featlab/rng.hpp"

using namespace featlab;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

struct Shape {
    int m, n, k;
};

const Shape kShapes[] = {{1, 1, 1}, {5, 7, 3}, {4, 4, 16}, {17, 33, 65}, {64, 64, 64}, {3, 130, 9}, {33, 5, 257}};

// |sum| bound for a dot product of length k with N(0,1) entries.
double tol(int k) { return 1e-5 * k + 1e-5; }

} // namespace

TEST_SUITE("kernels") {

TEST_CASE("gemm variants match the serial reference")
{
    for (const auto& s : kShapes) {
        CAPTURE(s.m);
        CAPTURE(s.n);
        CAPTURE(s.k);
        const auto a = random_vec(static_cast<std::size_t>(s.m) * s.k, 1);
        const auto b_nt = random_vec(static_cast<std::size_t>(s.n) * s.k, 2);
        const auto b_nn = random_vec(static_cast<std::size_t>(s.k) * s.n, 3);
        const auto a_tn = random_vec(static_cast<std::size_t>(s.k) * s.m, 4);
        std::vector<float> c(static_cast<std::size_t>(s.m) * s.n), r(c.size());

        kernels::gemm_nt(a, b_nt, c, s.m, s.n, s.k);
        kernels::reference::gemm_nt(a, b_nt, r, s.m, s.n, s.k);
        for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::fabs(c[i] - r[i]) <= tol(s.k));

        kernels::gemm_nn(a, b_nn, c, s.m, s.n, s.k);
        kernels::reference::gemm_nn(a, b_nn, r, s.m, s.n, s.k);
        for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::fabs(c[i] - r[i]) <= tol(s.k));

        kernels::gemm_tn(a_tn, b_nn, c, s.m, s.n, s.k);
        kernels::reference::gemm_tn(a_tn, b_nn, r, s.m, s.n, s.k);
        for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::fabs(c[i] - r[i]) <= tol(s.k));
    }
}

TEST_CASE("accumulate adds onto the existing output")
{
    const int m = 6, n = 5, k = 7;
    const auto a = random_vec(m * k, 5);
    const auto b = random_vec(n * k, 6);
    std::vector<float> once(m * n), twice(m * n);
    kernels::gemm_nt(a, b, once, m, n, k);
    kernels::gemm_nt(a, b, twice, m, n, k);
    kernels::gemm_nt(a, b, twice, m, n, k, true);
    for (int i = 0; i < m * n; ++i) CHECK(twice[i] == doctest::Approx(2.0f * once[i]).epsilon(1e-6));
}

TEST_CASE("parallel results are bitwise independent of the thread count")
{
    const int saved = kernels::max_threads();
    const int m = 67, n = 45, k = 129;
    const auto a = random_vec(m * k, 7);
    const auto b = random_vec(n * k, 8);
    const auto b2 = random_vec(k * n, 9);
    std::vector<std::vector<float>> outs;
    for (int threads : {1, 2, 3, 8}) {
        kernels::set_threads(threads);
        std::vector<float> c1(m * n), c2(m * n), c3(m * n);
        kernels::gemm_nt(a, b, c1, m, n, k);
        kernels::gemm_nn(a, b2, c2, m, n, k);
        kernels::gemm_tn(random_vec(k * m, 10), b2, c3, m, n, k);
        c1.insert(c1.end(), c2.begin(), c2.end());
        c1.insert(c1.end(), c3.begin(), c3.end());
        outs.push_back(c1);
    }
    kernels::set_threads(saved);
    for (std::size_t i = 1; i < outs.size(); ++i) CHECK(std::memcmp(outs[0].data(), outs[i].data(), outs[0].size() * sizeof(float)) == 0);
}

TEST_CASE("row bias and column sums")
{
    std::vector<float> c = {1, 2, 3, 4, 5, 6};
    kernels::add_row_bias(c, std::vector<float>{10, 20, 30}, 2, 3);
    CHECK(c == std::vector<float>{11, 22, 33, 14, 25, 36});
    std::vector<float> sums = {1, 1, 1};
    kernels::accumulate_column_sums(c, sums, 2, 3);
    CHECK(sums == std::vector<float>{26, 48, 70});
}

TEST_CASE("gelu gradient agrees with central differences")
{
    for (float x = -4.0f; x <= 4.0f; x += 0.25f) {
        const double h = 1e-3;
        const double fd = (kernels::gelu(x + static_cast<float>(h)) - kernels::gelu(x - static_cast<float>(h))) / (2 * h);
        CHECK(kernels::gelu_grad(x) == doctest::Approx(fd).epsilon(2e-3));
    }
    CHECK(kernels::gelu(0.0f) == 0.0f);
}

}
