#pragma once

#include <span>

// Dense float kernels used by the transformer and the SAE.
//
// The default entry points are OpenMP-parallel over output rows. Each output
// element is produced by exactly one thread with a fixed summation order, so
// results are bitwise independent of the thread count. The `reference`
// namespace keeps plain serial loops (double accumulation) that the tests and
// the benchmark compare against.
namespace featlab::kernels {

// C[m x n] (+)= A[m x k] * B[n x k]^T
void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate = false);

// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate = false);

// C[m x n] (+)= A[k x m]^T * B[k x n]
void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate = false);

// rows x n matrix, bias of length n added to every row.
void add_row_bias(std::span<float> c, std::span<const float> bias, int rows, int n);

// out[j] += sum_i g[i, j]
void accumulate_column_sums(std::span<const float> g, std::span<float> out, int rows, int n);

float gelu(float x);
float gelu_grad(float x);

namespace reference {

void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate = false);
void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate = false);
void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             int m, int n, int k, bool accumulate = false);

} // namespace reference

// Threads the parallel kernels will use (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

} // namespace featlab::kernels
