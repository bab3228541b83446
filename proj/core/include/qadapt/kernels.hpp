// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "qadapt/tensor.hpp"

namespace qadapt {

inline constexpr double kLayerNormEps = 1e-5;

// Plain (non-differentiable) tensor arithmetic. Every reduction sums in
// ascending index order so results are bit-reproducible.

/// a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& x);
/// Row-wise normalization over the last axis followed by gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);
/// layer_norm(softmax_rows(q k^T / sqrt(d)) v) with unit gamma and zero beta.
Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, double eps = kLayerNormEps);
Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& gamma, const Tensor& beta,
                       double eps = kLayerNormEps);

double gelu(double x);
double gelu_grad(double x);
double sigmoid(double x);

namespace kernels {

// Raw row-major GEMM variants. `accumulate` adds into c instead of overwriting.
// c[m x n] = a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
// c[m x n] = a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
// c[k x n] = a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

}  // namespace kernels

}  // namespace qadapt
