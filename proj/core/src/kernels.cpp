// SPDX-License-Identifier: Apache-2.0
#include "qadapt/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "qadapt/errors.hpp"

namespace qadapt {

namespace kernels {

void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      if (accumulate) {
        c[i * n + j] += s;
      } else {
        c[i * n + j] = s;
      }
    }
  }
}

void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

namespace {

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " needs a matrix, got " + shape_to_string(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner extents differ: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor c({a.rows(), b.cols()});
  kernels::gemm_nn(a.ptr(), b.ptr(), c.mutable_ptr(), a.rows(), a.cols(), b.cols(), false);
  return c;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor softmax_rows(const Tensor& x) {
  x.check_finite("softmax_rows input");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.ptr() + i * n;
    double* yr = y.mutable_ptr() + i * n;
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) throw ContractError("layer_norm eps must be positive");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm gamma/beta " + shape_to_string(gamma.shape()) + "/" +
                         shape_to_string(beta.shape()) + " do not match width of " + shape_to_string(x.shape()));
  }
  Tensor y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.ptr() + i * n;
    double* yr = y.mutable_ptr() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
  }
  return y;
}

Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, double eps) {
  const std::size_t d = v.cols();
  return cross_attention(q, k, v, Tensor::filled({d}, 1.0), Tensor({d}), eps);
}

Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& gamma, const Tensor& beta,
                       double eps) {
  require_rank2(q, "cross_attention");
  require_rank2(k, "cross_attention");
  require_rank2(v, "cross_attention");
  if (q.cols() != k.cols()) {
    throw DimensionError("cross_attention query/key widths differ: " + shape_to_string(q.shape()) + " vs " +
                         shape_to_string(k.shape()));
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("cross_attention key/value counts differ: " + shape_to_string(k.shape()) + " vs " +
                         shape_to_string(v.shape()));
  }
  Tensor scores({q.rows(), k.rows()});
  kernels::gemm_nt(q.ptr(), k.ptr(), scores.mutable_ptr(), q.rows(), q.cols(), k.rows(), false);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (auto& s : scores.mutable_data()) s *= scale;
  return layer_norm(matmul(softmax_rows(scores), v), gamma, beta, eps);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace qadapt
