// SPDX-License-Identifier: Apache-2.0
#include "qadapt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "qadapt/errors.hpp"

namespace qadapt::ad {

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("variable is not attached to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("op inputs live on different tapes");
  return tape_of(a);
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

void require_matrix(const char* op, Var a) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + " needs a matrix, got " + shape_to_string(a.shape()));
  }
}

void axpy(Tensor& dst, const Tensor& src, double alpha = 1.0) {
  double* d = dst.mutable_ptr();
  const double* s = src.ptr();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += alpha * s[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul inner extents differ: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor c({m, n});
  kernels::gemm_nn(a.value().ptr(), b.value().ptr(), c.mutable_ptr(), m, k, n, false);
  const NodeId ai = a.id, bi = b.id;
  return t.push(OpKind::MatMul, {ai, bi}, std::move(c), [ai, bi, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) kernels::gemm_nt(g.ptr(), tp.value(bi).ptr(), tp.grad_buffer(ai).mutable_ptr(), m, n, k, true);
    if (tp.requires_grad(bi)) kernels::gemm_tn(tp.value(ai).ptr(), g.ptr(), tp.grad_buffer(bi).mutable_ptr(), m, k, n, true);
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  require_matrix("transpose", a);
  const NodeId ai = a.id;
  return t.push(OpKind::Transpose, {ai}, qadapt::transpose(a.value()), [ai](Tape& tp, const Tensor& g) {
    axpy(tp.grad_buffer(ai), qadapt::transpose(g));
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a, b);
  Tensor y = a.value();
  axpy(y, b.value());
  const NodeId ai = a.id, bi = b.id;
  return t.push(OpKind::Add, {ai, bi}, std::move(y), [ai, bi](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) axpy(tp.grad_buffer(ai), g);
    if (tp.requires_grad(bi)) axpy(tp.grad_buffer(bi), g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("sub", a, b);
  Tensor y = a.value();
  axpy(y, b.value(), -1.0);
  const NodeId ai = a.id, bi = b.id;
  return t.push(OpKind::Sub, {ai, bi}, std::move(y), [ai, bi](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) axpy(tp.grad_buffer(ai), g);
    if (tp.requires_grad(bi)) axpy(tp.grad_buffer(bi), g, -1.0);
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("mul", a, b);
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  const NodeId ai = a.id, bi = b.id;
  return t.push(OpKind::Mul, {ai, bi}, std::move(y), [ai, bi](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor y = a.value();
  for (auto& v : y.mutable_data()) v *= s;
  const NodeId ai = a.id;
  return t.push(OpKind::Scale, {ai}, std::move(y), [ai, s](Tape& tp, const Tensor& g) {
    axpy(tp.grad_buffer(ai), g, s);
  });
}

Var scale_by(Var a, Var s) {
  Tape& t = tape_of(a, s);
  if (s.value().numel() != 1) throw DimensionError("scale_by needs a single-element scale, got " + shape_to_string(s.shape()));
  const double sv = s.value()[0];
  Tensor y = a.value();
  for (auto& v : y.mutable_data()) v *= sv;
  const NodeId ai = a.id, si = s.id;
  return t.push(OpKind::ScaleBy, {ai, si}, std::move(y), [ai, si](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) axpy(tp.grad_buffer(ai), g, tp.value(si)[0]);
    if (tp.requires_grad(si)) {
      const Tensor& av = tp.value(ai);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * av[i];
      tp.grad_buffer(si)[0] += acc;
    }
  });
}

Var add_rowvec(Var a, Var bias) {
  Tape& t = tape_of(a, bias);
  require_matrix("add_rowvec", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.value().numel() != n) {
    throw DimensionError("add_rowvec bias " + shape_to_string(bias.shape()) + " does not match " +
                         shape_to_string(a.shape()));
  }
  Tensor y = a.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += bv[j];
  const NodeId ai = a.id, bi = bias.id;
  return t.push(OpKind::AddRowVec, {ai, bi}, std::move(y), [ai, bi, m, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) axpy(tp.grad_buffer(ai), g);
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  Tensor y = a.value();
  for (auto& v : y.mutable_data()) v = qadapt::gelu(v);
  const NodeId ai = a.id;
  return t.push(OpKind::Gelu, {ai}, std::move(y), [ai](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ai);
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * gelu_grad(x[i]);
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Tensor y = a.value();
  for (auto& v : y.mutable_data()) v = qadapt::sigmoid(v);
  const NodeId ai = a.id;
  const NodeId yi = static_cast<NodeId>(t.size());
  return t.push(OpKind::Sigmoid, {ai}, std::move(y), [ai, yi](Tape& tp, const Tensor& g) {
    const Tensor& yv = tp.value(yi);
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
  });
}

namespace {

// dx_ij = y_ij (g_ij - sum_k g_ik y_ik)
void softmax_backward(const Tensor& y, const Tensor& g, Tensor& gx) {
  const std::size_t m = y.rows(), n = y.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* yr = y.ptr() + i * n;
    const double* gr = g.ptr() + i * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
    double* out = gx.mutable_ptr() + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - dot);
  }
}

}  // namespace

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  require_matrix("softmax_rows", x);
  const NodeId xi = x.id;
  const NodeId yi = static_cast<NodeId>(t.size());
  return t.push(OpKind::Softmax, {xi}, qadapt::softmax_rows(x.value()), [xi, yi](Tape& tp, const Tensor& g) {
    softmax_backward(tp.value(yi), g, tp.grad_buffer(xi));
  });
}

Var causal_softmax_rows(Var x) {
  Tape& t = tape_of(x);
  require_matrix("causal_softmax_rows", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (m > n) throw DimensionError("causal_softmax_rows needs rows <= cols, got " + shape_to_string(x.shape()));
  const std::size_t offset = n - m;
  Tensor y({m, n});
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t visible = i + offset + 1;
    const double* xr = xv.ptr() + i * n;
    double* yr = y.mutable_ptr() + i * n;
    const double mx = *std::max_element(xr, xr + visible);
    double s = 0.0;
    for (std::size_t j = 0; j < visible; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < visible; ++j) yr[j] /= s;
  }
  const NodeId xi = x.id;
  const NodeId yi = static_cast<NodeId>(t.size());
  return t.push(OpKind::CausalSoftmax, {xi}, std::move(y), [xi, yi](Tape& tp, const Tensor& g) {
    softmax_backward(tp.value(yi), g, tp.grad_buffer(xi));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  if (eps <= 0.0) throw ContractError("layer_norm eps must be positive");
  require_matrix("layer_norm", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.value().numel() != n || beta.value().numel() != n) {
    throw DimensionError("layer_norm gamma/beta do not match width of " + shape_to_string(x.shape()));
  }
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor xhat({m, n});
  std::vector<double> rstd(m);
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = xv.ptr() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * rstd[i];
      xhat[i * n + j] = h;
      y[i * n + j] = h * gv[j] + bv[j];
    }
  }
  const NodeId xi = x.id, gi = gamma.id, bi = beta.id;
  return t.push(OpKind::LayerNorm, {xi, gi, bi}, std::move(y),
                [xi, gi, bi, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& tp, const Tensor& g) {
                  if (tp.requires_grad(gi)) {
                    Tensor& gg = tp.grad_buffer(gi);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
                  }
                  if (tp.requires_grad(bi)) {
                    Tensor& gb = tp.grad_buffer(bi);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                  }
                  if (tp.requires_grad(xi)) {
                    const Tensor& gv = tp.value(gi);
                    Tensor& gx = tp.grad_buffer(xi);
                    std::vector<double> dxhat(n);
                    for (std::size_t i = 0; i < m; ++i) {
                      double mean_d = 0.0, mean_dh = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        dxhat[j] = g[i * n + j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * xhat[i * n + j];
                      }
                      mean_d /= static_cast<double>(n);
                      mean_dh /= static_cast<double>(n);
                      for (std::size_t j = 0; j < n; ++j) {
                        gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dh);
                      }
                    }
                  }
                });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  require_matrix("slice_rows", a);
  const std::size_t n = a.cols();
  if (begin >= end || end > a.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                         shape_to_string(a.shape()));
  }
  const auto first = a.value().data().begin() + static_cast<std::ptrdiff_t>(begin * n);
  Tensor y({end - begin, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>((end - begin) * n)));
  const NodeId ai = a.id;
  return t.push(OpKind::SliceRows, {ai}, std::move(y), [ai, begin, n](Tape& tp, const Tensor& g) {
    double* dst = tp.grad_buffer(ai).mutable_ptr() + begin * n;
    for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  require_matrix("slice_cols", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > n) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                         shape_to_string(a.shape()));
  }
  const std::size_t w = end - begin;
  Tensor y({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = a.value()[i * n + begin + j];
  const NodeId ai = a.id;
  return t.push(OpKind::SliceCols, {ai}, std::move(y), [ai, begin, m, n, w](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += g[i * w + j];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows needs at least one input");
  Tape& t = tape_of(parts[0]);
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    require_matrix("concat_rows", p);
    if (p.cols() != n) throw DimensionError("concat_rows width mismatch: " + shape_to_string(p.shape()));
    ids.push_back(p.id);
    offsets.push_back(total);
    total += p.rows();
  }
  std::vector<double> data;
  data.reserve(total * n);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<NodeId> inputs = ids;
  return t.push(OpKind::ConcatRows, std::move(inputs), Tensor({total, n}, std::move(data)),
                [ids = std::move(ids), offsets = std::move(offsets), n](Tape& tp, const Tensor& g) {
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!tp.requires_grad(ids[k])) continue;
                    Tensor& gp = tp.grad_buffer(ids[k]);
                    const double* src = g.ptr() + offsets[k] * n;
                    for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += src[i];
                  }
                });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols needs at least one input");
  Tape& t = tape_of(parts[0]);
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> offsets, widths;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    require_matrix("concat_cols", p);
    if (p.rows() != m) throw DimensionError("concat_cols height mismatch: " + shape_to_string(p.shape()));
    ids.push_back(p.id);
    offsets.push_back(total);
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor y({m, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) y[i * total + offsets[k] + j] = pv[i * widths[k] + j];
  }
  std::vector<NodeId> inputs = ids;
  return t.push(OpKind::ConcatCols, std::move(inputs), std::move(y),
                [ids = std::move(ids), offsets = std::move(offsets), widths = std::move(widths), m,
                 total](Tape& tp, const Tensor& g) {
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!tp.requires_grad(ids[k])) continue;
                    Tensor& gp = tp.grad_buffer(ids[k]);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + offsets[k] + j];
                  }
                });
}

Var gather_rows(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  require_matrix("gather_rows", table);
  if (ids.empty()) throw ContractError("gather_rows needs at least one id");
  const std::size_t v = table.rows(), n = table.cols();
  Tensor y({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ContractError("gather_rows id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) +
                          " rows");
    }
    const double* src = table.value().ptr() + static_cast<std::size_t>(ids[i]) * n;
    std::copy(src, src + n, y.mutable_ptr() + i * n);
  }
  const NodeId ti = table.id;
  return t.push(OpKind::GatherRows, {ti}, std::move(y),
                [ti, n, idv = std::vector<int>(ids.begin(), ids.end())](Tape& tp, const Tensor& g) {
                  Tensor& gt = tp.grad_buffer(ti);
                  for (std::size_t i = 0; i < idv.size(); ++i) {
                    double* dst = gt.mutable_ptr() + static_cast<std::size_t>(idv[i]) * n;
                    for (std::size_t j = 0; j < n; ++j) dst[j] += g[i * n + j];
                  }
                });
}

Var mean(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("mean needs at least one input");
  Tape& t = tape_of(parts[0]);
  Tensor y(parts[0].shape());
  std::vector<NodeId> ids;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    require_same_shape("mean", parts[0], p);
    axpy(y, p.value());
    ids.push_back(p.id);
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (auto& v : y.mutable_data()) v *= inv;
  std::vector<NodeId> inputs = ids;
  return t.push(OpKind::Mean, std::move(inputs), std::move(y), [ids = std::move(ids), inv](Tape& tp, const Tensor& g) {
    for (NodeId id : ids) {
      if (tp.requires_grad(id)) axpy(tp.grad_buffer(id), g, inv);
    }
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const NodeId ai = a.id;
  return t.push(OpKind::Sum, {ai}, Tensor::scalar(s), [ai](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ai);
    for (auto& v : ga.mutable_data()) v += g[0];
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, int ignore_id) {
  Tape& t = tape_of(logits);
  require_matrix("cross_entropy", logits);
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy has " + std::to_string(m) + " logit rows but " +
                         std::to_string(targets.size()) + " targets");
  }
  const Tensor& x = logits.value();
  Tensor probs({m, n});
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int tgt = targets[i];
    if (tgt == ignore_id) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= n) {
      throw ContractError("cross_entropy target " + std::to_string(tgt) + " outside vocabulary of " + std::to_string(n));
    }
    const double* xr = x.ptr() + i * n;
    double* pr = probs.mutable_ptr() + i * n;
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      pr[j] = std::exp(xr[j] - mx);
      s += pr[j];
    }
    for (std::size_t j = 0; j < n; ++j) pr[j] /= s;
    loss += -(xr[tgt] - mx - std::log(s));
  }
  const NodeId li = logits.id;
  return t.push(OpKind::CrossEntropy, {li}, Tensor::scalar(loss),
                [li, m, n, ignore_id, probs = std::move(probs),
                 tv = std::vector<int>(targets.begin(), targets.end())](Tape& tp, const Tensor& g) {
                  Tensor& gl = tp.grad_buffer(li);
                  for (std::size_t i = 0; i < m; ++i) {
                    if (tv[i] == ignore_id) continue;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double onehot = static_cast<int>(j) == tv[i] ? 1.0 : 0.0;
                      gl[i * n + j] += g[0] * (probs[i * n + j] - onehot);
                    }
                  }
                });
}

}  // namespace qadapt::ad
