// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <array>
#include <cmath>

#include "qadapt/errors.hpp"
#include "qadapt/gradcheck.hpp"
#include "qadapt/kernels.hpp"
#include "qadapt/ops.hpp"
#include "qadapt/param_store.hpp"
#include "unit/support.hpp"

using namespace qadapt;
using qadapt::test::random_tensor;

TEST_CASE("matmul examples") {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(Tensor::identity(2), m) == m);
  CHECK(matmul(Tensor::matrix({{1, 0}, {0, 0}}), Tensor::matrix({{5, 6}, {7, 8}})) ==
        Tensor::matrix({{5, 6}, {0, 0}}));
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul is associative on random 4x4 chains") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = random_tensor({4, 4}, rng), b = random_tensor({4, 4}, rng), c = random_tensor({4, 4}, rng);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-9);
  }
}

TEST_CASE("matmul matches a triple loop") {
  Rng rng(3);
  const Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) s += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-14));
    }
  }
}

TEST_CASE("softmax examples") {
  CHECK(max_abs_diff(softmax_rows(Tensor::matrix({{0, 0}})), Tensor::matrix({{0.5, 0.5}})) <= 1e-15);
  CHECK(max_abs_diff(softmax_rows(Tensor::matrix({{0, std::log(3.0)}})), Tensor::matrix({{0.25, 0.75}})) <= 1e-15);
  CHECK(max_abs_diff(softmax_rows(Tensor::matrix({{1000, 1000}})), Tensor::matrix({{0.5, 0.5}})) <= 1e-15);
}

TEST_CASE("softmax rows sum to one and ignore shifts") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(9);
    const Tensor x = random_tensor({m, n}, rng, 5.0);
    const Tensor p = softmax_rows(x);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(p.at(i, j) >= 0.0);
        s += p.at(i, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    Tensor shifted = x;
    const double c = rng.uniform(-50.0, 50.0);
    for (double& v : shifted.mutable_data()) v += c;
    CHECK(max_abs_diff(softmax_rows(shifted), p) <= 1e-12);
  }
}

TEST_CASE("layer norm examples") {
  const Tensor ones = Tensor::filled({4}, 1.0), zeros = Tensor::zeros({4});
  CHECK(layer_norm(Tensor::filled({2, 4}, 3.5), ones, zeros) == Tensor::zeros({2, 4}));
  const Tensor unit = layer_norm(Tensor::matrix({{1, -1}}), Tensor::filled({2}, 1.0), Tensor::zeros({2}));
  CHECK(max_abs_diff(unit, Tensor::matrix({{1, -1}})) <= 1e-4);
  Rng rng(5);
  const Tensor beta = Tensor::filled({4}, 5.0);
  const Tensor out = layer_norm(random_tensor({3, 4}, rng), Tensor::zeros({4}), beta);
  CHECK(out == Tensor::filled({3, 4}, 5.0));
}

TEST_CASE("layer norm rows have zero mean and near-unit variance") {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(8);
    const Tensor x = random_tensor({3, n}, rng, rng.uniform(0.5, 10.0));
    const Tensor y = layer_norm(x, Tensor::filled({n}, 1.0), Tensor::zeros({n}));
    for (std::size_t i = 0; i < 3; ++i) {
      double mean = 0.0, xmean = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mean += y.at(i, j);
        xmean += x.at(i, j);
      }
      mean /= static_cast<double>(n);
      xmean /= static_cast<double>(n);
      double var = 0.0, xvar = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
        xvar += (x.at(i, j) - xmean) * (x.at(i, j) - xmean);
      }
      var /= static_cast<double>(n);
      xvar /= static_cast<double>(n);
      CHECK(std::abs(mean) <= 1e-10);
      // Population variance is exactly xvar / (xvar + eps).
      CHECK(var <= 1.0 + 1e-12);
      CHECK(var >= 1.0 - kLayerNormEps / xvar - 1e-12);
    }
  }
}

namespace {

// softmax(q k^T / sqrt(d)) v, then layer norm, as plain loops.
Tensor attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t m = q.rows(), n = k.rows(), d = q.cols();
  Tensor out({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> s(n);
    double hi = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * k.at(j, c);
      s[j] = dot / std::sqrt(static_cast<double>(d));
      hi = std::max(hi, s[j]);
    }
    double z = 0.0;
    for (double& x : s) z += (x = std::exp(x - hi));
    std::vector<double> row(d, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < d; ++c) row[c] += s[j] / z * v.at(j, c);
    }
    double mean = 0.0;
    for (double x : row) mean += x;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double x : row) var += (x - mean) * (x - mean);
    var /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) out.at(i, c) = (row[c] - mean) / std::sqrt(var + kLayerNormEps);
  }
  return out;
}

}  // namespace

TEST_CASE("cross attention examples") {
  Rng rng(17);
  const std::size_t d = 6;
  const Tensor ones = Tensor::filled({d}, 1.0), zeros = Tensor::zeros({d});

  SUBCASE("single key") {
    const Tensor q = random_tensor({3, d}, rng), k = random_tensor({1, d}, rng), v = random_tensor({1, d}, rng);
    const Tensor out = cross_attention(q, k, v);
    const Tensor lv = layer_norm(v, ones, zeros);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t c = 0; c < d; ++c) CHECK(std::abs(out.at(i, c) - lv.at(0, c)) <= 1e-12);
    }
  }
  SUBCASE("identical keys average the values") {
    const Tensor q = random_tensor({2, d}, rng), v = random_tensor({4, d}, rng);
    Tensor k({4, d});
    const Tensor key = random_tensor({1, d}, rng);
    for (std::size_t j = 0; j < 4; ++j) {
      for (std::size_t c = 0; c < d; ++c) k.at(j, c) = key.at(0, c);
    }
    Tensor vbar({1, d});
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t j = 0; j < 4; ++j) vbar.at(0, c) += v.at(j, c) / 4.0;
    }
    const Tensor lv = layer_norm(vbar, ones, zeros);
    const Tensor out = cross_attention(q, k, v);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t c = 0; c < d; ++c) CHECK(std::abs(out.at(i, c) - lv.at(0, c)) <= 1e-12);
    }
  }
  SUBCASE("loop oracle") {
    const Tensor q = random_tensor({2, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
    CHECK(max_abs_diff(cross_attention(q, k, v), attention_oracle(q, k, v)) <= 1e-12);
  }
  CHECK_THROWS_AS(cross_attention(Tensor::zeros({2, 4}), Tensor::zeros({3, 5}), Tensor::zeros({3, 5})),
                  DimensionError);
}

TEST_CASE("backward of sum of squares is 2x") {
  Rng rng(19);
  const Tensor x0 = random_tensor({3, 4}, rng);
  ad::Tape tape;
  const ad::Var x = tape.leaf(x0, true);
  tape.backward(ad::sum(ad::mul(x, x)));
  const Tensor* g = tape.grad(x);
  REQUIRE(g != nullptr);
  for (std::size_t i = 0; i < x0.numel(); ++i) CHECK((*g)[i] == 2.0 * x0[i]);
}

TEST_CASE("backward of softmax cross entropy is p minus onehot") {
  Rng rng(23);
  const Tensor logits = random_tensor({3, 5}, rng);
  const std::array targets{4, 0, 2};
  ad::Tape tape;
  const ad::Var x = tape.leaf(logits, true);
  tape.backward(ad::cross_entropy(x, targets, -1));
  const Tensor p = softmax_rows(logits);
  const Tensor& g = *tape.grad(x);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      const double expect = p.at(i, j) - (static_cast<int>(j) == targets[i] ? 1.0 : 0.0);
      CHECK(std::abs(g.at(i, j) - expect) <= 1e-14);
    }
  }
}

TEST_CASE("backward contract") {
  ad::Tape tape;
  const ad::Var x = tape.leaf(Tensor::filled({2, 2}, 1.0), true);
  const ad::Var frozen = tape.leaf(Tensor::filled({2, 2}, 2.0), false);
  CHECK_THROWS_AS(tape.backward(ad::mul(x, x)), ContractError);
  tape.backward(ad::sum(ad::mul(x, frozen)));
  CHECK(tape.grad(frozen) == nullptr);
  CHECK(tape.grad(x) != nullptr);
}

TEST_CASE("non-finite values are rejected") {
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), NumericError);
  ad::Tape tape;
  const ad::Var x = tape.leaf(Tensor::filled({1, 1}, 1e300), true);
  CHECK_THROWS_AS(ad::mul(x, x), NumericError);
}

TEST_CASE("finite differences") {
  SUBCASE("quadratic is exact") {
    Rng rng(29);
    ParamStore store;
    store.add("x", random_tensor({2, 3}, rng), ParamTag::Backbone);
    const ScalarFn f = [](Binder& b) {
      const ad::Var x = b("x");
      return ad::sum(ad::mul(x, x));
    };
    for (double h : {1e-3, 1e-4}) {
      const FdResult r = finite_diff_check(f, store, FdOptions{.h = h});
      CHECK(r.max_rel_error <= 1e-8);
      CHECK(r.coords == 6);
    }
  }
  SUBCASE("no parameters gives zero") {
    ParamStore empty;
    const ScalarFn f = [](Binder& b) { return b.tape().constant(Tensor::scalar(3.0)); };
    CHECK(finite_diff_check(f, empty).max_rel_error == 0.0);
  }
  SUBCASE("constant function gives zero") {
    ParamStore store;
    store.add("x", Tensor::filled({3}, 1.0), ParamTag::Backbone);
    const ScalarFn f = [](Binder& b) { return b.tape().constant(Tensor::scalar(3.0)); };
    CHECK(finite_diff_check(f, store).max_rel_error == 0.0);
  }
  SUBCASE("bad step") {
    ParamStore store;
    CHECK_THROWS_AS(finite_diff_check([](Binder& b) { return b.tape().constant(Tensor::scalar(0.0)); }, store,
                                      FdOptions{.h = 0.0}),
                    ContractError);
  }
}

TEST_CASE("composed graph matches finite differences") {
  Rng rng(31);
  ParamStore store;
  store.add("x", random_tensor({3, 4}, rng), ParamTag::Backbone);
  store.add("w", random_tensor({4, 4}, rng), ParamTag::Backbone);
  store.add("g", random_tensor({4}, rng), ParamTag::Backbone);
  store.add("b", random_tensor({4}, rng), ParamTag::Backbone);
  const ScalarFn f = [](Binder& b) {
    const ad::Var h = ad::gelu(ad::layer_norm(ad::matmul(b("x"), b("w")), b("g"), b("b")));
    const std::array targets{1, 3, 0};
    return ad::cross_entropy(ad::softmax_rows(h), targets, -1);
  };
  CHECK(finite_diff_check(f, store).max_rel_error <= kGradTolerance);
}

TEST_CASE("a corrupted backward rule is detected") {
  Rng rng(37);
  ParamStore store;
  store.add("a", random_tensor({3, 4}, rng), ParamTag::Backbone);
  store.add("b", random_tensor({4, 2}, rng), ParamTag::Backbone);
  const ScalarFn f = [](Binder& b) { return ad::sum(ad::gelu(ad::matmul(b("a"), b("b")))); };
  CHECK(finite_diff_check(f, store).max_rel_error <= kGradTolerance);
  ad::set_backward_fault(ad::OpKind::MatMul);
  const double err = finite_diff_check(f, store).max_rel_error;
  ad::set_backward_fault(std::nullopt);
  CHECK(err > kGradTolerance);
}

TEST_CASE("identical seeds give bit-identical forward and backward") {
  auto run = [] {
    Rng rng(41);
    ad::Tape tape;
    const ad::Var a = tape.leaf(random_tensor({4, 6}, rng), true);
    const ad::Var w = tape.leaf(random_tensor({6, 6}, rng), true);
    const ad::Var out = ad::softmax_rows(ad::gelu(ad::matmul(a, w)));
    tape.backward(ad::sum(ad::mul(out, out)));
    return std::array<Tensor, 3>{out.value(), *tape.grad(a), *tape.grad(w)};
  };
  const auto first = run(), second = run();
  for (std::size_t i = 0; i < 3; ++i) CHECK(bitwise_equal(first[i], second[i]));
}

TEST_CASE("every differentiable op passes the gradient check table") {
  GradCheckOptions opt;
  opt.model.depth = 2;
  opt.model.decoder_depth = 1;
  opt.model.d = 16;
  opt.model.heads = 2;
  opt.model.frames = 2;
  opt.adapter.range = {1, 2};
  opt.model_coords = 2;
  const GradCheckReport report = run_gradcheck(opt);
  CHECK(report.passed());
  std::size_t gated = 0;
  for (const auto& row : report.rows) gated += row.gated ? 1 : 0;
  CHECK(gated == ad::differentiable_ops().size() + 5);
}
