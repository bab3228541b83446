// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "qadapt/adapters.hpp"
#include "qadapt/errors.hpp"
#include "qadapt/kernels.hpp"
#include "qadapt/pipeline.hpp"
#include "unit/support.hpp"

using namespace qadapt;
using qadapt::test::random_tensor;

namespace {

// Q-Adapter tensors with every entry random, Psi included.
ParamStore random_q_adapter(int d, int reduced, int queries, int tokens, std::uint64_t seed) {
  ParamStore s;
  Rng rng(seed);
  add_q_adapter(s, "qa", d, reduced, queries, tokens, rng);
  for (auto& p : s.params()) p.value = random_tensor(p.value.shape(), rng, 0.8);
  return s;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Gate(z) * FC(z) with explicit loops.
Tensor gated_oracle(const Tensor& z, const ParamStore& s) {
  const Tensor &w1 = s.value("qa.gate.w1"), &b1 = s.value("qa.gate.b1"), &w2 = s.value("qa.gate.w2"),
               &b2 = s.value("qa.gate.b2"), &fw = s.value("qa.fc.w"), &fb = s.value("qa.fc.b");
  const std::size_t n = z.rows(), d = z.cols(), r = fw.cols();
  Tensor out({n, r});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> h(r);
    for (std::size_t u = 0; u < r; ++u) {
      double s1 = b1[u];
      for (std::size_t c = 0; c < d; ++c) s1 += z.at(i, c) * w1.at(c, u);
      h[u] = gelu_ref(s1);
    }
    for (std::size_t u = 0; u < r; ++u) {
      double g = b2[u], f = fb[u];
      for (std::size_t k = 0; k < r; ++k) g += h[k] * w2.at(k, u);
      for (std::size_t c = 0; c < d; ++c) f += z.at(i, c) * fw.at(c, u);
      out.at(i, u) = sigmoid_ref(g) * f;
    }
  }
  return out;
}

// Psi * LN(softmax(q Wq (g Wk)^T / sqrt(d)) g Wv) + z, fully unrolled.
Tensor q_adapter_oracle(const Tensor& z, const ParamStore& s) {
  const Tensor g = gated_oracle(z, s);
  const Tensor &q = s.value("qa.q"), &wq = s.value("qa.wq"), &wk = s.value("qa.wk"), &wv = s.value("qa.wv"),
               &psi = s.value("qa.psi"), &lg = s.value("qa.ln.g"), &lb = s.value("qa.ln.b");
  const std::size_t n = z.rows(), d = z.cols(), m = q.rows(), r = g.cols();
  auto proj = [](const Tensor& a, const Tensor& w) {
    Tensor out({a.rows(), w.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < w.cols(); ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at(i, k) * w.at(k, j);
        out.at(i, j) = acc;
      }
    }
    return out;
  };
  const Tensor Q = proj(q, wq), K = proj(g, wk), V = proj(g, wv);
  (void)r;
  Tensor o({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> sc(n);
    double hi = -1e300, zsum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += Q.at(i, c) * K.at(j, c);
      sc[j] = dot / std::sqrt(static_cast<double>(d));
      hi = std::max(hi, sc[j]);
    }
    for (double& x : sc) zsum += (x = std::exp(x - hi));
    std::vector<double> row(d, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < d; ++c) row[c] += sc[j] / zsum * V.at(j, c);
    }
    double mu = 0.0, var = 0.0;
    for (double x : row) mu += x;
    mu /= static_cast<double>(d);
    for (double x : row) var += (x - mu) * (x - mu);
    var /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) o.at(i, c) = (row[c] - mu) / std::sqrt(var + kLayerNormEps) * lg[c] + lb[c];
  }
  Tensor out = z;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t j = 0; j < m; ++j) out.at(i, c) += psi.at(i, j) * o.at(j, c);
    }
  }
  return out;
}

ModelConfig small_model() {
  ModelConfig m;
  m.d = 8;
  m.heads = 2;
  m.depth = 4;
  m.decoder_depth = 1;
  m.height = 8;
  m.width = 8;
  m.frames = 2;
  m.vocab = 40;
  return m;
}

}  // namespace

TEST_CASE("gated features") {
  Rng rng(1);
  ParamStore s = random_q_adapter(4, 2, 2, 4, 2);
  const Tensor z = random_tensor({4, 4}, rng);
  ad::Tape tape;
  Binder bind(tape, s);
  SUBCASE("loop oracle") {
    CHECK(max_abs_diff(gated_features(tape.constant(z), bind_q_adapter(bind, "qa")).value(), gated_oracle(z, s)) <=
          1e-12);
  }
  SUBCASE("closed gate") {
    s.value("qa.gate.w2") = Tensor::zeros({2, 2});
    s.value("qa.gate.b2") = Tensor::filled({2}, -40.0);
    const Tensor out = gated_features(tape.constant(z), bind_q_adapter(bind, "qa")).value();
    for (double x : out.data()) CHECK(std::abs(x) <= 1e-15 * 10.0);
  }
  SUBCASE("open gate") {
    s.value("qa.gate.w2") = Tensor::zeros({2, 2});
    s.value("qa.gate.b2") = Tensor::filled({2}, 40.0);
    const auto p = bind_q_adapter(bind, "qa");
    const Tensor fc = ad::linear(tape.constant(z), p.fc_w, p.fc_b).value();
    CHECK(max_abs_diff(gated_features(tape.constant(z), p).value(), fc) <= 1e-15 * 10.0);
  }
  SUBCASE("gate lies strictly inside (0, 1)") {
    const auto p = bind_q_adapter(bind, "qa");
    for (int trial = 0; trial < 20; ++trial) {
      const ad::Var zz = tape.constant(random_tensor({4, 4}, rng, 3.0));
      const Tensor g = ad::sigmoid(ad::linear(ad::gelu(ad::linear(zz, p.gate_w1, p.gate_b1)), p.gate_w2, p.gate_b2))
                           .value();
      for (double x : g.data()) CHECK((x > 0.0 && x < 1.0));
    }
  }
}

TEST_CASE("Q-Adapter forward") {
  Rng rng(3);
  SUBCASE("loop oracle, M=2 N=4 d=4 d'=2") {
    const ParamStore s = random_q_adapter(4, 2, 2, 4, 4);
    const Tensor z = random_tensor({4, 4}, rng);
    ad::Tape tape;
    Binder bind(tape, s);
    CHECK(max_abs_diff(q_adapter_forward(tape.constant(z), bind_q_adapter(bind, "qa")).value(),
                       q_adapter_oracle(z, s)) <= 1e-12);
  }
  SUBCASE("zero Psi is the identity") {
    ParamStore s = random_q_adapter(4, 2, 3, 5, 5);
    s.value("qa.psi") = Tensor::zeros({5, 3});
    const Tensor z = random_tensor({5, 4}, rng);
    ad::Tape tape;
    Binder bind(tape, s);
    CHECK(q_adapter_forward(tape.constant(z), bind_q_adapter(bind, "qa")).value() == z);
  }
  SUBCASE("singleton query and token") {
    const ParamStore s = random_q_adapter(4, 2, 1, 1, 6);
    const Tensor z = random_tensor({1, 4}, rng);
    ad::Tape tape;
    Binder bind(tape, s);
    const auto p = bind_q_adapter(bind, "qa");
    const ad::Var zv = tape.constant(z);
    const Tensor v = ad::matmul(gated_features(zv, p), p.wv).value();
    const Tensor lv = layer_norm(v, s.value("qa.ln.g"), s.value("qa.ln.b"));
    const double psi = s.value("qa.psi")[0];
    const Tensor out = q_adapter_forward(zv, p).value();
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(out[c] - (psi * lv[c] + z[c])) <= 1e-12);
  }
  SUBCASE("output shape does not depend on M") {
    for (int m = 1; m <= 6; ++m) {
      const ParamStore s = random_q_adapter(4, 2, m, 6, 7 + static_cast<std::uint64_t>(m));
      ad::Tape tape;
      Binder bind(tape, s);
      CHECK(q_adapter_forward(tape.constant(random_tensor({6, 4}, rng)), bind_q_adapter(bind, "qa")).shape() ==
            Shape{6, 4});
    }
  }
  SUBCASE("token count mismatch") {
    const ParamStore s = random_q_adapter(4, 2, 2, 4, 8);
    ad::Tape tape;
    Binder bind(tape, s);
    CHECK_THROWS_AS(q_adapter_forward(tape.constant(random_tensor({5, 4}, rng)), bind_q_adapter(bind, "qa")),
                    DimensionError);
  }
}

TEST_CASE("bottleneck adapter") {
  Rng rng(9);
  ParamStore s;
  add_bottleneck(s, "b", 4, 2, rng);
  const Tensor z = random_tensor({3, 4}, rng);
  SUBCASE("zero up projection is the identity") {
    ad::Tape tape;
    Binder bind(tape, s);
    CHECK(bottleneck_forward(tape.constant(z), bind_bottleneck(bind, "b")).value() == z);
  }
  for (auto& p : s.params()) p.value = random_tensor(p.value.shape(), rng);
  SUBCASE("zero gate is the identity") {
    s.value("b.gate") = Tensor::scalar(0.0);
    ad::Tape tape;
    Binder bind(tape, s);
    CHECK(bottleneck_forward(tape.constant(z), bind_bottleneck(bind, "b")).value() == z);
  }
  SUBCASE("loop oracle") {
    ad::Tape tape;
    Binder bind(tape, s);
    const Tensor got = bottleneck_forward(tape.constant(z), bind_bottleneck(bind, "b")).value();
    const Tensor &dw = s.value("b.down.w"), &db = s.value("b.down.b"), &uw = s.value("b.up.w"),
                 &ub = s.value("b.up.b");
    const double g = s.value("b.gate")[0];
    for (std::size_t i = 0; i < 3; ++i) {
      double h[2];
      for (std::size_t u = 0; u < 2; ++u) {
        double acc = db[u];
        for (std::size_t c = 0; c < 4; ++c) acc += z.at(i, c) * dw.at(c, u);
        h[u] = gelu_ref(acc);
      }
      for (std::size_t c = 0; c < 4; ++c) {
        const double up = ub[c] + h[0] * uw.at(0, c) + h[1] * uw.at(1, c);
        CHECK(std::abs(got.at(i, c) - (z.at(i, c) + g * up)) <= 1e-12);
      }
    }
  }
}

TEST_CASE("LoRA") {
  Rng rng(10);
  const Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 5}, rng);
  SUBCASE("zero B leaves x W") {
    ParamStore s;
    add_lora(s, "l", 4, 5, 2, rng);
    ad::Tape tape;
    Binder bind(tape, s);
    CHECK(lora_matmul(tape.constant(x), tape.constant(w), bind_lora(bind, "l", 4.0)).value() == matmul(x, w));
  }
  SUBCASE("full-rank reduction") {
    ParamStore s;
    const Tensor w2 = random_tensor({4, 5}, rng);
    s.add("l.a", Tensor::identity(4), ParamTag::Adapter);
    s.add("l.b", w2, ParamTag::Adapter);
    ad::Tape tape;
    Binder bind(tape, s);
    const Tensor got = lora_matmul(tape.constant(x), tape.constant(w), bind_lora(bind, "l", 0.5)).value();
    const Tensor xw = matmul(x, w), xw2 = matmul(x, w2);
    for (std::size_t i = 0; i < got.numel(); ++i) CHECK(std::abs(got[i] - (xw[i] + 0.5 * xw2[i])) <= 1e-12);
  }
  SUBCASE("rank one matches the dense delta") {
    ParamStore s;
    s.add("l.a", random_tensor({4, 1}, rng), ParamTag::Adapter);
    s.add("l.b", random_tensor({1, 5}, rng), ParamTag::Adapter);
    ad::Tape tape;
    Binder bind(tape, s);
    const Tensor got = lora_matmul(tape.constant(x), tape.constant(w), bind_lora(bind, "l", 2.0)).value();
    Tensor dense = w;
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 5; ++j) dense.at(i, j) += 2.0 * s.value("l.a")[i] * s.value("l.b")[j];
    }
    CHECK(max_abs_diff(got, matmul(x, dense)) <= 1e-12);
  }
  SUBCASE("shape mismatch") {
    ParamStore s;
    add_lora(s, "l", 5, 5, 2, rng);
    ad::Tape tape;
    Binder bind(tape, s);
    CHECK_THROWS_AS(lora_matmul(tape.constant(x), tape.constant(w), bind_lora(bind, "l", 1.0)), DimensionError);
  }
}

TEST_CASE("adapted block placements") {
  const ModelConfig m = small_model();
  ParamStore store;
  init_backbone(store, m, 11);
  Rng rng(12);
  const std::size_t n = static_cast<std::size_t>(m.tokens_per_frame()), d = static_cast<std::size_t>(m.d);
  Rng arng(13);
  add_q_adapter(store, "msa", m.d, 4, 3, m.tokens_per_frame(), arng);
  add_q_adapter(store, "mlp", m.d, 4, 3, m.tokens_per_frame(), arng);
  const Tensor z = random_tensor({n, d}, rng);

  auto run = [&](const ParamStore& s, Placement p) {
    ad::Tape tape;
    Binder bind(tape, s);
    return adapted_block(tape.constant(z), bind_vit_block(bind, 0), bind_q_adapter(bind, "msa"),
                         bind_q_adapter(bind, "mlp"), p, m)
        .value();
  };
  ad::Tape tape;
  Binder bind(tape, store);
  const Tensor base = vit_block(tape.constant(z), bind_vit_block(bind, 0), m).value();

  SUBCASE("zero Psi reproduces the plain block") {
    for (Placement p : {Placement::Sequential, Placement::ParallelMLP, Placement::Proposed}) {
      CHECK(max_abs_diff(run(store, p), base) <= 1e-12);
    }
  }
  for (auto& p : store.params()) {
    if (p.tag == ParamTag::Adapter) p.value = random_tensor(p.value.shape(), rng, 0.5);
  }
  SUBCASE("parallel placement ignores the MSA adapter") {
    const Tensor before = run(store, Placement::ParallelMLP);
    ParamStore perturbed = store;
    for (auto& p : perturbed.params()) {
      if (p.name.rfind("msa.", 0) == 0) p.value = random_tensor(p.value.shape(), rng);
    }
    CHECK(bitwise_equal(run(perturbed, Placement::ParallelMLP), before));
    CHECK(!bitwise_equal(run(perturbed, Placement::Proposed), run(store, Placement::Proposed)));
  }
  SUBCASE("placements match hand compositions") {
    ad::Tape t;
    Binder b(t, store);
    const auto vit = bind_vit_block(b, 0);
    const auto qa1 = bind_q_adapter(b, "msa"), qa2 = bind_q_adapter(b, "mlp");
    const ad::Var zv = t.constant(z);
    const ad::Var msa = self_attention(ad::layer_norm(zv, vit.ln1_g, vit.ln1_b), vit, m.heads);
    const ad::Var z_adapted = ad::add(zv, q_adapter_forward(msa, qa1));
    const ad::Var z_plain = ad::add(zv, msa);
    auto branch = [&](ad::Var z1) {
      const ad::Var u = ad::layer_norm(z1, vit.ln2_g, vit.ln2_b);
      return std::pair{u, mlp(u, vit)};
    };
    {
      const auto [u, f] = branch(z_adapted);
      const Tensor expect = ad::add(ad::add(z_adapted, f), ad::sub(q_adapter_forward(u, qa2), u)).value();
      CHECK(max_abs_diff(run(store, Placement::Proposed), expect) <= 1e-12);
    }
    {
      const auto [u, f] = branch(z_adapted);
      (void)u;
      const Tensor expect = ad::add(z_adapted, q_adapter_forward(f, qa2)).value();
      CHECK(max_abs_diff(run(store, Placement::Sequential), expect) <= 1e-12);
    }
    {
      const auto [u, f] = branch(z_plain);
      const Tensor expect = ad::add(ad::add(z_plain, f), ad::sub(q_adapter_forward(u, qa2), u)).value();
      CHECK(max_abs_diff(run(store, Placement::ParallelMLP), expect) <= 1e-12);
    }
  }
}

TEST_CASE("identity at initialization for the full model") {
  const ModelConfig m = small_model();
  const Vocabulary vocab = caption_vocabulary(static_cast<std::size_t>(m.vocab));
  const CaptionModel base = make_caption_model(m, FusionMode::Concat, {kBosId}, 20);
  SceneProgram prog = program_at(7);
  prog.informative = {true, false};
  const VideoClip clip = render_clip(prog, RenderConfig{m.height, m.width, m.channels, m.frames}, 21, "c");
  const Tensor ref = encode_context(base, clip);
  for (AdapterType type : {AdapterType::QAdapter, AdapterType::Bottleneck, AdapterType::LoRA}) {
    for (Placement p : {Placement::Sequential, Placement::ParallelMLP, Placement::Proposed}) {
      for (InsertionRange r : {InsertionRange{1, 4}, InsertionRange{3, 4}, InsertionRange{2, 2}}) {
        CaptionModel adapted = base;
        adapted.adapter = AdapterConfig{.type = type, .reduced = 4, .placement = p, .range = r};
        insert_adapters(adapted.params, m, adapted.adapter, 22);
        CHECK(max_abs_diff(encode_context(adapted, clip), ref) <= 1e-12);
      }
    }
  }
}

TEST_CASE("gradients reach adapters and never the frozen backbone") {
  const ModelConfig m = small_model();
  const Vocabulary vocab = caption_vocabulary(static_cast<std::size_t>(m.vocab));
  for (Placement p : {Placement::Sequential, Placement::ParallelMLP, Placement::Proposed}) {
    CaptionModel cm = make_caption_model(m, FusionMode::Concat, {kBosId}, 23);
    cm.adapter = AdapterConfig{.type = AdapterType::QAdapter, .placement = p, .range = {3, 4}};
    insert_adapters(cm.params, m, cm.adapter, 24);
    // Nonzero Psi so gradients reach the tensors upstream of it.
    for (auto& param : cm.params.params()) {
      if (param.name.ends_with(".psi")) param.value = Tensor::filled(param.value.shape(), 0.1);
    }
    cm.params.freeze_backbone();
    SceneProgram prog = program_at(3);
    prog.informative = {true, true};
    CaptionSample s{render_clip(prog, RenderConfig{m.height, m.width, m.channels, m.frames}, 25, "c"), {kBosId},
                    {kBosId, 3, 4, kEosId}, prog};
    ad::Tape tape;
    Binder bind(tape, cm.params);
    const std::vector<int> frames{0, 1};
    tape.backward(sample_loss(bind, cm, s, frames).loss);
    const auto grads = bind.gradients();
    std::size_t adapter_tensors = 0;
    for (const auto& param : cm.params.params()) adapter_tensors += param.tag == ParamTag::Adapter ? 1 : 0;
    CHECK(grads.size() == adapter_tensors);
    for (const auto& g : grads) {
      CHECK(cm.params.get(g.name).tag == ParamTag::Adapter);
      double norm = 0.0;
      for (double x : g.grad.data()) norm += x * x;
      CHECK_MESSAGE(norm > 0.0, g.name);
    }
  }
}

TEST_CASE("adapter parameter counts") {
  const ModelConfig m;
  AdapterConfig proposed{.type = AdapterType::QAdapter, .placement = Placement::Proposed};
  AdapterConfig sequential = proposed, parallel = proposed;
  sequential.placement = Placement::Sequential;
  parallel.placement = Placement::ParallelMLP;
  CHECK(2 * adapter_params_per_block(m, parallel) == adapter_params_per_block(m, proposed));
  CHECK(adapter_params_per_block(m, sequential) == adapter_params_per_block(m, proposed));

  SUBCASE("analytic count matches inserted tensors for every range") {
    for (AdapterType t : {AdapterType::QAdapter, AdapterType::Bottleneck, AdapterType::LoRA}) {
      for (Placement p : {Placement::Sequential, Placement::ParallelMLP, Placement::Proposed}) {
        for (int first = 1; first <= 4; ++first) {
          for (int last = first; last <= 4; ++last) {
            AdapterConfig a{.type = t, .placement = p, .range = {first, last}};
            ParamStore s;
            insert_adapters(s, m, a, 1);
            CHECK(count_tagged(s, ParamTag::Adapter) ==
                  static_cast<std::size_t>(last - first + 1) * adapter_params_per_block(m, a));
          }
        }
      }
    }
  }
  SUBCASE("ratio arithmetic") {
    ParamStore s;
    s.add("w", Tensor::zeros({986}), ParamTag::Backbone);
    s.add("a", Tensor::zeros({14}), ParamTag::Adapter);
    s.freeze_backbone();
    CHECK(count_params(s).ratio() == doctest::Approx(0.014).epsilon(1e-15));
    s.set_trainable("a", false);
    CHECK(count_params(s).ratio() == 0.0);
    CHECK(count_params(s).total == 1000);
  }
  SUBCASE("invalid ranges") {
    CHECK_THROWS_AS((InsertionRange{0, 2}.validate(4)), ConfigError);
    CHECK_THROWS_AS((InsertionRange{3, 2}.validate(4)), ConfigError);
    CHECK_THROWS_AS((InsertionRange{2, 5}.validate(4)), ConfigError);
  }
}
