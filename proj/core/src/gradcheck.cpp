// SPDX-License-Identifier: Apache-2.0
#include "qadapt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qadapt/errors.hpp"
#include "qadapt/ops.hpp"
#include "qadapt/pipeline.hpp"
#include "qadapt/rng.hpp"
#include "qadapt/synthetic.hpp"

namespace qadapt {

using ad::OpKind;
using ad::Var;

namespace {

double evaluate(const ScalarFn& f, const ParamStore& params) {
  ad::Tape tape;
  Binder bind(tape, params, GradMode::None);
  return f(bind).value().item();
}

Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.mutable_data()) x = rng.normal(0.0, stddev);
  return t;
}

struct OpCase {
  ParamStore params;
  ScalarFn f;
};

// sum(out * w) with a fixed random w, so every output element reaches the loss
// with a distinct weight.
ScalarFn weighted(std::function<Var(Binder&)> body, Shape out_shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(std::move(out_shape), rng);
  return [body = std::move(body), w = std::move(w)](Binder& b) {
    const Var out = body(b);
    return ad::sum(ad::mul(out, b.tape().constant(w)));
  };
}

OpCase op_case(OpKind kind, std::uint64_t seed) {
  Rng rng(seed);
  OpCase c;
  auto add = [&](const std::string& name, Shape shape) {
    c.params.add(name, random_tensor(std::move(shape), rng), ParamTag::Backbone);
  };
  const std::uint64_t wseed = mix_seed(seed, 1);
  switch (kind) {
    case OpKind::MatMul:
      add("a", {3, 4});
      add("b", {4, 2});
      c.f = weighted([](Binder& b) { return ad::matmul(b("a"), b("b")); }, {3, 2}, wseed);
      break;
    case OpKind::Transpose:
      add("a", {3, 4});
      c.f = weighted([](Binder& b) { return ad::transpose(b("a")); }, {4, 3}, wseed);
      break;
    case OpKind::Add:
      add("a", {3, 4});
      add("b", {3, 4});
      c.f = weighted([](Binder& b) { return ad::add(b("a"), b("b")); }, {3, 4}, wseed);
      break;
    case OpKind::Sub:
      add("a", {3, 4});
      add("b", {3, 4});
      c.f = weighted([](Binder& b) { return ad::sub(b("a"), b("b")); }, {3, 4}, wseed);
      break;
    case OpKind::Mul:
      add("a", {3, 4});
      add("b", {3, 4});
      c.f = weighted([](Binder& b) { return ad::mul(b("a"), b("b")); }, {3, 4}, wseed);
      break;
    case OpKind::Scale:
      add("a", {3, 4});
      c.f = weighted([](Binder& b) { return ad::scale(b("a"), 0.7); }, {3, 4}, wseed);
      break;
    case OpKind::ScaleBy:
      add("a", {3, 4});
      add("s", {1});
      c.f = weighted([](Binder& b) { return ad::scale_by(b("a"), b("s")); }, {3, 4}, wseed);
      break;
    case OpKind::AddRowVec:
      add("a", {3, 4});
      add("b", {4});
      c.f = weighted([](Binder& b) { return ad::add_rowvec(b("a"), b("b")); }, {3, 4}, wseed);
      break;
    case OpKind::Gelu:
      add("a", {3, 4});
      c.f = weighted([](Binder& b) { return ad::gelu(b("a")); }, {3, 4}, wseed);
      break;
    case OpKind::Sigmoid:
      add("a", {3, 4});
      c.f = weighted([](Binder& b) { return ad::sigmoid(b("a")); }, {3, 4}, wseed);
      break;
    case OpKind::Softmax:
      add("a", {3, 5});
      c.f = weighted([](Binder& b) { return ad::softmax_rows(b("a")); }, {3, 5}, wseed);
      break;
    case OpKind::CausalSoftmax:
      add("a", {3, 5});
      c.f = weighted([](Binder& b) { return ad::causal_softmax_rows(b("a")); }, {3, 5}, wseed);
      break;
    case OpKind::LayerNorm:
      add("x", {3, 4});
      add("g", {4});
      add("b", {4});
      c.f = weighted([](Binder& b) { return ad::layer_norm(b("x"), b("g"), b("b")); }, {3, 4}, wseed);
      break;
    case OpKind::SliceRows:
      add("a", {4, 3});
      c.f = weighted([](Binder& b) { return ad::slice_rows(b("a"), 1, 3); }, {2, 3}, wseed);
      break;
    case OpKind::SliceCols:
      add("a", {3, 4});
      c.f = weighted([](Binder& b) { return ad::slice_cols(b("a"), 1, 3); }, {3, 2}, wseed);
      break;
    case OpKind::ConcatRows:
      add("a", {2, 3});
      add("b", {3, 3});
      c.f = weighted(
          [](Binder& b) {
            const std::array<Var, 2> parts{b("a"), b("b")};
            return ad::concat_rows(parts);
          },
          {5, 3}, wseed);
      break;
    case OpKind::ConcatCols:
      add("a", {3, 2});
      add("b", {3, 3});
      c.f = weighted(
          [](Binder& b) {
            const std::array<Var, 2> parts{b("a"), b("b")};
            return ad::concat_cols(parts);
          },
          {3, 5}, wseed);
      break;
    case OpKind::GatherRows:
      add("t", {5, 3});
      c.f = weighted(
          [](Binder& b) {
            static constexpr std::array ids{4, 0, 4, 2};
            return ad::gather_rows(b("t"), ids);
          },
          {4, 3}, wseed);
      break;
    case OpKind::Mean:
      add("a", {3, 4});
      add("b", {3, 4});
      add("c", {3, 4});
      c.f = weighted(
          [](Binder& b) {
            const std::array<Var, 3> parts{b("a"), b("b"), b("c")};
            return ad::mean(parts);
          },
          {3, 4}, wseed);
      break;
    case OpKind::Sum:
      add("a", {3, 4});
      c.f = [](Binder& b) { return ad::sum(b("a")); };
      break;
    case OpKind::CrossEntropy:
      add("logits", {4, 5});
      c.f = [](Binder& b) {
        static constexpr std::array targets{1, 0, 3, 2};
        return ad::cross_entropy(b("logits"), targets, 2);
      };
      break;
    default:
      throw ContractError("no gradient check case for op " + std::string(ad::op_name(kind)));
  }
  return c;
}

struct ModelCase {
  std::string name;
  CaptionModel model;
  CaptionSample sample;
};

ModelCase model_case(std::string name, const ModelConfig& cfg, const AdapterConfig& adapter, std::uint64_t seed) {
  const Vocabulary vocab = caption_vocabulary(static_cast<std::size_t>(cfg.vocab));
  ModelCase c{std::move(name), make_caption_model(cfg, FusionMode::Concat, vocab.encode(kPromptText), seed), {}};
  c.model.adapter = adapter;
  insert_adapters(c.model.params, cfg, adapter, mix_seed(seed, 1));
  // Zero-initialized adapter outputs would hide every gradient upstream of
  // them, so adapter tensors get random values.
  Rng rng(mix_seed(seed, 2));
  for (auto& p : c.model.params.params()) {
    if (p.tag != ParamTag::Adapter) continue;
    for (double& x : p.value.mutable_data()) x += rng.normal(0.0, 0.1);
  }
  SceneProgram prog = program_at(static_cast<int>(seed % kProgramSpace));
  prog.informative.assign(static_cast<std::size_t>(cfg.frames), true);
  const RenderConfig render{cfg.height, cfg.width, cfg.channels, cfg.frames};
  c.sample.program = prog;
  c.sample.clip = render_clip(prog, render, mix_seed(seed, 3), "gradcheck");
  c.sample.prompt = c.model.prompt;
  c.sample.caption = caption_of(prog, Grammar::B, vocab);
  return c;
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

FdResult finite_diff_check(const ScalarFn& f, ParamStore& params, const FdOptions& opt) {
  if (!(opt.h > 0.0)) throw ContractError("finite difference step must be > 0");
  FdResult result;
  if (params.size() == 0) return result;

  ad::Tape tape;
  Binder bind(tape, params, GradMode::All);
  tape.backward(f(bind));
  std::vector<Binder::Gradient> grads = bind.gradients();

  Rng rng(opt.seed);
  for (auto& p : params.params()) {
    const Tensor* analytic = nullptr;
    for (const auto& g : grads) {
      if (g.name == p.name) analytic = &g.grad;
    }
    const Tensor zero(p.value.shape());
    if (analytic == nullptr) analytic = &zero;

    std::vector<std::size_t> coords(p.value.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (opt.coords_per_tensor > 0 && coords.size() > opt.coords_per_tensor) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(opt.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      double& x = p.value.mutable_data()[i];
      const double saved = x;
      x = saved + opt.h;
      const double up = evaluate(f, params);
      x = saved - opt.h;
      const double down = evaluate(f, params);
      x = saved;
      const double numeric = (up - down) / (2.0 * opt.h);
      const double err = relative_error((*analytic)[i], numeric, opt.floor);
      if (err > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = err;
        result.worst_param = p.name;
      }
      ++result.coords;
    }
  }
  return result;
}

GradCheckReport run_gradcheck(const GradCheckOptions& opt) {
  GradCheckReport report;
  auto record = [&](const std::string& name, double h, const FdResult& r) {
    GradCheckRow row{name, h, r.max_rel_error, r.coords, h == kGateStep, r.max_rel_error <= kGradTolerance};
    if (row.gated && !row.passed) report.failures.push_back(name);
    report.rows.push_back(std::move(row));
  };

  std::uint64_t k = 0;
  for (OpKind kind : ad::differentiable_ops()) {
    OpCase c = op_case(kind, mix_seed(opt.seed, 100 + k++));
    for (double h : kSweepSteps) {
      record(std::string(ad::op_name(kind)), h, finite_diff_check(c.f, c.params, FdOptions{h, 0, opt.seed, 1e-6}));
    }
  }

  std::vector<ModelCase> cases;
  AdapterConfig qa = opt.adapter;
  qa.type = AdapterType::QAdapter;
  cases.push_back(model_case("model.qadapter." + std::string(placement_name(qa.placement)), opt.model, qa, opt.seed));
  for (Placement p : {Placement::Sequential, Placement::ParallelMLP, Placement::Proposed}) {
    if (p == qa.placement) continue;
    AdapterConfig a = qa;
    a.placement = p;
    cases.push_back(model_case("model.qadapter." + std::string(placement_name(p)), opt.model, a, opt.seed));
  }
  AdapterConfig bottleneck = qa;
  bottleneck.type = AdapterType::Bottleneck;
  cases.push_back(model_case("model.bottleneck", opt.model, bottleneck, opt.seed));
  AdapterConfig lora = qa;
  lora.type = AdapterType::LoRA;
  lora.lora_targets = LoraTargets::AttnMlp;
  cases.push_back(model_case("model.lora", opt.model, lora, opt.seed));

  for (auto& c : cases) {
    const CaptionModel& m = c.model;
    const CaptionSample& s = c.sample;
    const auto frames = uniform_frames(static_cast<int>(s.clip.frames.size()), m.model.frames);
    const ScalarFn f = [&m, &s, frames](Binder& b) {
      const SampleLoss l = sample_loss(b, m, s, frames);
      return ad::scale(l.loss, 1.0 / static_cast<double>(l.tokens));
    };
    for (double h : kSweepSteps) {
      record(c.name, h, finite_diff_check(f, c.model.params, FdOptions{h, opt.model_coords, opt.seed, 1e-6}));
    }
  }
  return report;
}

}  // namespace qadapt
