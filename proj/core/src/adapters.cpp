// SPDX-License-Identifier: Apache-2.0
#include "qadapt/adapters.hpp"

#include <cmath>
#include <optional>

#include "qadapt/errors.hpp"

namespace qadapt {

namespace {

using ad::Var;

constexpr double kAdapterInitStd = 0.02;

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.mutable_data()) x = rng.normal(0.0, stddev);
  return t;
}

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

template <typename E, std::size_t K>
E enum_from(std::string_view name, const std::pair<E, std::string_view> (&table)[K], const char* what) {
  for (const auto& [e, n] : table) {
    if (n == name) return e;
  }
  std::string options;
  for (const auto& [e, n] : table) options += (options.empty() ? "" : ", ") + std::string(n);
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(name) + "' (expected one of " + options + ")");
}

template <typename E, std::size_t K>
std::string_view enum_name(E value, const std::pair<E, std::string_view> (&table)[K]) {
  for (const auto& [e, n] : table) {
    if (e == value) return n;
  }
  return "?";
}

constexpr std::pair<AdapterType, std::string_view> kTypes[] = {{AdapterType::None, "none"},
                                                               {AdapterType::QAdapter, "qadapter"},
                                                               {AdapterType::Bottleneck, "bottleneck"},
                                                               {AdapterType::LoRA, "lora"}};
constexpr std::pair<Placement, std::string_view> kPlacements[] = {{Placement::Sequential, "sequential"},
                                                                  {Placement::ParallelMLP, "parallel_mlp"},
                                                                  {Placement::Proposed, "proposed"}};
constexpr std::pair<LoraTargets, std::string_view> kTargets[] = {
    {LoraTargets::Attn, "attn"}, {LoraTargets::Mlp, "mlp"}, {LoraTargets::AttnMlp, "attn_mlp"}};

bool lora_attn(LoraTargets t) { return t != LoraTargets::Mlp; }
bool lora_mlp(LoraTargets t) { return t != LoraTargets::Attn; }

}  // namespace

std::string_view adapter_type_name(AdapterType t) { return enum_name(t, kTypes); }
AdapterType adapter_type_from_name(std::string_view name) { return enum_from(name, kTypes, "adapter type"); }
std::string_view placement_name(Placement p) { return enum_name(p, kPlacements); }
Placement placement_from_name(std::string_view name) { return enum_from(name, kPlacements, "placement"); }
std::string_view lora_targets_name(LoraTargets t) { return enum_name(t, kTargets); }
LoraTargets lora_targets_from_name(std::string_view name) { return enum_from(name, kTargets, "LoRA target set"); }

void InsertionRange::validate(int depth) const {
  if (first < 1 || first > last || last > depth) {
    throw ConfigError("insertion range [" + std::to_string(first) + ", " + std::to_string(last) +
                      "] must satisfy 1 <= first <= last <= " + std::to_string(depth));
  }
}

void AdapterConfig::validate(const ModelConfig& model) const {
  if (type == AdapterType::None) return;
  range.validate(model.depth);
  if (queries < 1) throw ConfigError("adapter.M must be >= 1, got " + std::to_string(queries));
  if (reduced < 1 || reduced > model.d) {
    throw ConfigError("adapter.d_prime must lie in [1, " + std::to_string(model.d) + "], got " + std::to_string(reduced));
  }
  if (type == AdapterType::Bottleneck && reduced >= model.d) {
    throw ConfigError("bottleneck width must be < d");
  }
  if (rank < 1) throw ConfigError("adapter.rank must be >= 1, got " + std::to_string(rank));
  if (!(alpha > 0.0)) throw ConfigError("adapter.alpha must be > 0");
}

std::string adapter_prefix(int block, std::string_view site) {
  return "adapter.blocks." + std::to_string(block) + "." + std::string(site);
}

// Q-Adapter ------------------------------------------------------------------

void add_q_adapter(ParamStore& s, const std::string& p, int d, int reduced, int queries, int tokens, Rng& rng) {
  const auto tag = ParamTag::Adapter;
  s.add(p + ".q", normal_tensor({sz(queries), sz(d)}, kAdapterInitStd, rng), tag);
  s.add(p + ".wq", normal_tensor({sz(d), sz(d)}, kAdapterInitStd, rng), tag);
  s.add(p + ".fc.w", normal_tensor({sz(d), sz(reduced)}, kAdapterInitStd, rng), tag);
  s.add(p + ".fc.b", Tensor::zeros({sz(reduced)}), tag);
  s.add(p + ".gate.w1", normal_tensor({sz(d), sz(reduced)}, kAdapterInitStd, rng), tag);
  s.add(p + ".gate.b1", Tensor::zeros({sz(reduced)}), tag);
  s.add(p + ".gate.w2", normal_tensor({sz(reduced), sz(reduced)}, kAdapterInitStd, rng), tag);
  s.add(p + ".gate.b2", Tensor::zeros({sz(reduced)}), tag);
  s.add(p + ".wk", normal_tensor({sz(reduced), sz(d)}, kAdapterInitStd, rng), tag);
  s.add(p + ".wv", normal_tensor({sz(reduced), sz(d)}, kAdapterInitStd, rng), tag);
  s.add(p + ".psi", Tensor::zeros({sz(tokens), sz(queries)}), tag);
  s.add(p + ".ln.g", Tensor::filled({sz(d)}, 1.0), tag);
  s.add(p + ".ln.b", Tensor::zeros({sz(d)}), tag);
}

QAdapterVars bind_q_adapter(Binder& b, const std::string& p) {
  return QAdapterVars{b(p + ".q"),       b(p + ".wq"),      b(p + ".fc.w"),    b(p + ".fc.b"), b(p + ".gate.w1"),
                      b(p + ".gate.b1"), b(p + ".gate.w2"), b(p + ".gate.b2"), b(p + ".wk"),   b(p + ".wv"),
                      b(p + ".psi"),     b(p + ".ln.g"),    b(p + ".ln.b")};
}

Var gated_features(Var z, const QAdapterVars& p) {
  Var gate = ad::sigmoid(ad::linear(ad::gelu(ad::linear(z, p.gate_w1, p.gate_b1)), p.gate_w2, p.gate_b2));
  return ad::mul(gate, ad::linear(z, p.fc_w, p.fc_b));
}

Var q_adapter_delta(Var z, const QAdapterVars& p) {
  if (z.cols() != p.wq.rows()) {
    throw DimensionError("Q-Adapter expects width " + std::to_string(p.wq.rows()) + ", got " +
                         shape_to_string(z.shape()));
  }
  if (z.rows() != p.psi.rows()) {
    throw DimensionError("Q-Adapter expects " + std::to_string(p.psi.rows()) + " tokens, got " +
                         shape_to_string(z.shape()));
  }
  Var g = gated_features(z, p);
  Var q = ad::matmul(p.q, p.wq);
  Var k = ad::matmul(g, p.wk);
  Var v = ad::matmul(g, p.wv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Var a = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv));
  Var o = ad::layer_norm(ad::matmul(a, v), p.ln_g, p.ln_b);
  return ad::matmul(p.psi, o);
}

Var q_adapter_forward(Var z, const QAdapterVars& p) { return ad::add(q_adapter_delta(z, p), z); }

// Bottleneck -----------------------------------------------------------------

void add_bottleneck(ParamStore& s, const std::string& p, int d, int width, Rng& rng) {
  const auto tag = ParamTag::Adapter;
  s.add(p + ".down.w", normal_tensor({sz(d), sz(width)}, 1.0 / std::sqrt(static_cast<double>(d)), rng), tag);
  s.add(p + ".down.b", Tensor::zeros({sz(width)}), tag);
  s.add(p + ".up.w", Tensor::zeros({sz(width), sz(d)}), tag);
  s.add(p + ".up.b", Tensor::zeros({sz(d)}), tag);
  s.add(p + ".gate", Tensor::scalar(1.0), tag);
}

BottleneckVars bind_bottleneck(Binder& b, const std::string& p) {
  return BottleneckVars{b(p + ".down.w"), b(p + ".down.b"), b(p + ".up.w"), b(p + ".up.b"), b(p + ".gate")};
}

Var bottleneck_forward(Var z, const BottleneckVars& p) {
  Var h = ad::linear(ad::gelu(ad::linear(z, p.down_w, p.down_b)), p.up_w, p.up_b);
  return ad::add(z, ad::scale_by(h, p.gate));
}

// LoRA -----------------------------------------------------------------------

void add_lora(ParamStore& s, const std::string& p, int d_in, int d_out, int rank, Rng& rng) {
  s.add(p + ".a", normal_tensor({sz(d_in), sz(rank)}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng),
        ParamTag::Adapter);
  s.add(p + ".b", Tensor::zeros({sz(rank), sz(d_out)}), ParamTag::Adapter);
}

LoraVars bind_lora(Binder& b, const std::string& p, double scale) { return LoraVars{b(p + ".a"), b(p + ".b"), scale}; }

Var lora_matmul(Var x, Var w, const LoraVars& p) {
  if (p.a.rows() != w.rows() || p.b.cols() != w.cols() || p.a.cols() != p.b.rows()) {
    throw DimensionError("LoRA factors " + shape_to_string(p.a.shape()) + " x " + shape_to_string(p.b.shape()) +
                         " do not wrap weight " + shape_to_string(w.shape()));
  }
  return ad::add(ad::matmul(x, w), ad::scale(ad::matmul(ad::matmul(x, p.a), p.b), p.scale));
}

// Insertion ------------------------------------------------------------------

void insert_adapters(ParamStore& store, const ModelConfig& model, const AdapterConfig& cfg, std::uint64_t seed) {
  if (cfg.type == AdapterType::None) return;
  cfg.validate(model);
  Rng rng(seed);
  const int d = model.d;
  for (int i = cfg.range.first - 1; i < cfg.range.last; ++i) {
    switch (cfg.type) {
      case AdapterType::QAdapter:
        if (cfg.placement != Placement::ParallelMLP) {
          add_q_adapter(store, adapter_prefix(i, "msa"), d, cfg.reduced, cfg.queries, model.tokens_per_frame(), rng);
        }
        add_q_adapter(store, adapter_prefix(i, "mlp"), d, cfg.reduced, cfg.queries, model.tokens_per_frame(), rng);
        break;
      case AdapterType::Bottleneck:
        add_bottleneck(store, adapter_prefix(i, "msa"), d, cfg.reduced, rng);
        add_bottleneck(store, adapter_prefix(i, "mlp"), d, cfg.reduced, rng);
        break;
      case AdapterType::LoRA: {
        const int hidden = model.mlp_ratio * d;
        if (lora_attn(cfg.lora_targets)) {
          add_lora(store, adapter_prefix(i, "lora.qkv"), d, 3 * d, cfg.rank, rng);
          add_lora(store, adapter_prefix(i, "lora.out"), d, d, cfg.rank, rng);
        }
        if (lora_mlp(cfg.lora_targets)) {
          add_lora(store, adapter_prefix(i, "lora.w1"), d, hidden, cfg.rank, rng);
          add_lora(store, adapter_prefix(i, "lora.w2"), hidden, d, cfg.rank, rng);
        }
        break;
      }
      case AdapterType::None:
        break;
    }
  }
}

std::size_t adapter_params_per_block(const ModelConfig& model, const AdapterConfig& cfg) {
  const std::size_t d = sz(model.d), r = sz(cfg.reduced), m = sz(cfg.queries), n = sz(model.tokens_per_frame());
  switch (cfg.type) {
    case AdapterType::QAdapter: {
      const std::size_t one = m * d + d * d + (d * r + r) + (d * r + r) + (r * r + r) + 2 * r * d + n * m + 2 * d;
      return cfg.placement == Placement::ParallelMLP ? one : 2 * one;
    }
    case AdapterType::Bottleneck:
      return 2 * (d * r + r + r * d + d + 1);
    case AdapterType::LoRA: {
      const std::size_t k = sz(cfg.rank), h = sz(model.mlp_ratio) * d;
      std::size_t total = 0;
      if (lora_attn(cfg.lora_targets)) total += (d * k + k * 3 * d) + (d * k + k * d);
      if (lora_mlp(cfg.lora_targets)) total += (d * k + k * h) + (h * k + k * d);
      return total;
    }
    case AdapterType::None:
      break;
  }
  return 0;
}

// Blocks ---------------------------------------------------------------------

Var adapted_block(Var z, const ViTBlockVars& vit, const QAdapterVars& qa_msa, const QAdapterVars& qa_mlp,
                  Placement placement, const ModelConfig& model) {
  switch (placement) {
    case Placement::Proposed: {
      Var z1 = ad::add(z, q_adapter_forward(self_attention(ad::layer_norm(z, vit.ln1_g, vit.ln1_b), vit, model.heads),
                                            qa_msa));
      Var u = ad::layer_norm(z1, vit.ln2_g, vit.ln2_b);
      return ad::add(ad::add(z1, mlp(u, vit)), q_adapter_delta(u, qa_mlp));
    }
    case Placement::Sequential: {
      Var z1 = ad::add(z, q_adapter_forward(self_attention(ad::layer_norm(z, vit.ln1_g, vit.ln1_b), vit, model.heads),
                                            qa_msa));
      return ad::add(z1, q_adapter_forward(mlp(ad::layer_norm(z1, vit.ln2_g, vit.ln2_b), vit), qa_mlp));
    }
    case Placement::ParallelMLP: {
      Var z1 = ad::add(z, self_attention(ad::layer_norm(z, vit.ln1_g, vit.ln1_b), vit, model.heads));
      Var u = ad::layer_norm(z1, vit.ln2_g, vit.ln2_b);
      return ad::add(ad::add(z1, mlp(u, vit)), q_adapter_delta(u, qa_mlp));
    }
  }
  throw ContractError("invalid placement");
}

Var adapted_block(Binder& bind, Var z, int block, const ViTBlockVars& vit, const ModelConfig& model,
                  const AdapterConfig& cfg) {
  switch (cfg.type) {
    case AdapterType::None:
      return vit_block(z, vit, model);
    case AdapterType::QAdapter: {
      QAdapterVars mlp_site = bind_q_adapter(bind, adapter_prefix(block, "mlp"));
      QAdapterVars msa_site =
          cfg.placement == Placement::ParallelMLP ? mlp_site : bind_q_adapter(bind, adapter_prefix(block, "msa"));
      return adapted_block(z, vit, msa_site, mlp_site, cfg.placement, model);
    }
    case AdapterType::Bottleneck: {
      BottleneckVars a = bind_bottleneck(bind, adapter_prefix(block, "msa"));
      BottleneckVars b = bind_bottleneck(bind, adapter_prefix(block, "mlp"));
      Var z1 = ad::add(z, bottleneck_forward(self_attention(ad::layer_norm(z, vit.ln1_g, vit.ln1_b), vit, model.heads), a));
      return ad::add(z1, bottleneck_forward(mlp(ad::layer_norm(z1, vit.ln2_g, vit.ln2_b), vit), b));
    }
    case AdapterType::LoRA: {
      const double scale = cfg.alpha / static_cast<double>(cfg.rank);
      std::optional<LoraVars> qkv, out, w1, w2;
      if (lora_attn(cfg.lora_targets)) {
        qkv = bind_lora(bind, adapter_prefix(block, "lora.qkv"), scale);
        out = bind_lora(bind, adapter_prefix(block, "lora.out"), scale);
      }
      if (lora_mlp(cfg.lora_targets)) {
        w1 = bind_lora(bind, adapter_prefix(block, "lora.w1"), scale);
        w2 = bind_lora(bind, adapter_prefix(block, "lora.w2"), scale);
      }
      auto ptr = [](const std::optional<LoraVars>& o) { return o ? &*o : nullptr; };
      Var z1 = ad::add(z, self_attention(ad::layer_norm(z, vit.ln1_g, vit.ln1_b), vit, model.heads, ptr(qkv), ptr(out)));
      return ad::add(z1, mlp(ad::layer_norm(z1, vit.ln2_g, vit.ln2_b), vit, ptr(w1), ptr(w2)));
    }
  }
  throw ContractError("invalid adapter type");
}

}  // namespace qadapt
