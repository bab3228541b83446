// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qadapt/backbone.hpp"
#include "qadapt/ops.hpp"
#include "qadapt/param_store.hpp"

namespace qadapt {

enum class AdapterType { None, QAdapter, Bottleneck, LoRA };
enum class Placement { Sequential, ParallelMLP, Proposed };
enum class LoraTargets { Attn, Mlp, AttnMlp };

std::string_view adapter_type_name(AdapterType t);
AdapterType adapter_type_from_name(std::string_view name);
std::string_view placement_name(Placement p);
Placement placement_from_name(std::string_view name);
std::string_view lora_targets_name(LoraTargets t);
LoraTargets lora_targets_from_name(std::string_view name);

/// 1-based inclusive block span.
struct InsertionRange {
  int first = 3;
  int last = 4;

  bool contains(int block) const { return block >= first && block <= last; }
  int length() const { return last - first + 1; }
  /// Throws ConfigError unless 1 <= first <= last <= depth.
  void validate(int depth) const;
};

struct AdapterConfig {
  AdapterType type = AdapterType::QAdapter;
  /// Query tokens M.
  int queries = 4;
  /// Reduced width d' of the gated features; also the bottleneck width r.
  int reduced = 8;
  int rank = 4;
  double alpha = 8.0;
  Placement placement = Placement::Proposed;
  InsertionRange range{};
  LoraTargets lora_targets = LoraTargets::AttnMlp;

  void validate(const ModelConfig& model) const;
};

/// Adapter tensors (tag adapter) for every site in the configured range.
/// Initialization makes each adapter an identity.
void insert_adapters(ParamStore& store, const ModelConfig& model, const AdapterConfig& cfg, std::uint64_t seed);

/// Parameter-name prefix of the adapter at `site` ("msa" or "mlp") of a
/// 0-based encoder block.
std::string adapter_prefix(int block, std::string_view site);

// Q-Adapter ------------------------------------------------------------------

void add_q_adapter(ParamStore& store, const std::string& prefix, int d, int reduced, int queries, int tokens,
                   Rng& rng);

struct QAdapterVars {
  ad::Var q;                           // M x d
  ad::Var wq;                          // d x d
  ad::Var fc_w, fc_b;                  // d x d', d'
  ad::Var gate_w1, gate_b1;            // d x d', d'
  ad::Var gate_w2, gate_b2;            // d' x d', d'
  ad::Var wk, wv;                      // d' x d
  ad::Var psi;                         // N x M
  ad::Var ln_g, ln_b;                  // d
};
QAdapterVars bind_q_adapter(Binder& bind, const std::string& prefix);

/// sigmoid(Gate(z)) * FC(z), N x d'.
ad::Var gated_features(ad::Var z, const QAdapterVars& p);
/// Psi * LN(softmax(Q K^T / sqrt(d)) V), N x d.
ad::Var q_adapter_delta(ad::Var z, const QAdapterVars& p);
/// q_adapter_delta(z) + z.
ad::Var q_adapter_forward(ad::Var z, const QAdapterVars& p);

// Bottleneck adapter ---------------------------------------------------------

void add_bottleneck(ParamStore& store, const std::string& prefix, int d, int width, Rng& rng);

struct BottleneckVars {
  ad::Var down_w, down_b;  // d x r, r
  ad::Var up_w, up_b;      // r x d, d
  ad::Var gate;            // scalar
};
BottleneckVars bind_bottleneck(Binder& bind, const std::string& prefix);

/// z + g * up(GELU(down(z))).
ad::Var bottleneck_forward(ad::Var z, const BottleneckVars& p);

// LoRA -----------------------------------------------------------------------

void add_lora(ParamStore& store, const std::string& prefix, int d_in, int d_out, int rank, Rng& rng);

struct LoraVars {
  ad::Var a;  // d_in x r
  ad::Var b;  // r x d_out
  double scale = 1.0;  // alpha / r
};
LoraVars bind_lora(Binder& bind, const std::string& prefix, double scale);

/// x W + scale * x A B.
ad::Var lora_matmul(ad::Var x, ad::Var w, const LoraVars& p);

// Blocks ---------------------------------------------------------------------

/// A ViT block with the configured adapter wired in at 0-based `block`.
ad::Var adapted_block(Binder& bind, ad::Var z, int block, const ViTBlockVars& vit, const ModelConfig& model,
                      const AdapterConfig& cfg);

/// Q-Adapter placement on explicit adapter variables. ParallelMLP ignores `qa_msa`.
ad::Var adapted_block(ad::Var z, const ViTBlockVars& vit, const QAdapterVars& qa_msa, const QAdapterVars& qa_mlp,
                      Placement placement, const ModelConfig& model);

/// Analytic adapter element count per encoder block.
std::size_t adapter_params_per_block(const ModelConfig& model, const AdapterConfig& cfg);

}  // namespace qadapt
