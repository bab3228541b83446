// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qadapt/ops.hpp"
#include "qadapt/param_store.hpp"
#include "qadapt/rng.hpp"
#include "qadapt/tensor.hpp"

namespace qadapt {

struct ModelConfig {
  int d = 32;
  int heads = 4;
  int depth = 4;
  int decoder_depth = 2;
  int patch = 4;
  int height = 16;
  int width = 16;
  int channels = 3;
  /// Frames the encoder sees per clip.
  int frames = 4;
  int vocab = 64;
  /// Longest decoder input (BOS + caption tokens).
  int max_text = 16;
  /// Longest prompt; sizes the context position table.
  int max_prompt = 8;
  int mlp_ratio = 4;

  int tokens_per_frame() const { return (height / patch) * (width / patch); }
  int patch_dim() const { return patch * patch * channels; }
  int max_context() const { return max_prompt + frames * tokens_per_frame(); }
  /// Throws ConfigError on inconsistent extents.
  void validate() const;
};

struct VideoClip {
  std::string id;
  /// Each frame is H x W x C with values in [0, 1].
  std::vector<Tensor> frames;

  /// Throws ContractError unless frames are non-empty, same-shaped and in [0, 1].
  void validate() const;
};

struct TokenMap {
  ad::Var tokens;  // N x d
  int frame = 0;
};

/// Adds encoder and decoder tensors (tag backbone) with a seeded initialization.
void init_backbone(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed);

std::string encoder_block_prefix(int block);
std::string decoder_block_prefix(int block);

struct ViTBlockVars {
  ad::Var ln1_g, ln1_b, wqkv, bqkv, wo, bo;
  ad::Var ln2_g, ln2_b, w1, b1, w2, b2;
};
ViTBlockVars bind_vit_block(Binder& bind, int block);

struct LoraVars;

/// Multi-head self-attention with fused QKV projection. Optional low-rank
/// deltas wrap the QKV and output projections.
ad::Var self_attention(ad::Var x, const ViTBlockVars& p, int heads, const LoraVars* lora_qkv = nullptr,
                       const LoraVars* lora_out = nullptr);
/// Two affine maps with GELU between.
ad::Var mlp(ad::Var x, const ViTBlockVars& p, const LoraVars* lora_w1 = nullptr, const LoraVars* lora_w2 = nullptr);

/// Scaled dot-product attention split into `heads` column groups.
ad::Var multi_head_attention(ad::Var q, ad::Var k, ad::Var v, int heads, bool causal);

/// Flattens P x P x C patches in raster order (rows of patches, then columns),
/// one row per patch, channel fastest.
Tensor extract_patches(const Tensor& frame, int patch);

/// Patch embedding plus learned position embedding.
TokenMap patchify(Binder& bind, const Tensor& frame, const ModelConfig& cfg, int frame_index = 0);

/// z' = z + MSA(LN z); out = z' + MLP(LN z').
ad::Var vit_block(ad::Var z, const ViTBlockVars& p, const ModelConfig& cfg);

struct AdapterConfig;

/// Per-frame encoder outputs. Blocks inside the adapter range use
/// adapted_block, the rest vit_block.
std::vector<TokenMap> encode_clip(Binder& bind, const VideoClip& clip, std::span<const int> frame_indices,
                                  const ModelConfig& cfg, const AdapterConfig* adapters = nullptr);
/// All frames in order.
std::vector<TokenMap> encode_clip(Binder& bind, const VideoClip& clip, const ModelConfig& cfg,
                                  const AdapterConfig* adapters = nullptr);

/// Logits for every prefix position, |prefix| x |V|. Causal over the prefix,
/// full attention over `context`.
ad::Var decoder_forward(Binder& bind, std::span<const int> prefix, ad::Var context, const ModelConfig& cfg);

/// Next-token logits after `prefix`.
Tensor decoder_logits(const ParamStore& store, std::span<const int> prefix, const Tensor& context,
                      const ModelConfig& cfg);

}  // namespace qadapt
