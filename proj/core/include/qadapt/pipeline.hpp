// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "qadapt/adapters.hpp"
#include "qadapt/backbone.hpp"
#include "qadapt/synthetic.hpp"

namespace qadapt {

enum class FusionMode { Concat, Mean };

std::string_view fusion_name(FusionMode m);
FusionMode fusion_from_name(std::string_view name);

struct FusedVideo {
  /// (T N) x d for concat, N x d for mean.
  ad::Var z;
  FusionMode mode = FusionMode::Concat;
};

/// Concat stacks frames in order; mean averages them elementwise.
FusedVideo temporal_fuse(std::span<const TokenMap> frames, FusionMode mode);

/// [embedded prompt; video rows] plus the learned context position table.
ad::Var assemble_context(Binder& bind, std::span<const int> prompt, const FusedVideo& video, const ModelConfig& cfg);

/// Summed next-token NLL; `logits` row i predicts reference[i]. PAD targets
/// are skipped.
ad::Var caption_loss(ad::Var logits, std::span<const int> reference);

/// Backbone, optional adapters and the decoding setup.
struct CaptionModel {
  ModelConfig model;
  AdapterConfig adapter{.type = AdapterType::None};
  FusionMode fusion = FusionMode::Concat;
  std::vector<int> prompt;
  ParamStore params;

  const AdapterConfig* adapters() const { return adapter.type == AdapterType::None ? nullptr : &adapter; }
};

/// A fresh model with a seeded backbone and no adapters.
CaptionModel make_caption_model(const ModelConfig& model, FusionMode fusion, std::vector<int> prompt,
                                std::uint64_t seed);

/// `wanted` evenly spaced indices out of `available` frames.
std::vector<int> uniform_frames(int available, int wanted);
/// `wanted` distinct indices drawn at random, in ascending order.
std::vector<int> random_frames(int available, int wanted, Rng& rng);

struct SampleLoss {
  ad::Var loss;  // summed NLL
  std::size_t tokens = 0;
};

/// Teacher-forced loss of one sample over the given frames.
SampleLoss sample_loss(Binder& bind, const CaptionModel& m, const CaptionSample& sample,
                       std::span<const int> frame_indices);

/// Encoder output context for a clip (uniform frame sampling), no gradients.
Tensor encode_context(const CaptionModel& m, const VideoClip& clip);

/// Greedy decoding from BOS. Returns the tokens before EOS, at most `max_len`.
/// Ties go to the lowest token id.
std::vector<int> generate(const CaptionModel& m, const VideoClip& clip, int max_len);

/// Per-token teacher-forced loss over `samples`, uniform frame sampling.
double teacher_forced_loss(const CaptionModel& m, std::span<const CaptionSample> samples);

/// Caption tokens between BOS and EOS.
std::vector<int> caption_words(std::span<const int> caption);

}  // namespace qadapt
