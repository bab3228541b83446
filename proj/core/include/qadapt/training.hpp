// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qadapt/pipeline.hpp"

namespace qadapt {

enum class TrainMode { Full, Adapter };

std::string_view train_mode_name(TrainMode m);
TrainMode train_mode_from_name(std::string_view name);

struct TrainConfig {
  double lr = 2e-4;
  double warmup_ratio = 0.1;
  int epochs = 10;
  int batch = 8;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm cap; 0 disables clipping.
  double clip_norm = 1.0;
  /// Stop after this many updates when positive; the schedule spans them.
  int max_steps = 0;
  /// Random frame subsets at train time; uniform otherwise.
  bool random_frames = true;
  /// Worker threads for per-sample gradients. Results do not depend on it.
  int threads = 1;

  void validate() const;
};

/// Linear warmup over the first ceil(warmup_ratio * total) steps, then linear
/// decay to zero at `total`.
double lr_at(long step, long total, const TrainConfig& cfg);

struct AdamMoments {
  Tensor m;
  Tensor v;
};

/// One decoupled-decay Adam update at 1-based `step`: p <- p - lr*wd*p, then
/// the bias-corrected Adam step.
void adam_step(Tensor& p, const Tensor& grad, AdamMoments& state, long step, double lr, const TrainConfig& cfg);

/// AdamW over the trainable tensors of a store. Moments exist only for
/// tensors that were trainable when first updated.
class AdamW {
 public:
  explicit AdamW(TrainConfig cfg) : cfg_(std::move(cfg)) {}

  /// `grads` maps parameter names to gradients; every trainable tensor must
  /// be present and frozen tensors must be absent.
  void step(ParamStore& store, const std::unordered_map<std::string, Tensor>& grads, double lr);

  long steps() const noexcept { return step_; }
  bool has_state(std::string_view name) const { return state_.contains(std::string(name)); }
  std::size_t state_count() const noexcept { return state_.size(); }

 private:
  TrainConfig cfg_;
  long step_ = 0;
  std::unordered_map<std::string, AdamMoments> state_;
};

/// Puts the store into the freeze state of `mode`.
void apply_freeze(ParamStore& store, TrainMode mode);

struct StepLog {
  long step = 0;  // 1-based
  int epoch = 0;  // 0-based
  double lr = 0.0;
  double loss = 0.0;  // per-token mean over the batch, before the update
};

struct TrainResult {
  std::vector<StepLog> curve;
  long steps = 0;
};

/// Called after every update.
using StepCallback = std::function<void(const StepLog&)>;

/// Minimizes per-token teacher-forced loss over `data`. Gradients reach only
/// tensors marked trainable in `m.params`.
TrainResult train(CaptionModel& m, std::span<const CaptionSample> data, const TrainConfig& cfg,
                  const StepCallback& on_step = {});

/// Fraction of samples whose greedy caption equals the reference words.
double exact_match(const CaptionModel& m, std::span<const CaptionSample> samples, int max_len);

struct ProtocolConfig {
  ModelConfig model;
  AdapterConfig adapter;
  FusionMode fusion = FusionMode::Concat;
  std::uint64_t model_seed = 0;
  DatasetSpec pretrain_data;
  DatasetSpec adapt_data;
  DatasetSpec eval_data;
  TrainConfig pretrain;
  TrainConfig adapt;
  TrainMode adapt_mode = TrainMode::Adapter;
  int max_len = 12;
};

struct ProtocolResult {
  CaptionModel model;
  /// Backbone after stage 1.
  ParamStore pretrained;
  TrainResult stage1;
  TrainResult stage2;
  double zero_shot_exact_match = 0.0;
  double adapted_exact_match = 0.0;
  /// Per-token teacher-forced loss on the stage-2 training set.
  double adapted_loss = 0.0;
  double zero_shot_loss = 0.0;
};

/// Stage 1 alone: a fresh model trained fully on `pretrain`.
CaptionModel pretrain_model(const ProtocolConfig& cfg, std::span<const CaptionSample> pretrain,
                            TrainResult* curve = nullptr, const StepCallback& on_step = {});

/// Stage 1 trains everything on the pretrain grammar (skipped when
/// `pretrained` is given); stage 2 inserts adapters into the frozen backbone
/// and trains on the adapt grammar. Datasets come from the config specs.
ProtocolResult adapt_protocol(const ProtocolConfig& cfg, const ParamStore* pretrained = nullptr,
                              const StepCallback& on_stage1_step = {}, const StepCallback& on_stage2_step = {});
/// As above with caller-supplied datasets; `pretrain` is unused when
/// `pretrained` is given.
ProtocolResult adapt_protocol(const ProtocolConfig& cfg, std::span<const CaptionSample> pretrain,
                              std::span<const CaptionSample> adapt, const ParamStore* pretrained = nullptr,
                              const StepCallback& on_stage1_step = {}, const StepCallback& on_stage2_step = {});

/// One stage from a fresh model on `data` in `cfg.adapt_mode`, with
/// `cfg.adapt` settings. Zero-shot fields describe the untrained model.
ProtocolResult single_stage(const ProtocolConfig& cfg, std::span<const CaptionSample> data,
                            const StepCallback& on_step = {});

/// Worker count from QADAPT_THREADS, at least 1; `fallback` when unset.
int threads_from_env(int fallback = 1);

}  // namespace qadapt
