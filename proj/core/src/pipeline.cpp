// SPDX-License-Identifier: Apache-2.0
#include "qadapt/pipeline.hpp"

#include <algorithm>
#include <array>
#include <numeric>

#include "qadapt/errors.hpp"

namespace qadapt {

using ad::Var;

std::string_view fusion_name(FusionMode m) { return m == FusionMode::Concat ? "concat" : "mean"; }

FusionMode fusion_from_name(std::string_view name) {
  if (name == "concat") return FusionMode::Concat;
  if (name == "mean") return FusionMode::Mean;
  throw ConfigError("unknown fusion mode '" + std::string(name) + "' (expected concat or mean)");
}

FusedVideo temporal_fuse(std::span<const TokenMap> frames, FusionMode mode) {
  if (frames.empty()) throw ContractError("temporal fusion needs at least one frame");
  std::vector<Var> rows;
  rows.reserve(frames.size());
  for (const auto& f : frames) {
    if (f.tokens.shape() != frames.front().tokens.shape()) {
      throw DimensionError("frame token maps disagree: " + shape_to_string(frames.front().tokens.shape()) + " vs " +
                           shape_to_string(f.tokens.shape()));
    }
    rows.push_back(f.tokens);
  }
  if (rows.size() == 1) return FusedVideo{rows.front(), mode};
  return FusedVideo{mode == FusionMode::Concat ? ad::concat_rows(rows) : ad::mean(rows), mode};
}

Var assemble_context(Binder& bind, std::span<const int> prompt, const FusedVideo& video, const ModelConfig& cfg) {
  if (prompt.empty()) throw ContractError("prompt is empty");
  if (prompt.size() > static_cast<std::size_t>(cfg.max_prompt)) {
    throw ContractError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_prompt " +
                        std::to_string(cfg.max_prompt));
  }
  for (int id : prompt) {
    if (id < 0 || id >= cfg.vocab) throw ContractError("unknown token id " + std::to_string(id));
  }
  if (video.z.tape == nullptr || video.z.rows() == 0) throw ContractError("video representation has no rows");
  const std::array<Var, 2> parts{ad::gather_rows(bind("dec.tok"), prompt), video.z};
  Var ctx = ad::concat_rows(parts);
  const Var pos = bind("dec.ctx_pos");
  if (ctx.rows() > pos.rows()) {
    throw DimensionError("context of " + std::to_string(ctx.rows()) + " rows exceeds position table of " +
                         std::to_string(pos.rows()));
  }
  return ad::add(ctx, ad::slice_rows(pos, 0, ctx.rows()));
}

Var caption_loss(Var logits, std::span<const int> reference) {
  if (logits.rows() != reference.size()) {
    throw DimensionError("caption loss: " + std::to_string(logits.rows()) + " logit rows for " +
                         std::to_string(reference.size()) + " reference tokens");
  }
  return ad::cross_entropy(logits, reference, kPadId);
}

CaptionModel make_caption_model(const ModelConfig& model, FusionMode fusion, std::vector<int> prompt,
                                std::uint64_t seed) {
  CaptionModel m;
  m.model = model;
  m.fusion = fusion;
  m.prompt = std::move(prompt);
  init_backbone(m.params, model, seed);
  return m;
}

std::vector<int> uniform_frames(int available, int wanted) {
  if (wanted < 1 || wanted > available) {
    throw ContractError("cannot sample " + std::to_string(wanted) + " of " + std::to_string(available) + " frames");
  }
  std::vector<int> out(static_cast<std::size_t>(wanted));
  for (int i = 0; i < wanted; ++i) out[static_cast<std::size_t>(i)] = (2 * i + 1) * available / (2 * wanted);
  return out;
}

std::vector<int> random_frames(int available, int wanted, Rng& rng) {
  if (wanted < 1 || wanted > available) {
    throw ContractError("cannot sample " + std::to_string(wanted) + " of " + std::to_string(available) + " frames");
  }
  if (wanted == available) return uniform_frames(available, wanted);
  std::vector<int> all(static_cast<std::size_t>(available));
  std::iota(all.begin(), all.end(), 0);
  for (int i = 0; i < wanted; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(available - i)));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(wanted));
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<int> caption_words(std::span<const int> caption) {
  std::vector<int> out;
  for (int id : caption) {
    if (id == kBosId || id == kPadId) continue;
    if (id == kEosId) break;
    out.push_back(id);
  }
  return out;
}

SampleLoss sample_loss(Binder& bind, const CaptionModel& m, const CaptionSample& sample,
                       std::span<const int> frame_indices) {
  if (sample.caption.size() < 2) throw ContractError("caption of clip '" + sample.clip.id + "' is too short");
  const auto frames = encode_clip(bind, sample.clip, frame_indices, m.model, m.adapters());
  const FusedVideo video = temporal_fuse(frames, m.fusion);
  const Var ctx = assemble_context(bind, m.prompt, video, m.model);
  const std::span<const int> cap(sample.caption);
  const auto input = cap.first(cap.size() - 1);
  const auto target = cap.subspan(1);
  const Var logits = decoder_forward(bind, input, ctx, m.model);
  const std::size_t tokens =
      static_cast<std::size_t>(std::count_if(target.begin(), target.end(), [](int id) { return id != kPadId; }));
  return SampleLoss{caption_loss(logits, target), tokens};
}

Tensor encode_context(const CaptionModel& m, const VideoClip& clip) {
  ad::Tape tape;
  Binder bind(tape, m.params, GradMode::None);
  const auto idx = uniform_frames(static_cast<int>(clip.frames.size()), m.model.frames);
  const auto frames = encode_clip(bind, clip, idx, m.model, m.adapters());
  return assemble_context(bind, m.prompt, temporal_fuse(frames, m.fusion), m.model).value();
}

std::vector<int> generate(const CaptionModel& m, const VideoClip& clip, int max_len) {
  if (max_len < 1) throw ContractError("max_len must be >= 1");
  const Tensor ctx = encode_context(m, clip);
  std::vector<int> prefix{kBosId};
  std::vector<int> out;
  // The decoder input (BOS + output) must fit the text position table.
  const int cap = std::min(max_len, m.model.max_text - 1);
  while (static_cast<int>(out.size()) < cap) {
    const Tensor logits = decoder_logits(m.params, prefix, ctx, m.model);
    int best = 0;
    for (std::size_t i = 1; i < logits.numel(); ++i) {
      if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    if (best == kEosId) break;
    out.push_back(best);
    prefix.push_back(best);
  }
  return out;
}

double teacher_forced_loss(const CaptionModel& m, std::span<const CaptionSample> samples) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : samples) {
    ad::Tape tape;
    Binder bind(tape, m.params, GradMode::None);
    const auto idx = uniform_frames(static_cast<int>(s.clip.frames.size()), m.model.frames);
    const SampleLoss l = sample_loss(bind, m, s, idx);
    total += l.loss.value().item();
    tokens += l.tokens;
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

}  // namespace qadapt
