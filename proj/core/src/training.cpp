// SPDX-License-Identifier: Apache-2.0
#include "qadapt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <thread>

#include "qadapt/errors.hpp"

namespace qadapt {

namespace {

using Grads = std::vector<Binder::Gradient>;

struct SampleResult {
  Grads grads;
  double loss = 0.0;
  std::size_t tokens = 0;
};

SampleResult run_sample(const CaptionModel& m, const CaptionSample& s, std::span<const int> frames) {
  ad::Tape tape;
  Binder bind(tape, m.params);
  const SampleLoss l = sample_loss(bind, m, s, frames);
  tape.backward(l.loss);
  return SampleResult{bind.gradients(), l.loss.value().item(), l.tokens};
}

}  // namespace

std::string_view train_mode_name(TrainMode m) { return m == TrainMode::Full ? "full" : "adapter"; }

TrainMode train_mode_from_name(std::string_view name) {
  if (name == "full") return TrainMode::Full;
  if (name == "adapter") return TrainMode::Adapter;
  throw ConfigError("unknown train mode '" + std::string(name) + "' (expected full or adapter)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("train.warmup_ratio must lie in [0, 1)");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (clip_norm < 0.0) throw ConfigError("train.clip_norm must be >= 0");
  if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
    throw ConfigError("Adam hyperparameters out of range");
  }
}

double lr_at(long step, long total, const TrainConfig& cfg) {
  if (total < 1 || step < 0 || step > total) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  const long warm = static_cast<long>(std::ceil(cfg.warmup_ratio * static_cast<double>(total)));
  if (step < warm) return cfg.lr * static_cast<double>(step) / static_cast<double>(warm);
  if (total == warm) return cfg.lr;
  return cfg.lr * static_cast<double>(total - step) / static_cast<double>(total - warm);
}

void adam_step(Tensor& p, const Tensor& grad, AdamMoments& st, long step, double lr, const TrainConfig& cfg) {
  if (p.shape() != grad.shape()) {
    throw DimensionError("adam_step: parameter " + shape_to_string(p.shape()) + " vs gradient " +
                         shape_to_string(grad.shape()));
  }
  if (step < 1) throw ContractError("adam_step: step counts from 1");
  if (lr < 0.0) throw ContractError("adam_step: negative learning rate");
  if (st.m.empty()) st = AdamMoments{Tensor(p.shape()), Tensor(p.shape())};
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  double* w = p.mutable_ptr();
  double* m = st.m.mutable_ptr();
  double* v = st.v.mutable_ptr();
  const double* g = grad.ptr();
  const double decay = lr * cfg.weight_decay;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    w[i] -= decay * w[i];
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void AdamW::step(ParamStore& store, const std::unordered_map<std::string, Tensor>& grads, double lr) {
  ++step_;
  for (auto& p : store.params()) {
    auto it = grads.find(p.name);
    if (!p.trainable) {
      if (it != grads.end()) throw ContractError("gradient supplied for frozen parameter '" + p.name + "'");
      continue;
    }
    if (it == grads.end()) throw ContractError("missing gradient for trainable parameter '" + p.name + "'");
    adam_step(p.value, it->second, state_[p.name], step_, lr, cfg_);
  }
}

void apply_freeze(ParamStore& store, TrainMode mode) {
  if (mode == TrainMode::Full) {
    store.unfreeze_all();
  } else {
    store.freeze_backbone();
  }
}

TrainResult train(CaptionModel& m, std::span<const CaptionSample> data, const TrainConfig& cfg,
                  const StepCallback& on_step) {
  cfg.validate();
  if (data.empty()) throw ContractError("training set is empty");
  const std::size_t n = data.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch);
  const long per_epoch = static_cast<long>((n + batch - 1) / batch);
  long total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min<long>(total, cfg.max_steps);

  Rng rng(cfg.seed);
  AdamW opt(cfg);
  TrainResult result;
  std::vector<std::size_t> order(n);
  const int threads = std::max(1, cfg.threads);

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < n && step < total; begin += batch) {
      const std::size_t end = std::min(n, begin + batch);
      const std::size_t count = end - begin;
      std::vector<std::vector<int>> frames(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto& clip = data[order[begin + i]].clip;
        const int available = static_cast<int>(clip.frames.size());
        frames[i] = cfg.random_frames ? random_frames(available, m.model.frames, rng)
                                      : uniform_frames(available, m.model.frames);
      }

      std::vector<SampleResult> results(count);
      try {
        if (threads == 1 || count == 1) {
          for (std::size_t i = 0; i < count; ++i) results[i] = run_sample(m, data[order[begin + i]], frames[i]);
        } else {
          const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
          std::vector<std::exception_ptr> errors(workers);
          std::vector<std::thread> pool;
          for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
              try {
                for (std::size_t i = w; i < count; i += workers) {
                  results[i] = run_sample(m, data[order[begin + i]], frames[i]);
                }
              } catch (...) {
                errors[w] = std::current_exception();
              }
            });
          }
          for (auto& t : pool) t.join();
          for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
          }
        }
      } catch (const NumericError& e) {
        throw NumericError("non-finite value at step " + std::to_string(step + 1) + ": " + e.what());
      }

      // Reduce in sample order so the sum is independent of the thread count.
      std::unordered_map<std::string, Tensor> grads;
      double loss_sum = 0.0;
      std::size_t tokens = 0;
      for (auto& r : results) {
        loss_sum += r.loss;
        tokens += r.tokens;
        for (auto& g : r.grads) {
          auto [it, fresh] = grads.try_emplace(g.name, std::move(g.grad));
          if (!fresh) {
            double* dst = it->second.mutable_ptr();
            const double* src = g.grad.ptr();
            for (std::size_t k = 0; k < it->second.numel(); ++k) dst[k] += src[k];
          }
        }
      }
      if (tokens == 0) throw ContractError("batch has no target tokens");
      for (const auto& p : m.params.params()) {
        if (p.trainable && !grads.contains(p.name)) grads.emplace(p.name, Tensor(p.value.shape()));
      }
      const double inv = 1.0 / static_cast<double>(tokens);
      const double loss = loss_sum * inv;
      if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step + 1));

      double sq = 0.0;
      for (const auto& p : m.params.params()) {
        auto it = grads.find(p.name);
        if (it == grads.end()) continue;
        for (double& x : it->second.mutable_data()) {
          x *= inv;
          sq += x * x;
        }
      }
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step + 1));
      if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
        const double s = cfg.clip_norm / (norm + 1e-6);
        for (auto& [name, g] : grads) {
          for (double& x : g.mutable_data()) x *= s;
        }
      }

      ++step;
      const double lr = lr_at(step, total, cfg);
      opt.step(m.params, grads, lr);
      StepLog log{step, epoch, lr, loss};
      result.curve.push_back(log);
      if (on_step) on_step(log);
    }
  }
  result.steps = step;
  return result;
}

double exact_match(const CaptionModel& m, std::span<const CaptionSample> samples, int max_len) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    if (generate(m, s.clip, max_len) == caption_words(s.caption)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

namespace {

CaptionModel fresh_model(const ProtocolConfig& cfg) {
  const Vocabulary vocab = caption_vocabulary(static_cast<std::size_t>(cfg.model.vocab));
  return make_caption_model(cfg.model, cfg.fusion, vocab.encode(kPromptText), cfg.model_seed);
}

// Zero-shot scores, optional adapter insertion, training and final scores.
void finish_stage(ProtocolResult& r, const ProtocolConfig& cfg, std::span<const CaptionSample> data,
                  const StepCallback& on_step) {
  r.zero_shot_exact_match = exact_match(r.model, data, cfg.max_len);
  r.zero_shot_loss = teacher_forced_loss(r.model, data);
  if (cfg.adapt_mode == TrainMode::Adapter) {
    r.model.adapter = cfg.adapter;
    insert_adapters(r.model.params, cfg.model, cfg.adapter, mix_seed(cfg.model_seed, 1));
  }
  apply_freeze(r.model.params, cfg.adapt_mode);
  r.stage2 = train(r.model, data, cfg.adapt, on_step);
  r.adapted_exact_match = exact_match(r.model, data, cfg.max_len);
  r.adapted_loss = teacher_forced_loss(r.model, data);
}

}  // namespace

CaptionModel pretrain_model(const ProtocolConfig& cfg, std::span<const CaptionSample> pretrain, TrainResult* curve,
                            const StepCallback& on_step) {
  CaptionModel m = fresh_model(cfg);
  apply_freeze(m.params, TrainMode::Full);
  TrainResult r = train(m, pretrain, cfg.pretrain, on_step);
  if (curve != nullptr) *curve = std::move(r);
  return m;
}

ProtocolResult adapt_protocol(const ProtocolConfig& cfg, const ParamStore* pretrained,
                              const StepCallback& on_stage1_step, const StepCallback& on_stage2_step) {
  const Vocabulary vocab = caption_vocabulary(static_cast<std::size_t>(cfg.model.vocab));
  const auto pretrain = pretrained == nullptr ? make_dataset(cfg.pretrain_data, vocab) : std::vector<CaptionSample>{};
  const auto adapt = make_dataset(cfg.adapt_data, vocab);
  return adapt_protocol(cfg, pretrain, adapt, pretrained, on_stage1_step, on_stage2_step);
}

ProtocolResult adapt_protocol(const ProtocolConfig& cfg, std::span<const CaptionSample> pretrain,
                              std::span<const CaptionSample> adapt, const ParamStore* pretrained,
                              const StepCallback& on_stage1_step, const StepCallback& on_stage2_step) {
  ProtocolResult r;
  if (pretrained != nullptr) {
    r.model = fresh_model(cfg);
    for (auto& p : r.model.params.params()) {
      if (!pretrained->contains(p.name)) throw ContractError("pretrained store lacks tensor '" + p.name + "'");
      const Param& src = pretrained->get(p.name);
      if (src.value.shape() != p.value.shape()) {
        throw ContractError("pretrained tensor '" + p.name + "' has shape " + shape_to_string(src.value.shape()));
      }
      p.value = src.value;
    }
  } else {
    r.model = pretrain_model(cfg, pretrain, &r.stage1, on_stage1_step);
  }
  r.pretrained = r.model.params;
  finish_stage(r, cfg, adapt, on_stage2_step);
  return r;
}

ProtocolResult single_stage(const ProtocolConfig& cfg, std::span<const CaptionSample> data,
                            const StepCallback& on_step) {
  ProtocolResult r;
  r.model = fresh_model(cfg);
  r.pretrained = r.model.params;
  finish_stage(r, cfg, data, on_step);
  return r;
}

int threads_from_env(int fallback) {
  const char* v = std::getenv("QADAPT_THREADS");
  if (v == nullptr || *v == '\0') return std::max(1, fallback);
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) throw ConfigError("QADAPT_THREADS must be a positive integer");
  return static_cast<int>(std::min<long>(n, 256));
}

}  // namespace qadapt
