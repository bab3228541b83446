// SPDX-License-Identifier: Apache-2.0
#include "qadapt/commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "qadapt/checkpoint.hpp"
#include "qadapt/errors.hpp"
#include "qadapt/gradcheck.hpp"
#include "qadapt/io.hpp"
#include "qadapt/report.hpp"

namespace qadapt::cmd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Datasets {
  std::vector<CaptionSample> pretrain;
  std::vector<CaptionSample> train;
  std::vector<CaptionSample> eval;
};

Vocabulary vocab_of(const ModelConfig& m) { return caption_vocabulary(static_cast<std::size_t>(m.vocab)); }

std::vector<CaptionSample> load_checked(const fs::path& dir, const Vocabulary& vocab, const std::string& hash) {
  LoadedDataset ds = read_dataset(dir, vocab);
  if (ds.config_hash != hash) {
    throw ConfigError("dataset " + dir.string() + " was generated with config " + ds.config_hash +
                      ", this run uses " + hash);
  }
  return std::move(ds.samples);
}

Datasets datasets_for(const ExperimentConfig& cfg, const fs::path& data) {
  const Vocabulary vocab = vocab_of(cfg.protocol.model);
  const bool staged = cfg.kind == RunProtocol::Adapt;
  Datasets d;
  if (data.empty()) {
    if (staged) d.pretrain = make_dataset(cfg.protocol.pretrain_data, vocab);
    d.train = make_dataset(cfg.protocol.adapt_data, vocab);
    d.eval = make_dataset(cfg.protocol.eval_data, vocab);
  } else {
    if (staged) d.pretrain = load_checked(data / "pretrain", vocab, cfg.hash);
    d.train = load_checked(data / "train", vocab, cfg.hash);
    d.eval = load_checked(data / "eval", vocab, cfg.hash);
  }
  return d;
}

long planned_steps(std::size_t n, const TrainConfig& t) {
  const long per_epoch = static_cast<long>((n + static_cast<std::size_t>(t.batch) - 1) / static_cast<std::size_t>(t.batch));
  long total = per_epoch * t.epochs;
  if (t.max_steps > 0) total = std::min<long>(total, t.max_steps);
  return total;
}

StepCallback progress(const char* stage, long total, std::ostream& log) {
  const long every = std::max<long>(1, total / 10);
  return [stage, total, every, &log](const StepLog& s) {
    if (s.step % every == 0 || s.step == total) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "  %s step %ld/%ld epoch %d lr %.3g loss %.4f\n", stage, s.step, total, s.epoch,
                    s.lr, s.loss);
      log << buf << std::flush;
    }
  };
}

struct Outcome {
  ProtocolResult result;
  RunReport report;
};

ExperimentConfig with_threads(ExperimentConfig cfg) {
  const int threads = threads_from_env(1);
  cfg.protocol.pretrain.threads = threads;
  cfg.protocol.adapt.threads = threads;
  return cfg;
}

Outcome execute(const ExperimentConfig& base, const Datasets& data, const ParamStore* pretrained, std::ostream& log) {
  const ExperimentConfig cfg = with_threads(base);
  const ProtocolConfig& p = cfg.protocol;
  Outcome o;
  if (cfg.kind == RunProtocol::Adapt) {
    o.result = adapt_protocol(p, data.pretrain, data.train, pretrained,
                              progress("stage1", planned_steps(data.pretrain.size(), p.pretrain), log),
                              progress("stage2", planned_steps(data.train.size(), p.adapt), log));
  } else {
    o.result = single_stage(p, data.train, progress("train", planned_steps(data.train.size(), p.adapt), log));
  }
  RunReport& r = o.report;
  r.config_hash = cfg.hash;
  r.protocol = std::string(run_protocol_name(cfg.kind));
  r.mode = std::string(train_mode_name(p.adapt_mode));
  r.adapter = std::string(adapter_type_name(o.result.model.adapter.type));
  r.params = count_params(o.result.model.params);
  r.eval = evaluate_captions(o.result.model, data.eval, p.max_len);
  r.train_exact_match = o.result.adapted_exact_match;
  r.train_loss = o.result.adapted_loss;
  r.zero_shot_exact_match = o.result.zero_shot_exact_match;
  r.zero_shot_loss = o.result.zero_shot_loss;
  r.stage1_steps = o.result.stage1.steps;
  r.stage2_steps = o.result.stage2.steps;
  return o;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Stage-1 settings only; runs that agree on these share a backbone.
json stage1_key(const json& doc) {
  const json& d = doc.at("data");
  return json{{"data",
               {{"seed", d.at("seed")},
                {"n_pretrain", d.at("n_pretrain")},
                {"pretrain_grammar", d.at("pretrain_grammar")},
                {"sparsity", d.at("sparsity")}}},
              {"model", doc.at("model")},
              {"pretrain", doc.at("pretrain")},
              {"fusion", doc.at("eval").at("fusion")}};
}

class FaultGuard {
 public:
  explicit FaultGuard(std::optional<ad::OpKind> kind) { ad::set_backward_fault(kind); }
  ~FaultGuard() { ad::set_backward_fault(std::nullopt); }
  FaultGuard(const FaultGuard&) = delete;
  FaultGuard& operator=(const FaultGuard&) = delete;
};

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitConfig;
  if (dynamic_cast<const ContractError*>(&e) != nullptr) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return kExitIo;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return kExitNumeric;
  return kExitFailure;
}

int gen_data(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  const Vocabulary vocab = vocab_of(cfg.protocol.model);
  auto emit = [&](const char* name, const DatasetSpec& spec) {
    const auto samples = make_dataset(spec, vocab);
    write_dataset(out / name, spec, samples, vocab, cfg.hash);
    log << name << ": " << samples.size() << " samples (grammar " << grammar_name(spec.grammar) << ")\n";
  };
  if (cfg.kind == RunProtocol::Adapt) emit("pretrain", cfg.protocol.pretrain_data);
  emit("train", cfg.protocol.adapt_data);
  emit("eval", cfg.protocol.eval_data);
  log << "config " << cfg.hash << " -> " << out.string() << "\n";
  return kExitOk;
}

int run(const ExperimentConfig& cfg, const fs::path& out, const fs::path& data, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const Datasets d = datasets_for(cfg, data);
  io::ensure_dir(out);
  const Outcome o = execute(cfg, d, nullptr, log);
  const RunReport& r = o.report;
  io::write_text(out / "report.json", report_json(r).dump(2) + "\n");
  io::write_text(out / "report.csv", report_csv_header() + report_csv_row(r));
  io::write_text(out / "losses.csv", loss_curve_csv(o.result.stage2));
  if (cfg.kind == RunProtocol::Adapt) io::write_text(out / "pretrain_losses.csv", loss_curve_csv(o.result.stage1));
  save_checkpoint(out / "model.ckpt", o.result.model.params, cfg.doc, cfg.hash);
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "ft_ratio %.6f (%zu/%zu)  train EM %.3f loss %.4f  zero-shot EM %.3f  eval B@4 %.4f M %.4f R-L %.4f "
                "C %.4f  (%.1f s)\n",
                r.params.ratio(), r.params.trainable, r.params.total, r.train_exact_match, r.train_loss,
                r.zero_shot_exact_match, r.eval.summary.bleu4, r.eval.summary.meteor_exact, r.eval.summary.rouge_l,
                r.eval.summary.cider, seconds_since(t0));
  log << buf;
  if (r.eval.summary.bleu_zero_order) log << "note: some n-gram order has no match, so unsmoothed BLEU@4 is 0\n";
  return kExitOk;
}

int eval(const fs::path& checkpoint, const fs::path& data, const fs::path& out, std::ostream& log) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const ExperimentConfig cfg = resolve_config(ck.config);
  if (cfg.hash != ck.config_hash) {
    throw ConfigError("checkpoint config hash " + ck.config_hash + " does not match its config (" + cfg.hash + ")");
  }
  const ProtocolConfig& p = cfg.protocol;
  const Vocabulary vocab = vocab_of(p.model);
  CaptionModel m;
  m.model = p.model;
  m.fusion = p.fusion;
  m.prompt = vocab.encode(kPromptText);
  m.params = std::move(ck.params);
  const bool adapted = count_tagged(m.params, ParamTag::Adapter) > 0;
  m.adapter = adapted ? p.adapter : AdapterConfig{.type = AdapterType::None};
  const auto samples = data.empty() ? make_dataset(p.eval_data, vocab) : load_checked(data / "eval", vocab, cfg.hash);

  RunReport r;
  r.config_hash = cfg.hash;
  r.protocol = std::string(run_protocol_name(cfg.kind));
  r.mode = std::string(train_mode_name(p.adapt_mode));
  r.adapter = std::string(adapter_type_name(m.adapter.type));
  r.params = count_params(m.params);
  r.eval = evaluate_captions(m, samples, p.max_len);
  json j = report_json(r);
  for (const char* k : {"train_exact_match", "train_loss", "zero_shot_exact_match", "zero_shot_loss", "stage1_steps",
                        "stage2_steps"}) {
    j.erase(k);
  }
  io::write_text(out / "report.json", j.dump(2) + "\n");
  char buf[160];
  std::snprintf(buf, sizeof buf, "eval EM %.3f  B@4 %.4f M %.4f R-L %.4f C %.4f over %zu clips\n", r.eval.exact_match,
                r.eval.summary.bleu4, r.eval.summary.meteor_exact, r.eval.summary.rouge_l, r.eval.summary.cider,
                samples.size());
  log << buf;
  return kExitOk;
}

int count_params(const ExperimentConfig& cfg, std::ostream& log) {
  const ProtocolConfig& p = cfg.protocol;
  const Vocabulary vocab = vocab_of(p.model);
  CaptionModel m = make_caption_model(p.model, p.fusion, vocab.encode(kPromptText), p.model_seed);
  const bool adapter_mode = p.adapt_mode == TrainMode::Adapter;
  if (adapter_mode) insert_adapters(m.params, p.model, p.adapter, mix_seed(p.model_seed, 1));
  apply_freeze(m.params, p.adapt_mode);
  const ParamCount c = qadapt::count_params(m.params);
  const json j{{"config_hash", cfg.hash},
               {"mode", train_mode_name(p.adapt_mode)},
               {"adapter", adapter_mode ? adapter_type_name(p.adapter.type) : "none"},
               {"placement", placement_name(p.adapter.placement)},
               {"range", {p.adapter.range.first, p.adapter.range.last}},
               {"adapted_blocks", adapter_mode ? p.adapter.range.length() : 0},
               {"adapter_params_per_block", adapter_mode ? adapter_params_per_block(p.model, p.adapter) : 0},
               {"adapter_params", count_tagged(m.params, ParamTag::Adapter)},
               {"backbone_params", count_tagged(m.params, ParamTag::Backbone)},
               {"trainable", c.trainable},
               {"total", c.total},
               {"ft_ratio", c.ratio()}};
  log << j.dump(2) << "\n";
  return kExitOk;
}

int gradcheck(const ExperimentConfig& cfg, std::optional<ad::OpKind> fault, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  FaultGuard guard(fault);
  GradCheckOptions opt;
  opt.model = cfg.protocol.model;
  opt.adapter = cfg.protocol.adapter;
  opt.seed = cfg.protocol.model_seed;
  const GradCheckReport rep = run_gradcheck(opt);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %8s %14s %7s  %s\n", "case", "h", "max_rel_err", "coords", "status");
  log << buf;
  for (const auto& row : rep.rows) {
    const char* status = row.passed ? "ok" : (row.gated ? "FAIL" : "over");
    std::snprintf(buf, sizeof buf, "%-28s %8.0e %14.3e %7zu  %s%s\n", row.name.c_str(), row.h, row.max_rel_error,
                  row.coords, status, row.gated ? "" : " (report only)");
    log << buf;
  }
  std::snprintf(buf, sizeof buf, "tolerance %.0e at h = %.0e; %.1f s\n", kGradTolerance, kGateStep,
                seconds_since(t0));
  log << buf;
  if (rep.passed()) {
    log << "gradcheck: PASS\n";
    return kExitOk;
  }
  log << "gradcheck: FAIL:";
  for (const auto& f : rep.failures) log << ' ' << f;
  log << "\n";
  return kExitGradcheck;
}

std::string_view axis_name(Axis a) {
  switch (a) {
    case Axis::Queries: return "queries";
    case Axis::Placement: return "placement";
    case Axis::Range: return "range";
  }
  return "unknown";
}

Axis axis_from_name(std::string_view name) {
  for (Axis a : kAllAxes) {
    if (axis_name(a) == name) return a;
  }
  throw ConfigError("unknown ablation axis '" + std::string(name) + "' (expected queries, placement or range)");
}

std::vector<AxisPoint> axis_points(Axis axis, int depth) {
  std::vector<AxisPoint> out;
  switch (axis) {
    case Axis::Queries:
      for (int m : {2, 4, 8}) out.push_back({std::to_string(m), {"adapter.M=" + std::to_string(m)}});
      break;
    case Axis::Placement:
      for (const char* p : {"sequential", "parallel_mlp", "proposed"}) {
        out.push_back({p, {std::string("adapter.placement=\"") + p + "\""}});
      }
      break;
    case Axis::Range:
      for (int first : {1, std::max(1, depth / 2), std::max(1, 3 * depth / 4)}) {
        const std::string value = std::to_string(first) + "-" + std::to_string(depth);
        out.push_back({value, {"adapter.range=[" + std::to_string(first) + "," + std::to_string(depth) + "]"}});
      }
      break;
  }
  return out;
}

int ablate(const ExperimentConfig& cfg, std::span<const Axis> axes, const fs::path& out, bool svg,
           std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.protocol.adapter.type != AdapterType::QAdapter || cfg.protocol.adapt_mode != TrainMode::Adapter) {
    throw ConfigError("ablation sweeps need adapter.type qadapter and train.mode adapter");
  }
  io::ensure_dir(out);
  const Datasets data = datasets_for(cfg, {});

  ParamStore pretrained;
  const ParamStore* shared = nullptr;
  if (cfg.kind == RunProtocol::Adapt) {
    const json key = stage1_key(cfg.doc);
    const std::string key_hash = config_hash(key);
    const fs::path cache = out / "pretrained.ckpt";
    bool cached = false;
    if (fs::exists(cache)) {
      Checkpoint ck = load_checkpoint(cache);
      if (ck.config_hash == key_hash) {
        pretrained = std::move(ck.params);
        cached = true;
        log << "stage 1: reusing " << cache.string() << "\n";
      }
    }
    if (!cached) {
      const ExperimentConfig c = with_threads(cfg);
      const CaptionModel m = pretrain_model(
          c.protocol, data.pretrain, nullptr,
          progress("stage1", planned_steps(data.pretrain.size(), c.protocol.pretrain), log));
      pretrained = m.params;
      save_checkpoint(cache, pretrained, key, key_hash);
    }
    shared = &pretrained;
  }

  for (Axis axis : axes) {
    const std::string name(axis_name(axis));
    const fs::path csv_path = out / ("ablate_" + name + ".csv");
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw IoError("cannot open " + csv_path.string() + " for writing");
    csv << "axis,value,adapter,M,d_prime,placement,range_first,range_last,adapted_blocks,trainable,total,ft_ratio,"
           "bleu4,meteor_exact,rouge_l,cider,train_exact_match,train_loss,config_hash\n"
        << std::flush;
    std::vector<std::string> labels;
    std::vector<ChartSeries> series{{"bleu4", {}}, {"meteor_exact", {}}, {"rouge_l", {}}, {"cider/10", {}},
                                    {"train_exact_match", {}}};
    for (const auto& point : axis_points(axis, cfg.protocol.model.depth)) {
      json doc = cfg.doc;
      for (const auto& o : point.overrides) apply_override(doc, o);
      const ExperimentConfig c = resolve_config(doc);
      log << name << " = " << point.value << " (config " << c.hash << ")\n";
      const Outcome o = execute(c, data, shared, log);
      const RunReport& r = o.report;
      const AdapterConfig& a = c.protocol.adapter;
      const auto& s = r.eval.summary;
      csv << name << ',' << point.value << ',' << adapter_type_name(a.type) << ',' << a.queries << ',' << a.reduced
          << ',' << placement_name(a.placement) << ',' << a.range.first << ',' << a.range.last << ','
          << a.range.length() << ',' << r.params.trainable << ',' << r.params.total << ','
          << format_double(r.params.ratio()) << ',' << format_double(s.bleu4) << ','
          << format_double(s.meteor_exact) << ',' << format_double(s.rouge_l) << ',' << format_double(s.cider)
          << ',' << format_double(r.train_exact_match) << ',' << format_double(r.train_loss) << ',' << r.config_hash
          << '\n'
          << std::flush;
      if (!csv) throw IoError("cannot write " + csv_path.string());
      labels.push_back(point.value);
      series[0].values.push_back(s.bleu4);
      series[1].values.push_back(s.meteor_exact);
      series[2].values.push_back(s.rouge_l);
      series[3].values.push_back(s.cider / 10.0);
      series[4].values.push_back(r.train_exact_match);
      char buf[160];
      std::snprintf(buf, sizeof buf, "  ft_ratio %.6f  train EM %.3f loss %.4f  eval B@4 %.4f C %.4f  (%.1f s)\n",
                    r.params.ratio(), r.train_exact_match, r.train_loss, s.bleu4, s.cider, seconds_since(t0));
      log << buf;
    }
    if (svg) {
      io::write_text(out / ("ablate_" + name + ".svg"),
                     svg_line_chart("Q-Adapter ablation: " + name, name, labels, series));
    }
  }
  return kExitOk;
}

}  // namespace qadapt::cmd
