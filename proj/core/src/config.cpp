// SPDX-License-Identifier: Apache-2.0
#include "qadapt/config.hpp"

#include <cmath>

#include "qadapt/errors.hpp"
#include "qadapt/io.hpp"

namespace qadapt {

using nlohmann::json;

namespace {

bool has_type(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

void check(const json& v, const json& schema, const std::string& path, std::vector<std::string>& out) {
  const std::string where = path.empty() ? "(root)" : path;
  if (auto it = schema.find("type"); it != schema.end()) {
    if (!has_type(v, it->get<std::string>())) {
      out.push_back(where + ": expected " + it->get<std::string>() + ", got " + v.dump());
      return;
    }
  }
  if (auto it = schema.find("enum"); it != schema.end()) {
    bool found = false;
    for (const auto& e : *it) found = found || e == v;
    if (!found) out.push_back(where + ": " + v.dump() + " is not one of " + it->dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (auto it = schema.find("minimum"); it != schema.end() && x < it->get<double>()) {
      out.push_back(where + ": " + v.dump() + " is below the minimum " + it->dump());
    }
    if (auto it = schema.find("maximum"); it != schema.end() && x > it->get<double>()) {
      out.push_back(where + ": " + v.dump() + " is above the maximum " + it->dump());
    }
    if (auto it = schema.find("exclusiveMinimum"); it != schema.end() && x <= it->get<double>()) {
      out.push_back(where + ": " + v.dump() + " must be greater than " + it->dump());
    }
    if (auto it = schema.find("exclusiveMaximum"); it != schema.end() && x >= it->get<double>()) {
      out.push_back(where + ": " + v.dump() + " must be less than " + it->dump());
    }
  }
  if (v.is_array()) {
    if (auto it = schema.find("minItems"); it != schema.end() && v.size() < it->get<std::size_t>()) {
      out.push_back(where + ": needs at least " + it->dump() + " items");
    }
    if (auto it = schema.find("maxItems"); it != schema.end() && v.size() > it->get<std::size_t>()) {
      out.push_back(where + ": allows at most " + it->dump() + " items");
    }
    if (auto it = schema.find("items"); it != schema.end()) {
      for (std::size_t i = 0; i < v.size(); ++i) check(v[i], *it, path + "[" + std::to_string(i) + "]", out);
    }
  }
  if (v.is_object()) {
    const auto props = schema.find("properties");
    if (auto it = schema.find("required"); it != schema.end()) {
      for (const auto& key : *it) {
        if (!v.contains(key.get<std::string>())) out.push_back(where + ": missing required key " + key.dump());
      }
    }
    const auto extra = schema.find("additionalProperties");
    const bool closed = extra != schema.end() && extra->is_boolean() && !extra->get<bool>();
    for (const auto& [key, value] : v.items()) {
      const std::string child = path.empty() ? key : path + "." + key;
      if (props != schema.end() && props->contains(key)) {
        check(value, props->at(key), child, out);
      } else if (closed) {
        out.push_back(child + ": unknown key");
      }
    }
  }
}

template <typename T>
T get(const json& doc, const char* section, const char* key) {
  return doc.at(section).at(key).get<T>();
}

TrainConfig train_section(const json& s) {
  TrainConfig t;
  t.lr = s.at("lr").get<double>();
  t.warmup_ratio = s.at("warmup_ratio").get<double>();
  t.epochs = s.at("epochs").get<int>();
  t.batch = s.at("batch").get<int>();
  t.seed = s.at("seed").get<std::uint64_t>();
  t.weight_decay = s.at("weight_decay").get<double>();
  t.clip_norm = s.at("clip_norm").get<double>();
  t.max_steps = s.at("max_steps").get<int>();
  t.random_frames = s.at("random_frames").get<bool>();
  return t;
}

}  // namespace

const json& experiment_schema() {
  static const json s = json::parse(experiment_schema_text());
  return s;
}

const json& ablation_schema() {
  static const json s = json::parse(ablation_schema_text());
  return s;
}

std::vector<std::string> schema_violations(const json& doc, const json& schema) {
  std::vector<std::string> out;
  check(doc, schema, "", out);
  return out;
}

std::string_view run_protocol_name(RunProtocol p) { return p == RunProtocol::Adapt ? "adapt" : "single"; }

json default_config_json() {
  return json{
      {"data",
       {{"seed", 1},
        {"n_train", 32},
        {"n_eval", 16},
        {"n_pretrain", 128},
        {"grammar", "B"},
        {"pretrain_grammar", "A"},
        {"sparsity", 0.5}}},
      {"model",
       {{"seed", 0},
        {"d", 32},
        {"heads", 4},
        {"depth", 4},
        {"decoder_depth", 2},
        {"patch", 4},
        {"height", 16},
        {"width", 16},
        {"channels", 3},
        {"T", 4},
        {"vocab", 64},
        {"max_text", 16},
        {"max_prompt", 8},
        {"mlp_ratio", 4}}},
      {"adapter",
       {{"type", "qadapter"},
        {"M", 4},
        {"d_prime", 8},
        {"rank", 4},
        {"alpha", 8.0},
        {"placement", "proposed"},
        {"range", {3, 4}},
        {"lora_targets", "attn_mlp"}}},
      {"pretrain",
       {{"lr", 1e-3},
        {"warmup_ratio", 0.1},
        {"epochs", 80},
        {"batch", 8},
        {"seed", 0},
        {"weight_decay", 0.01},
        {"clip_norm", 1.0},
        {"max_steps", 0},
        {"random_frames", true}}},
      {"train",
       {{"lr", 3e-2},
        {"warmup_ratio", 0.1},
        {"epochs", 600},
        {"batch", 4},
        {"seed", 0},
        {"mode", "adapter"},
        {"protocol", "adapt"},
        {"weight_decay", 0.01},
        {"clip_norm", 1.0},
        {"max_steps", 0},
        {"random_frames", true}}},
      {"eval", {{"fusion", "concat"}, {"max_len", 12}}},
  };
}

ExperimentConfig resolve_config(const json& user) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  const auto violations = schema_violations(user, experiment_schema());
  if (!violations.empty()) {
    std::string msg = "schema violation:";
    for (const auto& v : violations) msg += "\n  " + v;
    throw ConfigError(msg);
  }
  json doc = default_config_json();
  doc.merge_patch(user);

  ExperimentConfig cfg;
  auto& p = cfg.protocol;
  try {
    auto& m = p.model;
    m.d = get<int>(doc, "model", "d");
    m.heads = get<int>(doc, "model", "heads");
    m.depth = get<int>(doc, "model", "depth");
    m.decoder_depth = get<int>(doc, "model", "decoder_depth");
    m.patch = get<int>(doc, "model", "patch");
    m.height = get<int>(doc, "model", "height");
    m.width = get<int>(doc, "model", "width");
    m.channels = get<int>(doc, "model", "channels");
    m.frames = get<int>(doc, "model", "T");
    m.vocab = get<int>(doc, "model", "vocab");
    m.max_text = get<int>(doc, "model", "max_text");
    m.max_prompt = get<int>(doc, "model", "max_prompt");
    m.mlp_ratio = get<int>(doc, "model", "mlp_ratio");
    m.validate();
    p.model_seed = get<std::uint64_t>(doc, "model", "seed");

    auto& a = p.adapter;
    a.type = adapter_type_from_name(get<std::string>(doc, "adapter", "type"));
    a.queries = get<int>(doc, "adapter", "M");
    a.reduced = get<int>(doc, "adapter", "d_prime");
    a.rank = get<int>(doc, "adapter", "rank");
    a.alpha = get<double>(doc, "adapter", "alpha");
    a.placement = placement_from_name(get<std::string>(doc, "adapter", "placement"));
    const auto range = get<std::vector<int>>(doc, "adapter", "range");
    a.range = InsertionRange{range.at(0), range.at(1)};
    a.lora_targets = lora_targets_from_name(get<std::string>(doc, "adapter", "lora_targets"));
    a.validate(m);

    const RenderConfig render{m.height, m.width, m.channels, m.frames};
    const auto seed = get<std::uint64_t>(doc, "data", "seed");
    const double sparsity = get<double>(doc, "data", "sparsity");
    const Grammar grammar = grammar_from_name(get<std::string>(doc, "data", "grammar"));
    p.pretrain_data = DatasetSpec{seed, get<int>(doc, "data", "n_pretrain"),
                                  grammar_from_name(get<std::string>(doc, "data", "pretrain_grammar")), sparsity, render};
    p.adapt_data = DatasetSpec{seed + 1, get<int>(doc, "data", "n_train"), grammar, sparsity, render};
    p.eval_data = DatasetSpec{seed + 2, get<int>(doc, "data", "n_eval"), grammar, sparsity, render};

    p.pretrain = train_section(doc.at("pretrain"));
    p.adapt = train_section(doc.at("train"));
    p.pretrain.validate();
    p.adapt.validate();
    p.adapt_mode = train_mode_from_name(get<std::string>(doc, "train", "mode"));
    cfg.kind = get<std::string>(doc, "train", "protocol") == "adapt" ? RunProtocol::Adapt : RunProtocol::Single;
    p.fusion = fusion_from_name(get<std::string>(doc, "eval", "fusion"));
    p.max_len = get<int>(doc, "eval", "max_len");
    if (p.adapt_mode == TrainMode::Adapter && a.type == AdapterType::None) {
      throw ConfigError("train.mode adapter needs adapter.type other than none");
    }
    const int prompt_len = static_cast<int>(caption_vocabulary(static_cast<std::size_t>(m.vocab))
                                                .encode(kPromptText)
                                                .size());
    if (prompt_len > m.max_prompt) throw ConfigError("model.max_prompt is shorter than the prompt");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  cfg.doc = std::move(doc);
  cfg.hash = config_hash(cfg.doc);
  return cfg;
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key.path=value");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override path '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

ExperimentConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
  json doc = json::object();
  if (!path.empty()) {
    const std::string text = io::read_text(path);
    doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return resolve_config(doc);
}

std::string config_hash(const json& resolved) { return io::hex64(io::fnv1a64(resolved.dump())); }

}  // namespace qadapt
