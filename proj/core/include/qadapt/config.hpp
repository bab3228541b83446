// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qadapt/training.hpp"

namespace qadapt {

/// Published JSON schemas (the files under schema/).
std::string_view experiment_schema_text();
std::string_view ablation_schema_text();
const nlohmann::json& experiment_schema();
const nlohmann::json& ablation_schema();

/// Validates `doc` against the subset of JSON Schema the published schemas
/// use: type, enum, properties, additionalProperties, required, items,
/// minItems, maxItems, minimum, maximum, exclusiveMinimum, exclusiveMaximum.
/// Returns one "path: message" line per violation.
std::vector<std::string> schema_violations(const nlohmann::json& doc, const nlohmann::json& schema);

enum class RunProtocol { Adapt, Single };

std::string_view run_protocol_name(RunProtocol p);

struct ExperimentConfig {
  /// Stage settings. Under the single protocol `adapt_data`/`adapt` describe
  /// the only stage and `pretrain*` are unused.
  ProtocolConfig protocol;
  RunProtocol kind = RunProtocol::Adapt;
  /// Fully resolved document (defaults filled in).
  nlohmann::json doc;
  /// FNV-1a of the canonical dump of `doc`.
  std::string hash;
};

/// The toy defaults as a config document.
nlohmann::json default_config_json();

/// Schema check, merge over defaults, semantic validation. Throws
/// ConfigError listing every violation.
ExperimentConfig resolve_config(const nlohmann::json& user);

/// Applies "a.b.c=value" to `doc`. The value is parsed as JSON when possible
/// and taken as a string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// Reads a config file (or the defaults when `path` is empty), applies
/// overrides in order and resolves.
ExperimentConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});

/// Hex FNV-1a 64 of the canonical (sorted-key, compact) dump.
std::string config_hash(const nlohmann::json& resolved);

}  // namespace qadapt
