// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "qadapt/param_store.hpp"

namespace qadapt {

inline constexpr char kCheckpointMagic[] = "QADPTCK1";

struct Checkpoint {
  nlohmann::json config;
  std::string config_hash;
  /// Tags and trainable flags as saved.
  ParamStore params;
};

/// Layout: 8-byte magic, u64 LE header length, JSON header
/// {config, config_hash, tensors:[{name, shape, tag, trainable, offset, count}]},
/// then every tensor as little-endian f64 in store order. `offset` counts
/// doubles from the start of the payload.
std::string encode_checkpoint(const ParamStore& store, const nlohmann::json& config, const std::string& config_hash);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const nlohmann::json& config,
                     const std::string& config_hash);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace qadapt
