// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "qadapt/config.hpp"
#include "qadapt/tape.hpp"

// Subcommand bodies behind the qadapt tool. Each writes its artifacts, prints
// a short summary to `log` and returns an exit code; failures surface as
// exceptions that exit_code_for() maps to codes.
namespace qadapt::cmd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitGradcheck = 5;

/// ConfigError and ContractError -> 2, IoError -> 3, NumericError -> 4,
/// anything else -> 1.
int exit_code_for(const std::exception& e);

/// <out>/train and <out>/eval, plus <out>/pretrain under the adapt protocol.
int gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);

/// Writes report.json, report.csv, losses.csv (plus pretrain_losses.csv
/// under the adapt protocol) and model.ckpt to `out`. With a non-empty
/// `data`, datasets are read from a gen-data directory whose config hash must
/// match.
int run(const ExperimentConfig& cfg, const std::filesystem::path& out, const std::filesystem::path& data,
        std::ostream& log);

/// Scores a checkpoint on its config's eval set (or <data>/eval) and writes
/// report.json to `out`.
int eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data, const std::filesystem::path& out,
         std::ostream& log);

/// Prints trainable/total counts and the FT ratio as JSON.
int count_params(const ExperimentConfig& cfg, std::ostream& log);

/// Prints the pass/fail table; returns kExitGradcheck when any case fails.
/// `fault` corrupts one backward rule (negative control).
int gradcheck(const ExperimentConfig& cfg, std::optional<ad::OpKind> fault, std::ostream& log);

enum class Axis { Queries, Placement, Range };

std::string_view axis_name(Axis a);
Axis axis_from_name(std::string_view name);
inline constexpr Axis kAllAxes[] = {Axis::Queries, Axis::Placement, Axis::Range};

/// The config overrides of each run along `axis` for a model of `depth`
/// encoder blocks, with the printed axis value.
struct AxisPoint {
  std::string value;
  std::vector<std::string> overrides;
};
std::vector<AxisPoint> axis_points(Axis axis, int depth);

/// Writes ablate_<axis>.csv (flushed per run) and ablate_<axis>.svg per
/// axis. One stage-1 backbone is shared by every run and cached as
/// <out>/pretrained.ckpt.
int ablate(const ExperimentConfig& cfg, std::span<const Axis> axes, const std::filesystem::path& out, bool svg,
           std::ostream& log);

}  // namespace qadapt::cmd
