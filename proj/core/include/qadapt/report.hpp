// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qadapt/metrics.hpp"
#include "qadapt/training.hpp"

namespace qadapt {

struct CaptionEval {
  metrics::Summary summary;
  std::vector<std::string> clip_ids;
  std::vector<std::string> candidates;
  std::vector<std::string> references;
  double exact_match = 0.0;
};

/// Greedy captions for `samples` scored against their reference captions.
CaptionEval evaluate_captions(const CaptionModel& m, std::span<const CaptionSample> samples, int max_len);

struct RunReport {
  std::string config_hash;
  std::string protocol;
  std::string mode;
  std::string adapter;
  ParamCount params;
  CaptionEval eval;
  double train_exact_match = 0.0;
  double train_loss = 0.0;
  double zero_shot_exact_match = 0.0;
  double zero_shot_loss = 0.0;
  long stage1_steps = 0;
  long stage2_steps = 0;
};

/// {config_hash, ft_ratio, bleu4, meteor_exact, rouge_l, cider, per_clip, ...}.
nlohmann::json report_json(const RunReport& r);

/// One-row CSV mirror of report_json without per-clip detail.
std::string report_csv_header();
std::string report_csv_row(const RunReport& r);

/// step,epoch,lr,loss.
std::string loss_curve_csv(const TrainResult& curve);

/// Shortest decimal text that round-trips.
std::string format_double(double v);

struct ChartSeries {
  std::string name;
  std::vector<double> values;
};

/// Line chart with categorical x positions, emitted as plain SVG markup.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           std::span<const std::string> x_values, std::span<const ChartSeries> series);

}  // namespace qadapt
