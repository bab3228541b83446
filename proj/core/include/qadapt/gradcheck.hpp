// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qadapt/adapters.hpp"
#include "qadapt/param_store.hpp"

namespace qadapt {

inline constexpr double kGradTolerance = 1e-4;
/// The step whose results decide pass or fail.
inline constexpr double kGateStep = 1e-5;
inline constexpr std::array<double, 3> kSweepSteps{1e-4, 1e-5, 1e-6};

/// Scalar objective built on the binder's tape.
using ScalarFn = std::function<ad::Var(Binder&)>;

struct FdOptions {
  double h = kGateStep;
  /// Coordinates checked per tensor, chosen by a seeded draw; 0 checks all.
  std::size_t coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error.
  double floor = 1e-6;
};

struct FdResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t coords = 0;
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

/// Compares backward() against central differences (f(p+h) - f(p-h)) / 2h on
/// every tensor of `params`. The store is restored before returning. A store
/// without parameters yields error 0.
FdResult finite_diff_check(const ScalarFn& f, ParamStore& params, const FdOptions& opt = {});

struct GradCheckRow {
  std::string name;
  double h = 0.0;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  /// Row counts toward pass/fail (h == kGateStep).
  bool gated = false;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  /// Names of cases failing at the gate step.
  std::vector<std::string> failures;
  bool passed() const { return failures.empty(); }
};

struct GradCheckOptions {
  ModelConfig model;
  /// Config of the composed Q-Adapter case; baseline adapters and the other
  /// placements are checked alongside it.
  AdapterConfig adapter;
  std::uint64_t seed = 0;
  /// Coordinates per tensor for the composed-model cases.
  std::size_t model_coords = 3;
};

/// One case per differentiable op plus the composed models, each at every
/// step of kSweepSteps.
GradCheckReport run_gradcheck(const GradCheckOptions& opt);

}  // namespace qadapt
