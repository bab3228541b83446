// SPDX-License-Identifier: Apache-2.0
// qadapt: dataset generation, training runs, evaluation, parameter accounting,
// gradient checks and ablation sweeps.
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qadapt/commands.hpp"
#include "qadapt/errors.hpp"

namespace fs = std::filesystem;
using namespace qadapt;

int main(int argc, char** argv) {
  CLI::App app{"Q-Adapter video captioning experiments on synthetic clips"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "Experiment JSON (defaults when omitted)");
    sub->add_option("--set", overrides, "Override a key, e.g. --set adapter.M=8")->take_all();
  };

  std::string out, data, checkpoint, fault;
  std::vector<std::string> axes;
  bool no_svg = false;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic datasets of a config");
  add_config(gen);
  gen->add_option("-o,--out", out, "Output directory")->required();

  auto* run = app.add_subcommand("run", "Train per config; write report, loss curve and checkpoint");
  add_config(run);
  run->add_option("-o,--out", out, "Output directory")->required();
  run->add_option("--data", data, "gen-data directory (generated in memory when omitted)");

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on its eval set");
  ev->add_option("--checkpoint", checkpoint, "model.ckpt from run")->required();
  ev->add_option("--data", data, "gen-data directory (generated in memory when omitted)");
  ev->add_option("-o,--out", out, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Sweep queries, placement or range");
  add_config(ab);
  ab->add_option("--axis", axes, "queries, placement, range or all")->required()->take_all();
  ab->add_option("-o,--out", out, "Output directory")->required();
  ab->add_flag("--no-svg", no_svg, "Skip the SVG charts");

  auto* cp = app.add_subcommand("count-params", "Trainable and total parameter counts");
  add_config(cp);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and the composed models");
  add_config(gc);
  gc->add_option("--fault", fault, "Corrupt the backward rule of one op (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cmd::kExitConfig;
  }

  try {
    if (ev->parsed()) return cmd::eval(checkpoint, data, out, std::cout);
    const ExperimentConfig cfg = load_config(config_path, overrides);
    if (gen->parsed()) return cmd::gen_data(cfg, out, std::cout);
    if (run->parsed()) return cmd::run(cfg, out, data, std::cout);
    if (cp->parsed()) return cmd::count_params(cfg, std::cout);
    if (gc->parsed()) {
      std::optional<ad::OpKind> kind;
      if (!fault.empty()) {
        kind = ad::op_from_name(fault);
        if (!kind) throw ConfigError("unknown op '" + fault + "'");
      }
      return cmd::gradcheck(cfg, kind, std::cout);
    }
    std::vector<cmd::Axis> selected;
    for (const auto& a : axes) {
      if (a == "all") {
        selected.assign(std::begin(cmd::kAllAxes), std::end(cmd::kAllAxes));
      } else {
        selected.push_back(cmd::axis_from_name(a));
      }
    }
    return cmd::ablate(cfg, selected, out, !no_svg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cmd::exit_code_for(e);
  }
}
