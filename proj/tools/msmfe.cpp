#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "msmfe/io.hpp"
#include "msmfe/simulate.hpp"

namespace {

struct SimulateArgs {
  std::string preset;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> units, periods;
  std::optional<double> a0, b_x, gamma, effect;
  int truth_draws = 0;
};

struct RunArgs {
  std::string config;
  std::optional<std::string> input, output;
  std::optional<std::uint64_t> seed;
  std::optional<int> replicates, threads, petersen_replicates, truth_draws;
  std::optional<std::string> engine;
  bool quiet = false;
};

int simulate(const SimulateArgs& a) {
  msmfe::DgpConfig cfg = msmfe::dgp_preset(a.preset);
  if (a.seed) cfg.seed = *a.seed;
  if (a.units) cfg.n_units = *a.units;
  if (a.periods) cfg.n_periods = *a.periods;
  if (a.a0) cfg.a0 = *a.a0;
  if (a.b_x) cfg.b_x = *a.b_x;
  if (a.gamma) cfg.gamma = *a.gamma;
  if (a.effect) cfg.c_t.front() = *a.effect;
  const auto d = msmfe::generate_panel(cfg);
  msmfe::write_panel_csv(d, a.out);
  std::cout << "wrote " << d.n_rows() << " rows (" << d.n_units() << " units) to " << a.out << '\n';
  if (a.truth_draws > 0) {
    const double truth = msmfe::oracle_truth(cfg, {}, a.truth_draws);
    std::cout << "oracle_truth: " << msmfe::format_number(truth, 17) << '\n';
  }
  return 0;
}

int run(const RunArgs& a, msmfe::Stage stage) {
  msmfe::RunConfig cfg = msmfe::load_run_config(a.config);
  if (a.input) cfg.input = *a.input;
  if (a.output) cfg.output_dir = *a.output;
  if (a.seed) cfg.bootstrap.seed = *a.seed;
  if (a.replicates) cfg.bootstrap.replicates = *a.replicates;
  if (a.threads) cfg.bootstrap.threads = *a.threads;
  if (a.petersen_replicates) cfg.sensitivity.petersen_replicates = *a.petersen_replicates;
  if (a.truth_draws) cfg.sensitivity.truth_draws = *a.truth_draws;
  if (a.engine) cfg.sensitivity.engine = msmfe::detail::parse_engine(*a.engine);
  const auto rep = msmfe::run_pipeline(cfg, stage, a.quiet ? nullptr : &std::cerr);
  for (const auto& f : rep.files) std::cout << f.string() << '\n';
  if (rep.positivity && rep.positivity->flag) {
    std::cerr << "warning: positivity check flagged bias of " << msmfe::format_number(rep.positivity->bias, 6)
              << " against a standard error of " << msmfe::format_number(rep.positivity->se_reference, 6) << '\n';
  }
  return 0;
}

void add_run_options(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("-c,--config", a.config, "JSON run configuration")->required();
  cmd->add_option("-i,--input", a.input, "input panel CSV (overrides the config)");
  cmd->add_option("-o,--output", a.output, "output directory (overrides the config)");
  cmd->add_option("--seed", a.seed, "bootstrap seed");
  cmd->add_option("-B,--replicates", a.replicates, "bootstrap replicates")->check(CLI::PositiveNumber);
  cmd->add_option("-j,--threads", a.threads, "worker threads, 0 for all cores")->check(CLI::NonNegativeNumber);
  cmd->add_option("--petersen-replicates", a.petersen_replicates, "replicates of the positivity check")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--truth-draws", a.truth_draws, "draws for the truth in the fitted world")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--engine", a.engine, "sensitivity refit engine")
      ->check(CLI::IsMember({"fractional_logistic", "gaussian"}));
  cmd->add_flag("-q,--quiet", a.quiet, "no progress messages");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Marginal structural models with fixed-effects weights for panel data"};
  app.set_version_flag("--version", std::string(msmfe::kVersion));
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "generate a synthetic panel CSV from a preset");
  s->add_option("-p,--preset", sim.preset, "null, confounded-hard, realism, positivity or linear")->required();
  s->add_option("-o,--out", sim.out, "output CSV path")->required();
  s->add_option("--seed", sim.seed, "generator seed");
  s->add_option("--units", sim.units, "number of units")->check(CLI::PositiveNumber);
  s->add_option("--periods", sim.periods, "observed periods per unit")->check(CLI::PositiveNumber);
  s->add_option("--a0", sim.a0, "treatment intercept");
  s->add_option("--b-x", sim.b_x, "effect of X on treatment");
  s->add_option("--gamma", sim.gamma, "feedback of past treatment into X");
  s->add_option("--effect", sim.effect, "outcome coefficient of current treatment");
  s->add_option("--truth-draws", sim.truth_draws, "also print the oracle effect of current treatment");

  RunArgs args;
  std::vector<std::pair<CLI::App*, msmfe::Stage>> stages;
  for (auto [name, stage, help] : {
           std::tuple{"fit", msmfe::Stage::fit, "weights, outcome models and bootstrap intervals"},
           std::tuple{"balance", msmfe::Stage::balance, "weights and covariate balance"},
           std::tuple{"sensitivity", msmfe::Stage::sensitivity, "confounding-function sensitivity sweep"},
           std::tuple{"positivity", msmfe::Stage::positivity, "parametric bootstrap positivity check"},
           std::tuple{"all", msmfe::Stage::all, "every stage"}}) {
    auto* cmd = app.add_subcommand(name, help);
    add_run_options(cmd, args);
    stages.emplace_back(cmd, stage);
  }

  CLI11_PARSE(app, argc, argv);
  try {
    if (s->parsed()) return simulate(sim);
    for (const auto& [cmd, stage] : stages) {
      if (cmd->parsed()) return run(args, stage);
    }
  } catch (const std::exception& e) {
    std::cerr << "msmfe: error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
