// Acceptance run: one PASS/FAIL line per criterion. An optional argument
// restricts the run to criteria whose name contains it.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "configs.hpp"
#include "msmfe/balance.hpp"
#include "msmfe/io.hpp"
#include "msmfe/sensitivity.hpp"
#include "msmfe/simulate.hpp"
#include "oracles.hpp"

using namespace msmfe;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) { return format_number(v, digits); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------

Outcome fe_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int instances = 0;
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Rng rng(seed, 99);
    const int units = 5 + static_cast<int>(rng.below(26));
    const int periods = 4 + static_cast<int>(rng.below(12));
    const auto d = oracle::random_logit_panel(1000 + seed, units, periods);
    ModelSpec s;
    s.response = "y";
    s.terms = {"x1", "x2"};
    s.fe_group = std::string(kUnitColumn);
    const auto f = fit(d, s);
    const std::set<std::string> dropped(f.dropped_groups.begin(), f.dropped_groups.end());
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < d.n_rows(); ++r) {
      if (!dropped.count(d.unit_name(r))) rows.push_back(r);
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd X(n, 2);
    Eigen::VectorXd y(n);
    std::vector<int> group;
    std::map<std::string, int> gi;
    std::vector<std::string> names;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto r = rows[static_cast<std::size_t>(i)];
      X(i, 0) = *d.value("x1", r);
      X(i, 1) = *d.value("x2", r);
      y[i] = *d.value("y", r);
      auto [it, ins] = gi.try_emplace(d.unit_name(r), static_cast<int>(names.size()));
      if (ins) names.push_back(d.unit_name(r));
      group.push_back(it->second);
    }
    const auto ref = oracle::dummy_logit_mle(X, y, Eigen::VectorXd::Ones(n), group, static_cast<int>(names.size()));
    for (Eigen::Index k = 0; k < 2; ++k) worst = std::max(worst, std::abs(f.coefficients[k] - ref.slopes[k]));
    const auto fe = f.absolute_fe();
    for (std::size_t g = 0; g < names.size(); ++g) {
      worst = std::max(worst, std::abs(fe.at(names[g]) - ref.group_effects[g]));
    }
    ++instances;
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 10.0,
          std::to_string(instances) + " instances, max |diff| " + fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

Outcome gradient_check() {
  double worst = 0.0;
  int checks = 0;
  for (Family fam : {Family::logistic, Family::gaussian}) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const auto d = oracle::random_logit_panel(2000 + seed, 12, 8);
      ModelSpec s;
      s.response = "y";
      s.terms = {"x1", "x2"};
      s.fe_group = std::string(kUnitColumn);
      s.family = fam;
      Rng rng(seed, 5);
      Eigen::Vector2d beta(rng.normal(), rng.normal());
      std::map<std::string, double> alpha;
      for (const auto& u : d.units()) alpha[u] = rng.normal();
      const auto score = loglik_and_score(d, s, beta, alpha).second;
      const auto fd = oracle::central_difference(
          [&](const Eigen::VectorXd& b) { return loglik_and_score(d, s, b, alpha).first; }, beta, 1e-5);
      worst = std::max(worst, (score - fd).norm() / fd.norm());
      ++checks;
    }
  }
  return {worst < 1e-5, std::to_string(checks) + " instances, max relative error " + fmt(worst)};
}

Outcome weight_identities() {
  std::vector<std::string> notes;
  bool ok = true;

  auto sim = dgp_preset("confounded-hard");
  sim.n_units = 100;
  sim.n_periods = 30;
  const auto d = generate_panel(sim);
  WeightConfig same;
  same.fe_level = FeLevel::none;
  same.numerator_unit_effects = false;
  same.treatment_lags = 2;
  same.window = 3;
  auto prep = prepare_treatment_panel(d, same);
  auto w = stabilized_weights(prep.data, fit_treatment_models(prep.data, same), same);
  std::size_t not_one = 0, n = 0;
  for (const Value& v : w.raw) {
    if (!v) continue;
    ++n;
    if (*v != 1.0) ++not_one;
  }
  ok = ok && not_one == 0 && n > 0;
  notes.push_back("identical models: " + std::to_string(not_one) + " of " + std::to_string(n) + " weights != 1");

  WeightConfig cfg;
  cfg.covariates = {"X"};
  cfg.window = 3;
  prep = prepare_treatment_panel(d, cfg);
  w = stabilized_weights(prep.data, fit_treatment_models(prep.data, cfg), cfg);
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t r = 0; r < prep.data.n_rows(); ++r) {
    const auto next = prep.data.shifted_row(r, -1);
    const auto old = prep.data.shifted_row(r, cfg.window);
    if (!next || !old || !w.raw[r] || !w.raw[*next]) continue;
    const double lhs = *w.raw[r] * *w.ratio[*next] / *w.ratio[*old];
    worst = std::max(worst, std::abs(lhs - *w.raw[*next]) / *w.raw[*next]);
    ++checked;
  }
  ok = ok && worst < 1e-12 && checked > 0;
  notes.push_back("window recursion max rel err " + fmt(worst) + " over " + std::to_string(checked));

  const auto realism = generate_panel(dgp_preset("realism"));
  const auto pc = fixtures::default_config();
  const auto r = run_estimation(realism, pc);
  const auto stats = weight_stats(r.weights.raw);
  ok = ok && std::abs(stats.mean - 1.0) < 0.05;
  notes.push_back("realism mean raw weight " + fmt(stats.mean) + " (max " + fmt(stats.max) + ")");

  std::string detail;
  for (const auto& s : notes) detail += (detail.empty() ? "" : "; ") + s;
  return {ok, detail};
}

Outcome balance_formulas() {
  const std::vector<double> treated{2, 4}, control{1, 3};
  const double s = smd(treated, control);
  const std::vector<double> equal(5, 2.0), skewed{1, 1, 1, 9};
  const double e1 = ess(std::span<const double>(equal)).percent, e2 = ess(std::span<const double>(skewed)).percent;
  bool ok = std::abs(s - std::sqrt(0.5)) < 1e-9 && std::abs(e1 - 100.0) < 1e-9 &&
            std::abs(e2 - 100.0 * 144.0 / 84.0 / 4.0) < 1e-9;
  std::string detail = "smd " + fmt(s, 10) + ", ess " + fmt(e1, 10) + "% / " + fmt(e2, 10) + "%";

  const auto d = generate_panel(dgp_preset("confounded-hard"));
  const auto cfg = fixtures::effect_config();
  const auto r = run_estimation(d, cfg);
  const auto ps = predict(r.models.denominator, r.data);
  const auto rep = balance_report(r.data, "T", cfg.weights.covariates, r.weights, ps.values);
  for (const auto& row : rep.rows) {
    ok = ok && std::abs(row.smd_weighted_truncated) < 0.1 && std::abs(row.smd_unweighted) > 0.25;
    detail += "; confounded-hard " + row.name + ": unweighted " + fmt(row.smd_unweighted) + ", weighted " +
              fmt(row.smd_weighted_truncated);
  }
  return {ok, detail};
}

Outcome effect_recovery() {
  const auto preset = dgp_preset("confounded-hard");
  const double truth = oracle_truth(preset, {}, 200);
  const auto cfg = fixtures::effect_config();
  const int runs = 20;
  double sum_msm = 0, sum_msm_se = 0, sum_naive = 0, sum_naive_se = 0, slowest = 0;
  int within = 0;
  for (int k = 0; k < runs; ++k) {
    auto c = preset;
    c.seed = 100 + static_cast<std::uint64_t>(k);
    const auto t0 = Clock::now();
    const auto d = generate_panel(c);
    BootstrapOptions opt;
    opt.replicates = 200;
    opt.seed = 500 + static_cast<std::uint64_t>(k);
    const auto inf = estimate_with_inference(d, cfg, opt);
    slowest = std::max(slowest, seconds_since(t0));
    const auto& msm = inf.estimates[0];
    const auto& naive = inf.estimates[1];
    const double est = msm.incremental_effect / 100.0, se = msm.ie_se / 100.0;
    if (std::abs(est - truth) <= 2.0 * se) ++within;
    sum_msm += est;
    sum_msm_se += se;
    sum_naive += naive.incremental_effect / 100.0;
    sum_naive_se += naive.ie_se / 100.0;
  }
  const double bias = sum_msm / runs - truth, se = sum_msm_se / runs;
  const double naive_bias = sum_naive / runs - truth, naive_se = sum_naive_se / runs;
  const bool ok = std::abs(bias) <= 2.0 * se && std::abs(bias) < 0.01 && std::abs(naive_bias) > 2.0 * naive_se &&
                  slowest < 300.0;
  return {ok, "truth " + fmt(truth) + "; MSM mean bias " + fmt(bias) + " (mean SE " + fmt(se) + ", " +
                  std::to_string(within) + "/" + std::to_string(runs) + " runs within 2 SE); naive bias " +
                  fmt(naive_bias) + " (SE " + fmt(naive_se) + "); slowest run " + fmt(slowest, 3) + " s"};
}

Outcome transforms() {
  const double a = percent_change(0.0656), b = percent_change(0.0733);
  const bool ok = std::round(a * 100) / 100 == 6.78 && std::round(b * 100) / 100 == 7.61;
  return {ok, "percent_change(0.0656) = " + fmt(a, 6) + ", percent_change(0.0733) = " + fmt(b, 6)};
}

Outcome khm() {
  const auto d = generate_panel(dgp_preset("confounded-hard"));
  const auto cfg = fixtures::effect_config();
  SweepOptions opt;
  opt.with_bootstrap = false;
  const auto curve = khm_sweep(d, cfg, opt);
  std::size_t zero = 0;
  while (curve.phis[zero] != 0.0) ++zero;
  const bool exact = curve.estimates[zero] == curve.base_estimate;

  opt.engine = KhmEngine::gaussian;
  opt.phis = {-1.0, 0.25, 1.0};
  const auto g = khm_sweep(d, cfg, opt);
  const double s1 = (g.estimates[1] - g.estimates[0]) / (opt.phis[1] - opt.phis[0]);
  const double s2 = (g.estimates[2] - g.estimates[1]) / (opt.phis[2] - opt.phis[1]);
  const double affine = std::abs(s1 - s2);

  const auto base = run_estimation(d, cfg);
  const auto corr = khm_correction(base.data, base.models.denominator, "T");
  const auto y0 = khm_corrected_outcome(base.data, corr, "Y", 0.0);
  const auto ya = khm_corrected_outcome(base.data, corr, "Y", 0.35);
  const auto yb = khm_corrected_outcome(base.data, corr, "Y", -0.8);
  const auto yab = khm_corrected_outcome(base.data, corr, "Y", 0.35 - 0.8);
  double linear = 0.0;
  for (std::size_t r = 0; r < y0.size(); ++r) {
    if (y0[r]) linear = std::max(linear, std::abs(*ya[r] + *yb[r] - *y0[r] - *yab[r]));
  }
  return {exact && affine < 1e-10 && linear < 1e-12,
          std::string("phi=0 ") + (exact ? "bit-exact" : "differs") + "; gaussian slope gap " + fmt(affine) +
              "; row-wise linearity max err " + fmt(linear)};
}

Outcome petersen_case(const std::string& preset, bool expect_flag) {
  const auto t0 = Clock::now();
  const auto d = generate_panel(dgp_preset(preset));
  const auto cfg = fixtures::default_config();
  BootstrapOptions bo;
  bo.replicates = 200;
  bo.seed = 41;
  const auto inf = estimate_with_inference(d, cfg, bo);
  const auto& ref = inf.estimates[0];
  PetersenOptions po;
  po.replicates = 200;
  po.seed = 42;
  const auto p = petersen_bootstrap(d, cfg, ref.se, ref.ci_low, ref.ci_high, po);
  const double secs = seconds_since(t0);
  const bool ok = expect_flag ? p.flag : (!p.flag && std::abs(p.bias) < 0.5 * ref.se);
  return {ok && secs < 180.0, preset + ": bias " + fmt(p.bias) + ", SE " + fmt(ref.se) + ", |bias|/SE " +
                                  fmt(std::abs(p.bias) / ref.se) + ", flag " + (p.flag ? "true" : "false") + ", " +
                                  fmt(secs, 3) + " s"};
}

Outcome petersen() {
  const auto good = petersen_case("realism", false);
  const auto bad = petersen_case("positivity", true);
  return {good.pass && bad.pass, good.detail + "; " + bad.detail};
}

Outcome bootstrap_determinism() {
  auto c = dgp_preset("confounded-hard");
  c.n_units = 120;
  c.n_periods = 20;
  const auto d = generate_panel(c);
  const auto cfg = fixtures::effect_config();
  auto serialize = [&](int threads) {
    BootstrapOptions opt;
    opt.replicates = 50;
    opt.seed = 8;
    opt.threads = threads;
    const auto b = pairs_cluster_bootstrap(pipeline_estimator(cfg), d, opt);
    std::string s;
    for (const auto& r : b.replicates) {
      s.append(reinterpret_cast<const char*>(r.data()), r.size() * sizeof(double));
    }
    return s;
  };
  const auto a = serialize(1), b = serialize(1), t = serialize(4);
  return {a == b && a == t, "replicate bytes " + std::string(a == b ? "identical" : "differ") + " across reruns, " +
                                (a == t ? "identical" : "differ") + " across 1 vs 4 threads"};
}

Outcome bootstrap_coverage() {
  const int sims = 200;
  auto cfg = fixtures::effect_config();
  cfg.outcomes.resize(1);
  cfg.outcomes[0].family = Family::gaussian;
  int covered = 0;
  const auto t0 = Clock::now();
  for (int k = 0; k < sims; ++k) {
    auto c = dgp_preset("linear");
    c.seed = 7000 + static_cast<std::uint64_t>(k);
    const auto d = generate_panel(c);
    BootstrapOptions opt;
    opt.replicates = 200;
    opt.seed = 9000 + static_cast<std::uint64_t>(k);
    const auto inf = estimate_with_inference(d, cfg, opt);
    const auto& e = inf.estimates[0];
    if (e.ci_low <= c.c_t[0] && c.c_t[0] <= e.ci_high) ++covered;
  }
  const double rate = static_cast<double>(covered) / sims;
  return {rate >= 0.90, std::to_string(covered) + "/" + std::to_string(sims) + " percentile CIs cover the truth (" +
                            fmt(100 * rate, 3) + "%), " + fmt(seconds_since(t0), 3) + " s"};
}

// Simulates with the CLI, runs every stage twice and compares artifacts.
Outcome end_to_end_case(const std::string& preset, double truth, std::uint64_t seed) {
  const fs::path dir = fs::temp_directory_path() / ("msmfe_acceptance_" + preset);
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ifstream src(MSMFE_DEMO_CONFIG);
  auto j = nlohmann::json::parse(src);
  j["input"] = "panel.csv";
  j["sensitivity"]["petersen_replicates"] = 50;
  std::ofstream(dir / "config.json") << j.dump(2);
  const std::string cli = MSMFE_CLI;
  auto sh = [](const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); };
  if (sh(cli + " simulate --preset " + preset + " --seed " + std::to_string(seed) + " --out " +
         (dir / "panel.csv").string()) != 0) {
    return {false, preset + ": simulate failed"};
  }
  for (const char* out : {"a", "b"}) {
    if (sh(cli + " all --config " + (dir / "config.json").string() + " --output " + (dir / out).string()) != 0) {
      return {false, preset + ": all failed"};
    }
  }
  bool same = true;
  for (const char* f : {"results.csv", "results.full.csv", "weights.full.csv", "balance.full.csv",
                        "sensitivity.full.csv", "positivity.txt"}) {
    same = same && slurp(dir / "a" / f) == slurp(dir / "b" / f);
  }
  const auto t = read_table(dir / "a" / "results.full.csv");
  const auto& row = t.rows.at(0);
  auto col = [&](const char* name) { return std::stod(row.at(*t.find(name))); };
  const double lo = col("effect_ci_low") / 100.0, hi = col("effect_ci_high") / 100.0;
  const bool covers = lo <= truth && truth <= hi;
  return {covers && same && row[0] == "primary",
          preset + ": effect CI [" + fmt(lo) + ", " + fmt(hi) + "] vs truth " + fmt(truth) +
              (same ? ", reruns byte-identical" : ", reruns differ")};
}

Outcome end_to_end() {
  const std::uint64_t seed = 2024;
  const auto null = end_to_end_case("null", 0.0, seed);
  auto hard = dgp_preset("confounded-hard");
  hard.seed = seed;
  const auto confounded = end_to_end_case("confounded-hard", oracle_truth(hard, {}, 200), seed);
  return {null.pass && confounded.pass, null.detail + "; " + confounded.detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string filter = argc > 1 ? argv[1] : "";
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"fe-glm-oracle", fe_oracle},
      {"gradient-check", gradient_check},
      {"weight-identities", weight_identities},
      {"balance-formulas", balance_formulas},
      {"effect-recovery", effect_recovery},
      {"transform-arithmetic", transforms},
      {"khm-sweep", khm},
      {"petersen-diagnostic", petersen},
      {"bootstrap-determinism", bootstrap_determinism},
      {"bootstrap-coverage", bootstrap_coverage},
      {"end-to-end", end_to_end},
  };
  int failed = 0, ran = 0;
  for (const auto& [name, run] : criteria) {
    if (!filter.empty() && name.find(filter) == std::string::npos) continue;
    ++ran;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << " (" << fmt(seconds_since(t0), 3) << " s): " << o.detail
              << std::endl;
  }
  if (ran == 0) {
    std::cerr << "no criterion matches '" << filter << "'\n";
    return 2;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
