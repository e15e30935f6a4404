#pragma once

// Synthetic panels with unit heterogeneity and treatment-confounder feedback,
// and a Monte Carlo oracle for the causal contrasts they imply.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "msmfe/core.hpp"
#include "msmfe/glm.hpp"
#include "msmfe/panel.hpp"

namespace msmfe {

struct DgpConfig {
  int n_units = 200;
  int n_periods = 40;
  int burn_in = 20;
  double alpha_sd = 0.5;  // spread of the unit effect in treatment
  double alpha_x = 0.5;   // loading of the unit effect in X
  double rho = 0.5;
  double gamma = 0.0;  // feedback of T_{j-1} into X_j
  double x_noise_sd = 1.0;
  double a0 = 0.0, a_lag = 0.0, b_x = 0.0;
  // Treatment logit gets stratum_shift added wherever X > stratum_threshold.
  double stratum_threshold = std::numeric_limits<double>::infinity();
  double stratum_shift = 0.0;
  double c0 = 0.0;
  std::vector<double> c_t{0.0};  // c_t[m] multiplies T_{j-m}
  double c_x = 0.0;
  double c_alpha = 0.0;
  Family family = Family::logistic;
  double sigma_y = 1.0;
  int n_groups = 10;
  double count_extra = 0.5;  // treated periods carry 1 + Poisson(count_extra) events
  double spillover = 0.0;    // placeholder; must stay 0
  int window = 4;            // history the estimators need: window + lags + 1 periods
  int lags = 3;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_units < 2) throw ValidationError("need at least two units");
    if (!(std::abs(rho) < 1.0)) throw ValidationError("|rho| must be below 1");
    if (n_periods < window + lags + 1) {
      throw ValidationError("n_periods must be at least window + lags + 1");
    }
    if (burn_in < 0) throw ValidationError("burn_in must be nonnegative");
    if (c_t.empty()) throw ValidationError("c_t needs at least one entry");
    if (alpha_sd < 0 || x_noise_sd < 0 || sigma_y < 0) throw ValidationError("negative spread");
    if (n_groups < 1) throw ValidationError("n_groups must be positive");
    if (spillover != 0.0) throw ValidationError("spillover simulation is not supported");
  }
};

inline DgpConfig dgp_preset(const std::string& name) {
  DgpConfig c;
  if (name == "null" || name == "confounded-hard") {
    c.n_units = 500;
    c.n_periods = 60;
    c.alpha_sd = 0.4;
    c.alpha_x = 0.4;
    c.rho = 0.5;
    c.gamma = 0.4;
    c.a0 = -0.5;
    c.b_x = 0.25;
    c.c0 = -0.5;
    c.c_t = {name == "null" ? 0.0 : -0.6};
    c.c_x = 0.8;
    c.c_alpha = 0.5;
    if (name == "null") {
      c.n_units = 300;
      c.n_periods = 40;
    }
  } else if (name == "realism") {
    c.n_units = 346;
    c.n_periods = 65;
    c.alpha_sd = 0.4;
    c.alpha_x = 0.3;
    c.rho = 0.7;
    c.gamma = 0.3;
    c.a0 = -2.3;
    c.a_lag = 0.6;
    c.b_x = 0.3;
    c.c0 = -2.0;
    c.c_t = {-0.12};
    c.c_x = 0.3;
    c.c_alpha = 0.3;
  } else if (name == "positivity") {
    c.n_units = 300;
    c.n_periods = 40;
    c.alpha_sd = 0.5;
    c.rho = 0.6;
    c.gamma = 0.3;
    c.a0 = -0.5;
    c.b_x = 0.5;
    c.stratum_threshold = 0.8;
    c.stratum_shift = 7.0;
    c.c0 = -0.5;
    c.c_t = {-0.6};
    c.c_x = 1.5;
  } else if (name == "linear") {
    c.n_units = 100;
    c.n_periods = 20;
    c.family = Family::gaussian;
    c.alpha_x = 0.0;
    c.c_t = {0.5};
    c.c_x = 0.5;
    c.sigma_y = 1.0;
  } else {
    throw ValidationError("unknown preset '" + name +
                          "' (known: null, confounded-hard, realism, positivity, linear)");
  }
  return c;
}

namespace detail {

inline double treatment_logit(const DgpConfig& c, double t_prev, double x, double alpha) {
  double eta = c.a0 + c.a_lag * t_prev + c.b_x * x + alpha;
  if (x > c.stratum_threshold) eta += c.stratum_shift;
  return eta;
}

// Outcome linear predictor at period j given the treatment path; t[j - m]
// is read for each c_t position.
inline double outcome_eta(const DgpConfig& c, const std::vector<double>& t, std::size_t j, double x,
                          double alpha) {
  double eta = c.c0 + c.c_x * x + c.c_alpha * alpha;
  for (std::size_t m = 0; m < c.c_t.size(); ++m) eta += c.c_t[m] * t[j - m];
  return eta;
}

// Random inputs for one unit path; arms of the oracle share them.
struct PathNoise {
  double alpha = 0.0;
  std::vector<double> zx, ut, ey;
};

inline PathNoise draw_noise(const DgpConfig& c, Rng& rng, std::size_t steps) {
  PathNoise n;
  n.alpha = c.alpha_sd * rng.normal();
  n.zx.resize(steps);
  n.ut.resize(steps);
  n.ey.resize(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    n.zx[s] = rng.normal();
    n.ut[s] = rng.uniform();
    n.ey[s] = c.family == Family::logistic ? rng.uniform() : rng.normal();
  }
  return n;
}

struct Path {
  std::vector<double> x, t;
};

// Natural course. Step 0 starts X at its stationary mean given alpha.
inline Path natural_path(const DgpConfig& c, const PathNoise& n) {
  const std::size_t steps = n.zx.size();
  Path p;
  p.x.resize(steps);
  p.t.resize(steps);
  const double x0 = c.alpha_x * n.alpha / (1.0 - c.rho);
  double x_prev = x0, t_prev = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    const double x = c.rho * x_prev + c.gamma * t_prev + c.alpha_x * n.alpha + c.x_noise_sd * n.zx[s];
    const double t = n.ut[s] < expit(treatment_logit(c, t_prev, x, n.alpha)) ? 1.0 : 0.0;
    p.x[s] = x;
    p.t[s] = t;
    x_prev = x;
    t_prev = t;
  }
  return p;
}

inline std::size_t history_pad(const DgpConfig& c) { return c.c_t.size(); }

}  // namespace detail

// Columns: T (binary), T_count, X, Y, group (numeric group id 1..n_groups).
// Unit u draws from Rng(seed, u), so units can be generated in any order.
inline PanelDataset generate_panel(const DgpConfig& cfg) {
  cfg.validate();
  const std::size_t pad = detail::history_pad(cfg);
  const std::size_t steps = pad + static_cast<std::size_t>(cfg.burn_in + cfg.n_periods);
  const std::size_t first = pad + static_cast<std::size_t>(cfg.burn_in);
  std::vector<std::string> units;
  std::vector<int> times;
  Column t{{}, true}, count, x, y{{}, cfg.family == Family::logistic}, group;
  for (int u = 0; u < cfg.n_units; ++u) {
    Rng rng(cfg.seed, static_cast<std::uint64_t>(u));
    const auto noise = detail::draw_noise(cfg, rng, steps);
    const auto path = detail::natural_path(cfg, noise);
    const std::string name = "u" + std::to_string(u + 1);
    for (std::size_t s = first; s < steps; ++s) {
      units.push_back(name);
      times.push_back(static_cast<int>(s - first) + 1);
      t.values.push_back(path.t[s]);
      count.values.push_back(path.t[s] == 1.0 ? 1.0 + rng.poisson(cfg.count_extra) : 0.0);
      x.values.push_back(path.x[s]);
      const double eta = detail::outcome_eta(cfg, path.t, s, path.x[s], noise.alpha);
      if (cfg.family == Family::logistic) {
        y.values.push_back(noise.ey[s] < expit(eta) ? 1.0 : 0.0);
      } else {
        y.values.push_back(eta + cfg.sigma_y * noise.ey[s]);
      }
      group.values.push_back(static_cast<double>(u % cfg.n_groups + 1));
    }
  }
  return PanelDataset::from_long(units, times,
                                 {{"T", t}, {"T_count", count}, {"X", x}, {"Y", y}, {"group", group}});
}

enum class EffectScale { difference, percent_change };

struct EffectTarget {
  enum class Kind { point, window };
  Kind kind = Kind::point;
  int lag = 0;     // point: contrast T_{j-lag} = 1 vs 0, later treatments natural
  int length = 1;  // window: T_{j-length+1..j} all 1 vs all 0
  EffectScale scale = EffectScale::difference;
};

// Average over units and periods of E[Y_j | forced arm 1] - E[Y_j | forced
// arm 0], on the probability (logistic) or mean (gaussian) scale. Arms share
// random numbers, and expected outcomes replace outcome draws.
inline double oracle_truth(const DgpConfig& cfg, const EffectTarget& target, int mc_draws) {
  cfg.validate();
  if (mc_draws < 1) throw ValidationError("oracle needs at least one draw");
  if (target.kind == EffectTarget::Kind::point && target.lag < 0) {
    throw ValidationError("point contrast lag must be nonnegative");
  }
  if (target.kind == EffectTarget::Kind::window && target.length < 1) {
    throw ValidationError("window contrast length must be positive");
  }
  if (target.scale == EffectScale::percent_change && cfg.family != Family::gaussian) {
    throw ValidationError("percent-change truth needs a gaussian (log) outcome");
  }
  const std::size_t span = target.kind == EffectTarget::Kind::point
                               ? static_cast<std::size_t>(target.lag)
                               : static_cast<std::size_t>(target.length - 1);
  const std::size_t pad = std::max(detail::history_pad(cfg), span + 1);
  const std::size_t steps = pad + static_cast<std::size_t>(cfg.burn_in + cfg.n_periods);
  const std::size_t first = pad + static_cast<std::size_t>(cfg.burn_in);
  double total = 0.0;
  std::size_t count = 0;
  for (int draw = 0; draw < mc_draws; ++draw) {
    Rng rng(cfg.seed ^ 0x6f7261636c65ULL, static_cast<std::uint64_t>(draw));
    const auto noise = detail::draw_noise(cfg, rng, steps);
    const auto nat = detail::natural_path(cfg, noise);
    for (std::size_t j = first; j < steps; ++j) {
      const std::size_t s0 = j - span;
      double mean[2];
      for (int arm = 0; arm < 2; ++arm) {
        std::vector<double> t = nat.t;
        double x = nat.x[s0];
        for (std::size_t s = s0; s <= j; ++s) {
          if (s > s0) {
            x = cfg.rho * x + cfg.gamma * t[s - 1] + cfg.alpha_x * noise.alpha +
                cfg.x_noise_sd * noise.zx[s];
          }
          const bool forced = target.kind == EffectTarget::Kind::window || s == s0;
          if (forced) {
            t[s] = arm;
          } else {
            t[s] = noise.ut[s] < expit(detail::treatment_logit(cfg, t[s - 1], x, noise.alpha)) ? 1.0 : 0.0;
          }
        }
        mean[arm] = detail::mean_fn(cfg.family, detail::outcome_eta(cfg, t, j, x, noise.alpha));
      }
      total += mean[1] - mean[0];
      ++count;
    }
  }
  const double diff = total / static_cast<double>(count);
  return target.scale == EffectScale::percent_change ? 100.0 * (std::exp(diff) - 1.0) : diff;
}

}  // namespace msmfe
