#pragma once

// Weighted marginal structural outcome models, effect transforms and the
// two-way fixed effects baseline.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msmfe/core.hpp"
#include "msmfe/glm.hpp"
#include "msmfe/panel.hpp"

namespace msmfe {

inline constexpr const char* kMsmWeightColumn = "msm_weight";

struct OutcomeSpec {
  std::string name;
  std::string outcome;
  std::vector<std::string> treatment_terms;
  Family family = Family::logistic;
  int horizon = 0;  // outcome measured at j + horizon, treatment at j
  bool weighted = true;
  bool future_aligned_weights = false;  // take the weight from row j + horizon
  std::string focal_term;               // defaults to the first treatment term

  std::string outcome_column() const {
    return horizon == 0 ? outcome : lag_name(outcome, -horizon);
  }
  const std::string& focal() const {
    if (!focal_term.empty()) return focal_term;
    if (treatment_terms.empty()) throw ValidationError("outcome spec '" + name + "' has no treatment terms");
    return treatment_terms.front();
  }
};

struct EffectEstimate {
  std::string spec;
  std::string term;
  Family family = Family::logistic;
  double coefficient = 0.0;
  double incremental_effect = 0.0;  // percentage points (logistic) or percent change (gaussian)
  double se = 0.0, ci_low = 0.0, ci_high = 0.0;
  double ci_low_normal = 0.0, ci_high_normal = 0.0;
  double p_value = 1.0;
  double ie_se = 0.0, ie_ci_low = 0.0, ie_ci_high = 0.0;
  std::size_t n_obs = 0;
  std::size_t n_units = 0;
  double ess_percent = 0.0;
};

inline void check_treatment_terms(const PanelDataset& d, const std::vector<std::string>& terms) {
  for (const auto& t : terms) {
    const Column& c = d.column(t);
    for (std::size_t r = 0; r < c.values.size(); ++r) {
      const Value& v = c.values[r];
      if (v && (*v < 0.0 || *v != std::floor(*v))) {
        throw ValidationError("treatment term '" + t + "' must be binary or a count; found " +
                              std::to_string(*v) + " at unit " + d.unit_name(r) + ", time " +
                              std::to_string(d.time(r)));
      }
    }
  }
}

// Weighted GLM with an intercept and the treatment terms only. Rows with a
// missing weight are outside the pseudo-population and are skipped.
inline FitResult fit_msm(const PanelDataset& d, const OutcomeSpec& spec,
                         const std::vector<Value>& weights, bool fractional = false) {
  if (weights.size() != d.n_rows()) {
    throw ValidationError("MSM weights have " + std::to_string(weights.size()) +
                          " entries for a panel of " + std::to_string(d.n_rows()) + " rows");
  }
  check_treatment_terms(d, spec.treatment_terms);
  ModelSpec m;
  m.response = spec.outcome_column();
  m.terms = spec.treatment_terms;
  m.family = spec.family;
  m.fractional = fractional;
  m.obs_weights = kMsmWeightColumn;
  return fit(d.with_column(kMsmWeightColumn, Column{weights, false}), m);
}

// Average change in predicted probability, in percentage points, when the
// focal term moves from 0 to 1 (binary) or by one unit (count), averaged
// over the estimation rows with the MSM weights.
inline double incremental_effect(const FitResult& f, const PanelDataset& d,
                                 const std::vector<Value>& weights, const std::string& focal) {
  if (f.spec.family != Family::logistic) {
    throw ValidationError("incremental effects are defined for logistic fits; use percent_change");
  }
  if (weights.size() != d.n_rows() || f.fitted.size() != d.n_rows()) {
    throw ValidationError("fit, weights and panel are not aligned");
  }
  std::size_t focal_idx = f.spec.terms.size();
  for (std::size_t k = 0; k < f.spec.terms.size(); ++k) {
    if (f.spec.terms[k] == focal) focal_idx = k;
  }
  if (focal_idx == f.spec.terms.size()) throw ValidationError("term '" + focal + "' not in model");
  const Column& fc = d.column(focal);
  bool binary = true;
  for (const Value& v : fc.values) {
    if (v && !is_binary_value(*v)) binary = false;
  }
  const double beta = f.coefficients[static_cast<Eigen::Index>(focal_idx)];
  std::vector<detail::ColumnRef> terms;
  for (const auto& t : f.spec.terms) terms.emplace_back(d, t);
  double num = 0.0, den = 0.0;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (!f.fitted[r] || !weights[r]) continue;
    double rest = f.intercept;
    for (std::size_t k = 0; k < terms.size(); ++k) {
      if (k != focal_idx) rest += f.coefficients[static_cast<Eigen::Index>(k)] * *terms[k][r];
    }
    const double lo = binary ? 0.0 : *fc.values[r];
    const double diff = expit(rest + beta * (lo + 1.0)) - expit(rest + beta * lo);
    num += *weights[r] * diff;
    den += *weights[r];
  }
  if (!(den > 0.0)) throw ValidationError("no weighted rows for the incremental effect");
  return 100.0 * num / den;
}

inline double percent_change(double coefficient) { return 100.0 * (std::exp(coefficient) - 1.0); }

inline double percent_change(const FitResult& f, const std::string& term) {
  if (f.spec.family != Family::gaussian) {
    throw ValidationError("percent change applies to gaussian fits on a log outcome");
  }
  return percent_change(f.coefficient(term));
}

struct WindowEffect {
  double sum = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  double se = 0.0;
};

// Sums per-horizon effects. replicates[b][h] holds the effect of horizon h in
// bootstrap replicate b; the interval comes from the replicate-wise sums.
inline WindowEffect window_cumulative_effect(const std::vector<double>& per_horizon,
                                             const std::vector<std::vector<double>>& replicates,
                                             std::size_t expected_horizons = 5) {
  if (per_horizon.size() != expected_horizons) {
    throw ValidationError("window effect needs " + std::to_string(expected_horizons) +
                          " horizons, got " + std::to_string(per_horizon.size()));
  }
  WindowEffect w;
  for (double e : per_horizon) w.sum += e;
  if (replicates.empty()) {
    w.ci_low = w.ci_high = w.sum;
    return w;
  }
  std::vector<double> sums;
  for (const auto& rep : replicates) {
    if (rep.size() != expected_horizons) throw ValidationError("replicate is missing a horizon");
    double s = 0.0;
    for (double e : rep) s += e;
    sums.push_back(s);
  }
  w.se = sums.size() > 1 ? sample_sd(sums) : 0.0;
  w.ci_low = quantile(sums, 0.025);
  w.ci_high = quantile(sums, 0.975);
  return w;
}

struct TwfeResult {
  std::vector<std::string> terms;
  Eigen::VectorXd coefficients;
  std::size_t n_obs = 0;
  bool time_effects = false;

  double coefficient(const std::string& term) const {
    for (std::size_t k = 0; k < terms.size(); ++k) {
      if (terms[k] == term) return coefficients[static_cast<Eigen::Index>(k)];
    }
    throw ValidationError("term '" + term + "' not in model");
  }
};

namespace detail {

// Sweeps out unit means and, optionally, time means until the columns stop
// changing. A balanced panel converges after one sweep.
inline void within_transform(Eigen::MatrixXd& M, const std::vector<int>& unit, int n_units,
                             const std::vector<int>& period, int n_periods, bool time_effects) {
  auto sweep = [&](const std::vector<int>& g, int n) {
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n, M.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
      sums.row(g[static_cast<std::size_t>(i)]) += M.row(i);
      counts[g[static_cast<std::size_t>(i)]] += 1.0;
    }
    double change = 0.0;
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
      const int k = g[static_cast<std::size_t>(i)];
      const Eigen::RowVectorXd m = sums.row(k) / counts[k];
      M.row(i) -= m;
      change = std::max(change, m.cwiseAbs().maxCoeff());
    }
    return change;
  };
  const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
  sweep(unit, n_units);
  if (!time_effects) return;
  for (int it = 0; it < 10000; ++it) {
    const double c = std::max(sweep(period, n_periods), sweep(unit, n_units));
    if (c < 1e-14 * scale) return;
  }
  throw ConvergenceError("two-way demeaning did not converge");
}

}  // namespace detail

// OLS on within-transformed data: unit demeaning, or unit and time demeaning.
inline TwfeResult twfe_fit(const PanelDataset& d, const std::string& outcome,
                           const std::vector<std::string>& terms, bool time_effects) {
  if (terms.empty()) throw ValidationError("TWFE needs at least one term");
  detail::ColumnRef y(d, outcome);
  std::vector<detail::ColumnRef> xs;
  for (const auto& t : terms) xs.emplace_back(d, t);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    bool ok = y[r].has_value();
    for (const auto& x : xs) ok = ok && x[r].has_value();
    if (ok) rows.push_back(r);
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto p = static_cast<Eigen::Index>(terms.size());
  if (n <= p) throw ValidationError("TWFE has too few complete rows");
  Eigen::MatrixXd M(n, p + 1);
  std::vector<int> unit(rows.size()), period(rows.size());
  std::map<int, int> period_index;
  std::map<int, int> unit_index;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t r = rows[static_cast<std::size_t>(i)];
    M(i, 0) = *y[r];
    for (Eigen::Index k = 0; k < p; ++k) M(i, k + 1) = *xs[static_cast<std::size_t>(k)][r];
    unit[static_cast<std::size_t>(i)] =
        unit_index.try_emplace(d.unit_index(r), static_cast<int>(unit_index.size())).first->second;
    period[static_cast<std::size_t>(i)] =
        period_index.try_emplace(d.time(r), static_cast<int>(period_index.size())).first->second;
  }
  const Eigen::VectorXd raw_norm = M.rightCols(p).colwise().norm().transpose();
  detail::within_transform(M, unit, static_cast<int>(unit_index.size()), period,
                           static_cast<int>(period_index.size()), time_effects);
  const Eigen::MatrixXd X = M.rightCols(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    if (X.col(k).norm() <= 1e-10 * std::max(1.0, raw_norm[k])) {
      throw CollinearityError("term '" + terms[static_cast<std::size_t>(k)] +
                              "' is absorbed by the fixed effects");
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) throw CollinearityError("TWFE terms are collinear after demeaning");
  TwfeResult res;
  res.terms = terms;
  res.coefficients = qr.solve(M.col(0));
  res.n_obs = rows.size();
  res.time_effects = time_effects;
  return res;
}

}  // namespace msmfe
