#pragma once

// Stabilized, windowed inverse-probability-of-treatment weights built from a
// numerator (baseline) and a denominator (confounder-adjusted) treatment model.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "msmfe/core.hpp"
#include "msmfe/glm.hpp"
#include "msmfe/panel.hpp"

namespace msmfe {

enum class FeLevel { unit, group, none };

inline const char* to_string(FeLevel f) {
  switch (f) {
    case FeLevel::unit: return "unit";
    case FeLevel::group: return "group";
    default: return "none";
  }
}

inline constexpr const char* kTimeSquared = "time_sq";
inline constexpr double kProbabilityFloor = 1e-12;

struct WeightConfig {
  std::string treatment = "T";
  std::vector<std::string> covariates;  // time-varying confounders, denominator only
  int window = 4;                       // product runs over s = j - window .. j
  double lower_pct = 1.0;
  double upper_pct = 99.0;
  FeLevel fe_level = FeLevel::unit;
  std::string group_col;  // grouping column when fe_level == group
  int treatment_lags = 3;
  std::optional<int> numerator_lags;  // defaults to treatment_lags
  bool numerator_unit_effects = true;
  bool time_trend = true;
  bool stabilized = true;  // false puts 1 in every numerator (debug only)

  int num_lags() const { return numerator_lags.value_or(treatment_lags); }

  void validate() const {
    if (!(0.0 <= lower_pct && lower_pct < upper_pct && upper_pct <= 100.0)) {
      throw ValidationError("truncation percentiles must satisfy 0 <= lower < upper <= 100");
    }
    if (window < 0) throw ValidationError("weight window must be nonnegative");
    if (treatment_lags < 0 || num_lags() < 0) throw ValidationError("lag counts must be nonnegative");
    if (fe_level == FeLevel::group && group_col.empty()) {
      throw ValidationError("group-level fixed effects need a grouping column");
    }
  }

  static WeightConfig aggressive() {
    WeightConfig c;
    c.lower_pct = 5.0;
    c.upper_pct = 95.0;
    return c;
  }
};

struct TreatmentModels {
  std::optional<FitResult> numerator;  // absent for unstabilized weights
  FitResult denominator;
};

struct WeightProvenance {
  int window = 0;
  double lower_pct = 0.0, upper_pct = 100.0;
  double lower_quantile = 0.0, upper_quantile = 0.0;
  double pct_clamped_low = 0.0, pct_clamped_high = 0.0;
  FeLevel fe_level = FeLevel::unit;
};

struct WeightSeries {
  std::vector<Value> ratio;  // per-row num/den for the observed treatment
  std::vector<Value> raw;
  std::vector<Value> truncated;
  WeightProvenance provenance;
};

inline std::vector<std::string> treatment_lag_names(const WeightConfig& cfg, int lags) {
  std::vector<std::string> out;
  for (int l = 1; l <= lags; ++l) out.push_back(lag_name(cfg.treatment, l));
  return out;
}

// Adds treatment lags and time-trend columns, then keeps complete cases for
// every treatment-model column.
inline FilterResult prepare_treatment_panel(const PanelDataset& raw, const WeightConfig& cfg) {
  cfg.validate();
  PanelDataset d = raw;
  const int lags = std::max(cfg.treatment_lags, cfg.num_lags());
  for (int l = 1; l <= lags; ++l) {
    if (!d.has_column(lag_name(cfg.treatment, l))) d = build_lag(d, cfg.treatment, l);
  }
  if (cfg.time_trend && !d.has_column(kTimeSquared)) {
    Column sq;
    sq.values.resize(d.n_rows());
    for (std::size_t r = 0; r < d.n_rows(); ++r) {
      const double t = d.time(r);
      sq.values[r] = t * t;
    }
    d = d.with_column(kTimeSquared, std::move(sq));
  }
  std::vector<std::string> needed{cfg.treatment};
  for (const auto& n : treatment_lag_names(cfg, lags)) needed.push_back(n);
  for (const auto& c : cfg.covariates) needed.push_back(c);
  if (cfg.fe_level == FeLevel::group) needed.push_back(cfg.group_col);
  return complete_case_filter(d, needed);
}

inline ModelSpec numerator_spec(const WeightConfig& cfg) {
  ModelSpec s;
  s.response = cfg.treatment;
  s.terms = treatment_lag_names(cfg, cfg.num_lags());
  if (cfg.time_trend) {
    s.terms.push_back(kTimeColumn);
    s.terms.push_back(kTimeSquared);
  }
  if (cfg.numerator_unit_effects) s.fe_group = std::string(kUnitColumn);
  return s;
}

inline ModelSpec denominator_spec(const WeightConfig& cfg) {
  ModelSpec s;
  s.response = cfg.treatment;
  s.terms = treatment_lag_names(cfg, cfg.treatment_lags);
  for (const auto& c : cfg.covariates) s.terms.push_back(c);
  if (cfg.time_trend) {
    s.terms.push_back(kTimeColumn);
    s.terms.push_back(kTimeSquared);
  }
  if (cfg.fe_level == FeLevel::unit) s.fe_group = std::string(kUnitColumn);
  if (cfg.fe_level == FeLevel::group) s.fe_group = cfg.group_col;
  return s;
}

inline TreatmentModels fit_treatment_models(const PanelDataset& d, const WeightConfig& cfg) {
  cfg.validate();
  TreatmentModels m{std::nullopt, fit(d, denominator_spec(cfg))};
  if (cfg.stabilized) m.numerator = fit(d, numerator_spec(cfg));
  return m;
}

// Probability of the treatment actually observed in each row.
inline std::vector<Value> observed_treatment_probability(const FitResult& model,
                                                         const PanelDataset& d,
                                                         const std::string& treatment,
                                                         bool check_positivity) {
  const Prediction pred = predict(model, d);
  const Column& t = d.column(treatment);
  std::vector<Value> out(d.n_rows());
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (!pred.values[r] || !t.values[r]) continue;
    const double p = *pred.values[r];
    if (check_positivity && (p <= 0.0 || p >= 1.0)) {
      throw PositivityError("denominator probability is exactly " + std::to_string(p) +
                            " at unit " + d.unit_name(r) + ", time " + std::to_string(d.time(r)));
    }
    const double pc = std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
    out[r] = *t.values[r] == 1.0 ? pc : 1.0 - pc;
  }
  return out;
}

// Product of per-row ratios over s = j - window .. j; missing if any term is.
inline std::vector<Value> window_product(const PanelDataset& d, const std::vector<Value>& ratio,
                                         int window) {
  if (ratio.size() != d.n_rows()) throw ValidationError("ratios are not aligned to the panel");
  std::vector<Value> out(d.n_rows());
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    double prod = 1.0;
    bool ok = true;
    for (int m = 0; m <= window; ++m) {
      const auto s = m == 0 ? std::optional<std::size_t>(r) : d.shifted_row(r, m);
      if (!s || !ratio[*s]) {
        ok = false;
        break;
      }
      prod *= *ratio[*s];
    }
    if (ok) out[r] = prod;
  }
  return out;
}

inline WeightSeries stabilized_weights(const PanelDataset& d, const TreatmentModels& models,
                                       const WeightConfig& cfg) {
  WeightSeries w;
  const auto den = observed_treatment_probability(models.denominator, d, cfg.treatment, true);
  std::vector<Value> num;
  if (models.numerator) {
    num = observed_treatment_probability(*models.numerator, d, cfg.treatment, false);
  } else {
    num.assign(d.n_rows(), 1.0);
  }
  w.ratio.assign(d.n_rows(), std::nullopt);
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (num[r] && den[r]) w.ratio[r] = *num[r] / *den[r];
  }
  w.raw = window_product(d, w.ratio, cfg.window);
  w.truncated = w.raw;
  w.provenance.window = cfg.window;
  w.provenance.fe_level = cfg.fe_level;
  w.provenance.lower_pct = 0.0;
  w.provenance.upper_pct = 100.0;
  return w;
}

// Winsorizes raw weights at pooled percentiles (linear interpolation).
inline WeightSeries truncate_weights(const WeightSeries& in, const WeightConfig& cfg) {
  cfg.validate();
  WeightSeries w = in;
  std::vector<double> pooled;
  for (const Value& v : w.raw) {
    if (v) pooled.push_back(*v);
  }
  w.provenance.lower_pct = cfg.lower_pct;
  w.provenance.upper_pct = cfg.upper_pct;
  w.truncated.assign(w.raw.size(), std::nullopt);
  if (pooled.empty()) return w;
  std::sort(pooled.begin(), pooled.end());
  const double lo = quantile_sorted(pooled, cfg.lower_pct / 100.0);
  const double hi = quantile_sorted(pooled, cfg.upper_pct / 100.0);
  std::size_t n_lo = 0, n_hi = 0;
  for (std::size_t r = 0; r < w.raw.size(); ++r) {
    if (!w.raw[r]) continue;
    double v = *w.raw[r];
    if (v < lo) {
      v = lo;
      ++n_lo;
    } else if (v > hi) {
      v = hi;
      ++n_hi;
    }
    w.truncated[r] = v;
  }
  w.provenance.lower_quantile = lo;
  w.provenance.upper_quantile = hi;
  w.provenance.pct_clamped_low = 100.0 * static_cast<double>(n_lo) / static_cast<double>(pooled.size());
  w.provenance.pct_clamped_high = 100.0 * static_cast<double>(n_hi) / static_cast<double>(pooled.size());
  return w;
}

// Scales weights to sum to one within the treated and within the control rows.
inline std::vector<Value> normalize_weights(const std::vector<Value>& w, const PanelDataset& d,
                                            const std::string& treatment) {
  if (w.size() != d.n_rows()) throw ValidationError("weights are not aligned to the panel");
  const Column& t = d.column(treatment);
  double sum[2] = {0.0, 0.0};
  std::size_t count[2] = {0, 0};
  for (std::size_t r = 0; r < w.size(); ++r) {
    if (!w[r] || !t.values[r]) continue;
    const int g = *t.values[r] == 1.0 ? 1 : 0;
    sum[g] += *w[r];
    ++count[g];
  }
  if (count[0] == 0 || count[1] == 0) {
    throw ValidationError(std::string("cannot normalize weights: no ") +
                          (count[1] == 0 ? "treated" : "control") + " rows");
  }
  std::vector<Value> out(w.size());
  for (std::size_t r = 0; r < w.size(); ++r) {
    if (!w[r] || !t.values[r]) continue;
    out[r] = *w[r] / sum[*t.values[r] == 1.0 ? 1 : 0];
  }
  return out;
}

struct WeightStats {
  double mean = 0.0, min = 0.0, max = 0.0;
  std::size_t n = 0;
};

inline WeightStats weight_stats(const std::vector<Value>& w) {
  WeightStats s;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (const Value& v : w) {
    if (!v) continue;
    sum += *v;
    s.min = std::min(s.min, *v);
    s.max = std::max(s.max, *v);
    ++s.n;
  }
  if (s.n == 0) throw ValidationError("no weights available");
  s.mean = sum / static_cast<double>(s.n);
  return s;
}

}  // namespace msmfe
