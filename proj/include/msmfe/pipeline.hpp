#pragma once

// End-to-end estimator: derived columns, treatment models, weights and every
// configured outcome model, packaged so a bootstrap can rerun all of it.

#include <optional>
#include <string>
#include <vector>

#include "msmfe/balance.hpp"
#include "msmfe/bootstrap.hpp"
#include "msmfe/iptw.hpp"
#include "msmfe/outcome.hpp"
#include "msmfe/panel.hpp"

namespace msmfe {

struct PipelineConfig {
  WeightConfig weights;
  std::vector<OutcomeSpec> outcomes;

  void validate() const {
    weights.validate();
    if (outcomes.empty()) throw ValidationError("no outcome specs configured");
    for (const auto& o : outcomes) {
      if (o.treatment_terms.empty()) throw ValidationError("outcome spec '" + o.name + "' has no treatment terms");
      (void)o.focal();
    }
  }
};

struct SpecFit {
  OutcomeSpec spec;
  FitResult fit;
  std::vector<double> effects;  // per treatment term: pp (logistic) or percent change (gaussian)
  std::size_t n_obs = 0;
  std::size_t n_units = 0;
  double ess_percent = 0.0;
};

struct PipelineResult {
  PanelDataset data;  // prepared panel the weights and fits are aligned to
  std::size_t removed = 0;
  TreatmentModels models;
  WeightSeries weights;
  std::vector<SpecFit> fits;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline std::optional<std::pair<std::string, int>> split_shift(const std::string& name,
                                                              const std::string& marker) {
  const auto pos = name.rfind(marker);
  if (pos == std::string::npos || pos == 0) return std::nullopt;
  const std::string digits = name.substr(pos + marker.size());
  if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
  return std::make_pair(name.substr(0, pos), std::stoi(digits));
}

}  // namespace detail

// Materializes a derived column from its name: <c>_lagK, <c>_leadK, <c>_cum
// and <c>_any, recursively. Existing columns are left alone.
inline PanelDataset ensure_column(const PanelDataset& d, const std::string& name) {
  if (name == kTimeColumn || d.has_column(name)) return d;
  if (auto lag = detail::split_shift(name, "_lag")) {
    return build_lag(ensure_column(d, lag->first), lag->first, lag->second, name);
  }
  if (auto lead = detail::split_shift(name, "_lead")) {
    return build_lag(ensure_column(d, lead->first), lead->first, -lead->second, name);
  }
  if (detail::ends_with(name, "_cum")) {
    const std::string base = name.substr(0, name.size() - 4);
    return cumulative_sum(ensure_column(d, base), base, name);
  }
  if (detail::ends_with(name, "_any")) {
    const std::string base = name.substr(0, name.size() - 4);
    return binarize_any(ensure_column(d, base), base, name);
  }
  throw ValidationError("unknown column '" + name + "'");
}

inline PanelDataset add_derived_columns(const PanelDataset& raw, const PipelineConfig& cfg) {
  PanelDataset d = ensure_column(raw, cfg.weights.treatment);
  for (const auto& c : cfg.weights.covariates) d = ensure_column(d, c);
  for (const auto& o : cfg.outcomes) {
    d = ensure_column(d, o.outcome_column());
    for (const auto& t : o.treatment_terms) d = ensure_column(d, t);
  }
  return d;
}

// Weights an outcome spec uses on the prepared panel.
inline std::vector<Value> spec_weights(const PanelDataset& d, const WeightSeries& w, const OutcomeSpec& spec) {
  std::vector<Value> out(d.n_rows());
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    std::optional<std::size_t> src = r;
    if (spec.future_aligned_weights && spec.horizon != 0) src = d.shifted_row(r, -spec.horizon);
    if (!src || !w.truncated[*src]) continue;
    out[r] = spec.weighted ? *w.truncated[*src] : 1.0;
  }
  return out;
}

inline SpecFit fit_spec(const PanelDataset& d, const std::vector<Value>& weights, const OutcomeSpec& spec) {
  SpecFit s;
  s.spec = spec;
  s.fit = fit_msm(d, spec, weights);
  std::vector<Value> used(d.n_rows());
  std::vector<bool> unit_seen(d.n_units(), false);
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (!s.fit.fitted[r]) continue;
    used[r] = weights[r];
    unit_seen[static_cast<std::size_t>(d.unit_index(r))] = true;
  }
  s.n_obs = s.fit.n_obs;
  s.n_units = static_cast<std::size_t>(std::count(unit_seen.begin(), unit_seen.end(), true));
  s.ess_percent = ess(used).percent;
  for (const auto& term : spec.treatment_terms) {
    s.effects.push_back(spec.family == Family::logistic ? incremental_effect(s.fit, d, weights, term)
                                                        : percent_change(s.fit.coefficient(term)));
  }
  return s;
}

inline PipelineResult run_estimation(const PanelDataset& raw, const PipelineConfig& cfg) {
  cfg.validate();
  PipelineResult res;
  auto prep = prepare_treatment_panel(add_derived_columns(raw, cfg), cfg.weights);
  res.data = std::move(prep.data);
  res.removed = prep.removed;
  res.models = fit_treatment_models(res.data, cfg.weights);
  for (const FitResult* m : {res.models.numerator ? &*res.models.numerator : nullptr, &res.models.denominator}) {
    if (m) res.warnings.insert(res.warnings.end(), m->warnings.begin(), m->warnings.end());
  }
  res.weights = truncate_weights(stabilized_weights(res.data, res.models, cfg.weights), cfg.weights);
  for (const auto& spec : cfg.outcomes) {
    res.fits.push_back(fit_spec(res.data, spec_weights(res.data, res.weights, spec), spec));
  }
  return res;
}

// Flattened estimates: for each spec and term, the coefficient then the effect.
inline std::vector<double> estimate_vector(const PipelineResult& r) {
  std::vector<double> v;
  for (const auto& f : r.fits) {
    for (std::size_t k = 0; k < f.spec.treatment_terms.size(); ++k) {
      v.push_back(f.fit.coefficients[static_cast<Eigen::Index>(k)]);
      v.push_back(f.effects[k]);
    }
  }
  return v;
}

inline std::size_t estimate_offset(const PipelineConfig& cfg, std::size_t spec, const std::string& term) {
  std::size_t off = 0;
  for (std::size_t s = 0; s < cfg.outcomes.size(); ++s) {
    const auto& terms = cfg.outcomes[s].treatment_terms;
    for (std::size_t k = 0; k < terms.size(); ++k) {
      if (s == spec && terms[k] == term) return off;
      off += 2;
    }
  }
  throw ValidationError("term '" + term + "' not in spec " + std::to_string(spec));
}

struct InferenceResult {
  PipelineResult base;
  MultiBootstrap boot;
  std::vector<EffectEstimate> estimates;  // one per (spec, term)
};

inline VectorEstimator pipeline_estimator(const PipelineConfig& cfg) {
  return [cfg](const PanelDataset& d) { return estimate_vector(run_estimation(d, cfg)); };
}

inline InferenceResult estimate_with_inference(const PanelDataset& raw, const PipelineConfig& cfg,
                                               const BootstrapOptions& opt) {
  InferenceResult out;
  out.base = run_estimation(raw, cfg);
  out.boot = pairs_cluster_bootstrap(pipeline_estimator(cfg), raw, opt);
  std::size_t off = 0;
  for (const auto& f : out.base.fits) {
    for (std::size_t k = 0; k < f.spec.treatment_terms.size(); ++k, off += 2) {
      const auto coef = out.boot.component(off);
      const auto eff = out.boot.component(off + 1);
      EffectEstimate e;
      e.spec = f.spec.name;
      e.term = f.spec.treatment_terms[k];
      e.family = f.spec.family;
      e.coefficient = coef.estimate;
      e.incremental_effect = eff.estimate;
      e.se = coef.se;
      e.ci_low = coef.ci_low;
      e.ci_high = coef.ci_high;
      e.ci_low_normal = coef.ci_low_normal;
      e.ci_high_normal = coef.ci_high_normal;
      e.p_value = coef.p_value;
      e.ie_se = eff.se;
      e.ie_ci_low = eff.ci_low;
      e.ie_ci_high = eff.ci_high;
      e.n_obs = f.n_obs;
      e.n_units = f.n_units;
      e.ess_percent = f.ess_percent;
      out.estimates.push_back(e);
    }
  }
  return out;
}

// Sum of the focal-term effects of several specs (for example horizons
// j-1..j+3), with an interval from the replicate-wise sums.
inline WindowEffect window_effect(const InferenceResult& inf, const PipelineConfig& cfg,
                                  const std::vector<std::size_t>& specs) {
  std::vector<std::size_t> offsets;
  for (std::size_t s : specs) {
    if (s >= cfg.outcomes.size()) throw ValidationError("window refers to a missing spec");
    offsets.push_back(estimate_offset(cfg, s, cfg.outcomes[s].focal()) + 1);
  }
  std::vector<double> point;
  for (std::size_t o : offsets) point.push_back(inf.boot.estimate[o]);
  std::vector<std::vector<double>> reps;
  for (const auto& r : inf.boot.replicates) {
    std::vector<double> v;
    for (std::size_t o : offsets) v.push_back(r[o]);
    reps.push_back(std::move(v));
  }
  return window_cumulative_effect(point, reps, specs.size());
}

}  // namespace msmfe
