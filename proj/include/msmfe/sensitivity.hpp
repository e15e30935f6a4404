#pragma once

// Sensitivity to unmeasured confounding (phi-corrected outcomes) and a
// parametric-bootstrap check of bias from near-violations of positivity.

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "msmfe/bootstrap.hpp"
#include "msmfe/pipeline.hpp"

namespace msmfe {

// C_ij = sum over the unit's rows s <= j of (1 - p_s) if T_s = 1 and -p_s if
// T_s = 0, with p_s the denominator probability of treatment. Missing from
// the first row without a probability onward.
inline std::vector<Value> khm_correction(const PanelDataset& d, const FitResult& den,
                                         const std::string& treatment) {
  const Prediction pred = predict(den, d);
  const Column& t = d.column(treatment);
  std::vector<Value> out(d.n_rows());
  for (int u = 0; u < static_cast<int>(d.n_units()); ++u) {
    auto [lo, hi] = d.unit_rows(u);
    double acc = 0.0;
    for (std::size_t r = lo; r < hi; ++r) {
      if (!pred.values[r] || !t.values[r]) break;
      const double p = *pred.values[r];
      acc += *t.values[r] == 1.0 ? 1.0 - p : -p;
      out[r] = acc;
    }
  }
  return out;
}

// Y(phi) = Y - phi * C, with C taken at the row where the outcome is measured.
inline std::vector<Value> khm_corrected_outcome(const PanelDataset& d, const std::vector<Value>& correction,
                                                const std::string& outcome_col, double phi, int horizon = 0) {
  const Column& y = d.column(outcome_col);
  std::vector<Value> out(d.n_rows());
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (!y.values[r]) continue;
    const auto src = horizon == 0 ? std::optional<std::size_t>(r) : d.shifted_row(r, -horizon);
    if (!src || !correction[*src]) continue;
    out[r] = *y.values[r] - phi * *correction[*src];
  }
  return out;
}

inline std::vector<Value> khm_corrected_outcome(const PanelDataset& d, const FitResult& den,
                                                const std::string& treatment, const std::string& outcome_col,
                                                double phi) {
  return khm_corrected_outcome(d, khm_correction(d, den, treatment), outcome_col, phi);
}

enum class KhmEngine { fractional_logistic, gaussian };

inline std::vector<double> default_phi_grid(double step = 0.25) {
  if (!(step > 0.0)) throw ValidationError("phi step must be positive");
  std::vector<double> g;
  const int n = static_cast<int>(std::floor(2.0 / step + 1e-9));
  for (int i = 0; i <= n; ++i) g.push_back(-1.0 + i * step);
  return g;
}

struct SensitivityCurve {
  std::vector<double> phis;
  std::vector<double> estimates;
  std::vector<double> incremental;  // pp
  std::vector<double> ci_low, ci_high;
  std::vector<double> ie_ci_low, ie_ci_high;
  std::vector<std::string> errors;  // per phi, empty when the refit succeeded
  double base_estimate = 0.0;
  std::size_t n_failed = 0;
  KhmEngine engine = KhmEngine::fractional_logistic;
};

struct SweepOptions {
  std::vector<double> phis = default_phi_grid();
  KhmEngine engine = KhmEngine::fractional_logistic;
  std::size_t spec_index = 0;
  BootstrapOptions bootstrap{200, 0, 1, 0.2};
  bool with_bootstrap = true;
};

namespace detail {

struct PhiPoint {
  double coefficient = 0.0;
  double incremental = 0.0;
};

inline PhiPoint khm_refit(const PipelineResult& base, const OutcomeSpec& spec, const std::vector<Value>& weights,
                          const std::vector<Value>& correction, double phi, KhmEngine engine) {
  const auto y = khm_corrected_outcome(base.data, correction, spec.outcome_column(), phi, spec.horizon);
  OutcomeSpec s = spec;
  s.horizon = 0;
  s.outcome = "khm_outcome";
  if (engine == KhmEngine::gaussian) s.family = Family::gaussian;
  const PanelDataset d = base.data.with_column(s.outcome, Column{y, false});
  const FitResult f = fit_msm(d, s, weights, engine == KhmEngine::fractional_logistic);
  PhiPoint p;
  p.coefficient = f.coefficient(s.focal());
  p.incremental = engine == KhmEngine::gaussian ? 100.0 * p.coefficient
                                                : incremental_effect(f, d, weights, s.focal());
  return p;
}

inline std::vector<double> khm_curve_vector(const PanelDataset& raw, const PipelineConfig& one,
                                            const SweepOptions& opt) {
  const PipelineResult base = run_estimation(raw, one);
  const auto& spec = one.outcomes.front();
  const auto weights = spec_weights(base.data, base.weights, spec);
  const auto corr = khm_correction(base.data, base.models.denominator, one.weights.treatment);
  std::vector<double> v;
  for (double phi : opt.phis) {
    const auto p = khm_refit(base, spec, weights, corr, phi, opt.engine);
    v.push_back(p.coefficient);
    v.push_back(p.incremental);
  }
  return v;
}

inline PipelineConfig single_spec(const PipelineConfig& cfg, std::size_t index) {
  if (index >= cfg.outcomes.size()) throw ValidationError("spec index out of range");
  PipelineConfig one = cfg;
  one.outcomes = {cfg.outcomes[index]};
  return one;
}

}  // namespace detail

// Refits the chosen spec with phi-corrected outcomes under the base weights.
inline SensitivityCurve khm_sweep(const PanelDataset& raw, const PipelineConfig& cfg, const SweepOptions& opt) {
  if (opt.phis.empty()) throw ValidationError("empty phi grid");
  const PipelineConfig one = detail::single_spec(cfg, opt.spec_index);
  const auto& spec = one.outcomes.front();
  const PipelineResult base = run_estimation(raw, one);
  const auto weights = spec_weights(base.data, base.weights, spec);
  const auto corr = khm_correction(base.data, base.models.denominator, one.weights.treatment);
  SensitivityCurve c;
  c.engine = opt.engine;
  c.phis = opt.phis;
  c.base_estimate = base.fits.front().fit.coefficient(spec.focal());
  const std::size_t n = opt.phis.size();
  c.estimates.assign(n, std::nan(""));
  c.incremental.assign(n, std::nan(""));
  c.ci_low.assign(n, std::nan(""));
  c.ci_high.assign(n, std::nan(""));
  c.ie_ci_low.assign(n, std::nan(""));
  c.ie_ci_high.assign(n, std::nan(""));
  c.errors.assign(n, "");
  for (std::size_t i = 0; i < n; ++i) {
    try {
      const auto p = detail::khm_refit(base, spec, weights, corr, opt.phis[i], opt.engine);
      c.estimates[i] = p.coefficient;
      c.incremental[i] = p.incremental;
    } catch (const Error& e) {
      c.errors[i] = e.what();
    }
  }
  if (!opt.with_bootstrap) return c;
  bool all_ok = true;
  for (const auto& e : c.errors) all_ok = all_ok && e.empty();
  if (!all_ok) return c;
  const auto boot = pairs_cluster_bootstrap(
      VectorEstimator([&](const PanelDataset& d) { return detail::khm_curve_vector(d, one, opt); }), raw,
      opt.bootstrap);
  c.n_failed = boot.n_failed;
  for (std::size_t i = 0; i < n; ++i) {
    const auto coef = boot.component(2 * i);
    const auto ie = boot.component(2 * i + 1);
    c.ci_low[i] = coef.ci_low;
    c.ci_high[i] = coef.ci_high;
    c.ie_ci_low[i] = ie.ci_low;
    c.ie_ci_high[i] = ie.ci_high;
  }
  return c;
}

struct PositivityDiagnostic {
  double estimate = 0.0;       // base estimate on the observed data
  double truth = 0.0;          // target parameter in the fitted world
  double mean_replicate = 0.0;
  double replicate_sd = 0.0;
  double bias = 0.0;
  double se_reference = 0.0;
  bool flag = false;
  double base_ci_low = 0.0, base_ci_high = 0.0;
  double corrected_ci_low = 0.0, corrected_ci_high = 0.0;
  std::size_t replicates = 0;
  std::size_t n_failed = 0;
};

struct PetersenOptions {
  std::size_t spec_index = 0;
  int replicates = 200;
  std::uint64_t seed = 0;
  int threads = 1;
  int truth_draws = 20;
  double max_failure_share = 0.2;
};

namespace detail {

// How an MSM term depends on the treatment path.
struct TermKind {
  enum Kind { shifted, cumulative } kind = shifted;
  int lag = 0;
};

inline TermKind classify_term(const std::string& term, const std::string& treatment) {
  if (term == treatment) return {};
  if (term == treatment + "_cum") return {TermKind::cumulative, 0};
  if (auto s = split_shift(term, "_lag"); s && s->first == treatment) return {TermKind::shifted, s->second};
  throw ValidationError("term '" + term + "' is not a lag or running count of the treatment; "
                        "the positivity check cannot resimulate it");
}

// Linear predictor of a treatment model split into the part that does not
// depend on simulated treatments and the coefficients on treatment lags.
struct TreatmentDraw {
  std::vector<Value> fixed;  // per prepared row
  std::vector<double> lag_coef;
};

inline TreatmentDraw split_treatment_model(const FitResult& m, const PanelDataset& d, const std::string& treatment) {
  TreatmentDraw t;
  const Prediction pred = predict(m, d);
  std::vector<int> lags;
  for (std::size_t k = 0; k < m.spec.terms.size(); ++k) {
    const auto s = split_shift(m.spec.terms[k], "_lag");
    if (s && s->first == treatment) {
      lags.push_back(s->second);
      if (t.lag_coef.size() < static_cast<std::size_t>(s->second)) t.lag_coef.resize(static_cast<std::size_t>(s->second), 0.0);
      t.lag_coef[static_cast<std::size_t>(s->second - 1)] = m.coefficients[static_cast<Eigen::Index>(k)];
    }
  }
  t.fixed.resize(d.n_rows());
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (!pred.eta[r]) continue;
    double eta = *pred.eta[r];
    for (std::size_t l = 0; l < t.lag_coef.size(); ++l) {
      eta -= t.lag_coef[l] * *d.value(lag_name(treatment, static_cast<int>(l + 1)), r);
    }
    t.fixed[r] = eta;
  }
  return t;
}

// Maps prepared-panel rows onto raw rows by (unit name, time).
inline std::vector<std::optional<std::size_t>> prepared_of_raw(const PanelDataset& raw, const PanelDataset& prep) {
  std::unordered_map<std::string, int> unit;
  for (std::size_t u = 0; u < prep.units().size(); ++u) unit[prep.units()[u]] = static_cast<int>(u);
  std::vector<std::optional<std::size_t>> out(raw.n_rows());
  for (std::size_t r = 0; r < raw.n_rows(); ++r) {
    auto it = unit.find(raw.unit_name(r));
    if (it != unit.end()) out[r] = prep.find_row(it->second, raw.time(r));
  }
  return out;
}

class WorldSimulator {
 public:
  WorldSimulator(const PanelDataset& raw, const PipelineResult& base, const PipelineConfig& cfg,
                 const FitResult& outcome_model)
      : raw_(raw), base_(base), cfg_(cfg), q_(outcome_model) {
    const auto& tr = cfg.weights.treatment;
    auto derived = treatment_lag_names(cfg.weights, std::max(cfg.weights.treatment_lags, cfg.weights.num_lags()));
    for (const auto& t : cfg.outcomes.front().treatment_terms) derived.push_back(t);
    for (const auto& name : derived) {
      if (name != tr && raw.has_column(name)) {
        throw ValidationError("input already holds treatment-derived column '" + name +
                              "'; remove it so the check can rebuild it from simulated treatments");
      }
    }
    map_ = prepared_of_raw(raw, base.data);
    den_ = split_treatment_model(base.models.denominator, base.data, tr);
    if (base.models.numerator) num_ = split_treatment_model(*base.models.numerator, base.data, tr);
    t_obs_ = raw.column(tr).values;
  }

  // Treatments redrawn in time order from the denominator model; rows outside
  // the prepared panel keep their observed treatment.
  std::vector<Value> draw_treatments(Rng& rng) const {
    std::vector<Value> t = t_obs_;
    for (std::size_t r = 0; r < raw_.n_rows(); ++r) {
      const auto p = map_[r];
      if (!p || !den_.fixed[*p]) continue;
      const double eta = *den_.fixed[*p] + lag_sum(den_, t, r);
      t[r] = rng.bernoulli(expit(eta)) ? 1.0 : 0.0;
    }
    return t;
  }

  PanelDataset replicate(Rng& rng) const {
    const auto t = draw_treatments(rng);
    PanelDataset sim = raw_.with_column(cfg_.weights.treatment, Column{t, true});
    const PanelDataset derived = add_derived_columns(sim, cfg_);
    const Prediction mu = predict(q_, derived);
    std::vector<Value> y = raw_.column(outcome_col()).values;
    const double sigma = std::sqrt(q_.scale);
    for (std::size_t r = 0; r < raw_.n_rows(); ++r) {
      if (!map_[r] || !mu.values[r]) continue;
      y[r] = q_.spec.family == Family::logistic ? (rng.bernoulli(*mu.values[r]) ? 1.0 : 0.0)
                                                : *mu.values[r] + sigma * rng.normal();
    }
    return sim.with_column(outcome_col(), Column{y, raw_.column(outcome_col()).binary});
  }

  // MSM parameter in the fitted world: window treatments drawn from the
  // numerator model, expected outcomes from the outcome model, averaged over
  // `draws` natural histories.
  double truth(int draws, std::uint64_t seed) const {
    const auto& spec = cfg_.outcomes.front();
    const auto& tr = cfg_.weights.treatment;
    std::vector<TermKind> kinds;
    for (const auto& term : spec.treatment_terms) kinds.push_back(classify_term(term, tr));
    const auto weights = spec_weights(base_.data, base_.weights, spec);
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < raw_.n_rows(); ++r) {
      if (map_[r] && weights[*map_[r]]) rows.push_back(r);
    }
    if (rows.empty()) throw ValidationError("no weighted rows for the positivity check");
    const std::size_t nt = kinds.size();
    const std::size_t nq = q_.spec.terms.size();
    std::vector<std::string> q_cov(q_.spec.terms.begin() + static_cast<std::ptrdiff_t>(nt), q_.spec.terms.end());
    const int k = cfg_.weights.window;
    double sum = 0.0;
    for (int m = 0; m < draws; ++m) {
      Rng rng(seed ^ 0x7472757468ULL, static_cast<std::uint64_t>(m));
      const auto nat = draw_treatments(rng);
      std::vector<std::string> units;
      std::vector<int> times;
      std::vector<Column> terms(nt);
      Column y;
      for (std::size_t r : rows) {
        // Path over the window s = j-k..j, raw row indices.
        std::vector<std::size_t> win;
        bool ok = true;
        for (int s = k; s >= 0 && ok; --s) {
          const auto row = s == 0 ? std::optional<std::size_t>(r) : raw_.shifted_row(r, s);
          if (row) win.push_back(*row);
          else ok = false;
        }
        if (!ok) continue;
        std::unordered_map<std::size_t, double> pseudo;
        auto t_at = [&](std::size_t row) -> Value {
          auto it = pseudo.find(row);
          return it != pseudo.end() ? Value(it->second) : nat[row];
        };
        for (std::size_t s : win) {
          double p = 0.5;
          if (num_) {
            const auto pr = map_[s];
            if (!pr || !num_->fixed[*pr]) {
              ok = false;
              break;
            }
            double eta = *num_->fixed[*pr];
            for (std::size_t l = 0; l < num_->lag_coef.size(); ++l) {
              const auto prev = raw_.shifted_row(s, static_cast<int>(l + 1));
              const Value tv = prev ? t_at(*prev) : std::nullopt;
              if (!tv) {
                ok = false;
                break;
              }
              eta += num_->lag_coef[l] * *tv;
            }
            if (!ok) break;
            p = expit(eta);
          }
          pseudo[s] = rng.bernoulli(p) ? 1.0 : 0.0;
        }
        if (!ok) continue;
        double eta = q_.intercept;
        std::vector<double> tv(nt);
        for (std::size_t i = 0; i < nt && ok; ++i) {
          Value v;
          if (kinds[i].kind == TermKind::shifted) {
            const auto row = kinds[i].lag == 0 ? std::optional<std::size_t>(r) : raw_.shifted_row(r, kinds[i].lag);
            if (row) v = t_at(*row);
          } else {
            const std::size_t lo = raw_.unit_rows(raw_.unit_index(r)).first;
            double c = 0.0;
            bool known = true;
            for (std::size_t s = lo; s <= r && known; ++s) {
              const Value ts = t_at(s);
              known = ts.has_value();
              if (known) c += *ts;
            }
            if (known) v = c;
          }
          if (!v) ok = false;
          else tv[i] = *v;
        }
        if (!ok) continue;
        for (std::size_t i = 0; i < nt; ++i) eta += q_.coefficients[static_cast<Eigen::Index>(i)] * tv[i];
        for (std::size_t i = nt; i < nq; ++i) {
          eta += q_.coefficients[static_cast<Eigen::Index>(i)] * *base_.data.value(q_cov[i - nt], *map_[r]);
        }
        units.push_back(raw_.unit_name(r));
        times.push_back(raw_.time(r));
        for (std::size_t i = 0; i < nt; ++i) terms[i].values.push_back(tv[i]);
        y.values.push_back(detail::mean_fn(q_.spec.family, eta));
      }
      std::vector<std::pair<std::string, Column>> cols{{"y", y}};
      for (std::size_t i = 0; i < nt; ++i) cols.emplace_back(spec.treatment_terms[i], terms[i]);
      const PanelDataset pseudo_data = PanelDataset::from_long(units, times, std::move(cols));
      ModelSpec ms;
      ms.response = "y";
      ms.terms = spec.treatment_terms;
      ms.family = spec.family;
      ms.fractional = spec.family == Family::logistic;
      sum += fit(pseudo_data, ms).coefficient(spec.focal());
    }
    return sum / draws;
  }

 private:
  double lag_sum(const TreatmentDraw& m, const std::vector<Value>& t, std::size_t r) const {
    double s = 0.0;
    for (std::size_t l = 0; l < m.lag_coef.size(); ++l) {
      const auto prev = raw_.shifted_row(r, static_cast<int>(l + 1));
      s += m.lag_coef[l] * *t[*prev];
    }
    return s;
  }

  const std::string& outcome_col() const { return cfg_.outcomes.front().outcome; }

  const PanelDataset& raw_;
  const PipelineResult& base_;
  const PipelineConfig& cfg_;
  const FitResult& q_;
  std::vector<std::optional<std::size_t>> map_;
  TreatmentDraw den_;
  std::optional<TreatmentDraw> num_;
  std::vector<Value> t_obs_;
};

}  // namespace detail

// Outcome regression used to simulate outcomes: the MSM treatment terms plus
// the denominator covariates, unweighted, without fixed effects.
inline FitResult positivity_outcome_model(const PipelineResult& base, const PipelineConfig& one) {
  const auto& spec = one.outcomes.front();
  ModelSpec q;
  q.response = spec.outcome;
  q.terms = spec.treatment_terms;
  for (const auto& c : one.weights.covariates) q.terms.push_back(c);
  q.family = spec.family;
  return fit(base.data, q);
}

// se_reference and the base interval normally come from the cluster bootstrap
// of the same spec.
inline PositivityDiagnostic petersen_bootstrap(const PanelDataset& raw, const PipelineConfig& cfg,
                                               double se_reference, double base_ci_low, double base_ci_high,
                                               const PetersenOptions& opt) {
  if (opt.replicates < 1) throw ValidationError("positivity check needs at least one replicate");
  const PipelineConfig one = detail::single_spec(cfg, opt.spec_index);
  const auto& spec = one.outcomes.front();
  if (spec.horizon != 0) throw ValidationError("positivity check supports horizon-0 specs only");
  for (const auto& t : spec.treatment_terms) detail::classify_term(t, one.weights.treatment);
  const PipelineResult base = run_estimation(raw, one);
  const FitResult q = positivity_outcome_model(base, one);
  const detail::WorldSimulator world(raw, base, one, q);

  PositivityDiagnostic out;
  out.estimate = base.fits.front().fit.coefficient(spec.focal());
  out.se_reference = se_reference;
  out.base_ci_low = base_ci_low;
  out.base_ci_high = base_ci_high;
  out.truth = world.truth(opt.truth_draws, opt.seed);

  const auto B = static_cast<std::size_t>(opt.replicates);
  std::vector<std::optional<double>> est(B);
  detail::parallel_for(B, opt.threads, [&](std::size_t b) {
    Rng rng(opt.seed, b);
    try {
      const PanelDataset sim = world.replicate(rng);
      const double v = run_estimation(sim, one).fits.front().fit.coefficient(spec.focal());
      if (std::isfinite(v)) est[b] = v;
    } catch (const std::exception&) {
    }
  });
  std::vector<double> ok;
  for (const auto& e : est) {
    if (e) ok.push_back(*e);
  }
  out.replicates = B;
  out.n_failed = B - ok.size();
  if (static_cast<double>(out.n_failed) > opt.max_failure_share * static_cast<double>(B)) {
    throw InferenceError(std::to_string(out.n_failed) + " of " + std::to_string(B) +
                         " positivity replicates failed");
  }
  out.mean_replicate = mean(ok);
  out.replicate_sd = ok.size() > 1 ? sample_sd(ok) : 0.0;
  out.bias = out.mean_replicate - out.truth;
  out.flag = std::abs(out.bias) >= se_reference;
  out.corrected_ci_low = base_ci_low - out.bias;
  out.corrected_ci_high = base_ci_high - out.bias;
  return out;
}

}  // namespace msmfe
