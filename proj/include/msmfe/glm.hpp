#pragma once

// Logistic and Gaussian GLMs with observation weights and one absorbed
// fixed-effect dimension. Each IRLS step solves a weighted least-squares
// problem on working data demeaned within groups, which profiles the group
// intercepts out of the slope update; the intercepts are then recovered from
// the per-group first-order condition.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msmfe/core.hpp"
#include "msmfe/panel.hpp"

namespace msmfe {

enum class Family { logistic, gaussian };

inline const char* to_string(Family f) { return f == Family::logistic ? "logistic" : "gaussian"; }

struct GlmControl {
  double score_tol = 1e-8;
  double deviance_tol = 1e-9;
  int max_iter = 100;
  double separation_cap = 30.0;
  int max_halvings = 50;
};

struct ModelSpec {
  std::string response;
  std::vector<std::string> terms;
  Family family = Family::logistic;
  std::optional<std::string> fe_group;     // "unit" or a grouping column
  std::optional<std::string> obs_weights;  // column of nonnegative weights
  bool intercept = true;
  bool fractional = false;  // quasi-likelihood logistic on any real response
  GlmControl control{};
};

struct FitResult {
  ModelSpec spec;
  double intercept = 0.0;
  Eigen::VectorXd coefficients;              // aligned to spec.terms
  std::map<std::string, double> fe_values;   // mean-centered group effects
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  double max_abs_score = 0.0;  // on the column-scaled design
  std::vector<double> loglik_trace;
  std::vector<Value> fitted;  // per input row; missing for rows not used
  std::vector<std::string> dropped_groups;
  std::vector<std::string> warnings;
  std::size_t n_obs = 0;
  double sum_weights = 0.0;
  double scale = 1.0;  // weighted mean squared residual (gaussian)

  bool has_fe() const { return spec.fe_group.has_value(); }
  bool has_intercept() const { return spec.intercept || has_fe(); }

  double coefficient(const std::string& term) const {
    for (std::size_t k = 0; k < spec.terms.size(); ++k) {
      if (spec.terms[k] == term) return coefficients[static_cast<Eigen::Index>(k)];
    }
    throw ValidationError("term '" + term + "' not in model");
  }

  // Layout used by loglik_and_score: [intercept (no-FE models only)] + terms.
  Eigen::VectorXd design_coefficients() const {
    if (has_fe() || !spec.intercept) return coefficients;
    Eigen::VectorXd b(coefficients.size() + 1);
    b << intercept, coefficients;
    return b;
  }

  // Group intercepts on the absolute scale (centered value plus intercept).
  std::map<std::string, double> absolute_fe() const {
    std::map<std::string, double> out;
    for (const auto& [g, a] : fe_values) out[g] = a + intercept;
    return out;
  }
};

namespace detail {

// Fast accessor for a numeric column or the time index.
struct ColumnRef {
  const std::vector<Value>* values = nullptr;
  const PanelDataset* data = nullptr;

  ColumnRef(const PanelDataset& d, const std::string& name) : data(&d) {
    if (name != kTimeColumn) values = &d.column(name).values;
  }
  Value operator[](std::size_t r) const {
    if (values) return (*values)[r];
    return static_cast<double>(data->time(r));
  }
};

struct Design {
  std::vector<std::size_t> rows;
  Eigen::MatrixXd X;  // design layout
  Eigen::VectorXd y;
  Eigen::VectorXd w;
  std::vector<int> group;  // per design row, FE models only
  std::vector<std::string> group_names;
  std::vector<std::string> col_names;
  bool intercept_col = false;
};

inline Design build_design(const PanelDataset& d, const ModelSpec& spec,
                           const std::set<std::string>& excluded_groups = {}) {
  if (spec.terms.empty() && !spec.fe_group && !spec.intercept) {
    throw ValidationError("model has no terms, intercept or fixed effects");
  }
  ColumnRef response(d, spec.response);
  std::vector<ColumnRef> terms;
  for (const auto& t : spec.terms) terms.emplace_back(d, t);
  std::optional<ColumnRef> weights;
  if (spec.obs_weights) weights.emplace(d, *spec.obs_weights);
  if (spec.fe_group && *spec.fe_group != kUnitColumn && !d.has_column(*spec.fe_group)) {
    throw ValidationError("unknown fixed-effect column '" + *spec.fe_group + "'");
  }

  Design des;
  des.intercept_col = spec.intercept && !spec.fe_group;
  if (des.intercept_col) des.col_names.push_back("(intercept)");
  for (const auto& t : spec.terms) des.col_names.push_back(t);

  std::unordered_map<std::string, int> gindex;
  std::vector<double> ys, ws;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    const Value y = response[r];
    if (!y) continue;
    bool ok = true;
    for (const auto& t : terms) {
      if (!t[r]) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    double wr = 1.0;
    if (weights) {
      const Value wv = (*weights)[r];
      if (!wv) continue;
      if (!std::isfinite(*wv) || *wv < 0.0) {
        throw ValidationError("observation weight must be finite and nonnegative (unit " +
                              d.unit_name(r) + ", time " + std::to_string(d.time(r)) + ")");
      }
      if (*wv == 0.0) continue;
      wr = *wv;
    }
    if (!std::isfinite(*y)) {
      throw ValidationError("non-finite response at unit " + d.unit_name(r) + ", time " +
                            std::to_string(d.time(r)));
    }
    if (spec.family == Family::logistic && !spec.fractional && !is_binary_value(*y)) {
      throw ValidationError("logistic response '" + spec.response + "' must be 0/1 (unit " +
                            d.unit_name(r) + ", time " + std::to_string(d.time(r)) + ")");
    }
    if (spec.fe_group) {
      auto key = d.group_key(*spec.fe_group, r);
      if (!key) continue;
      if (excluded_groups.count(*key)) continue;
      auto [it, inserted] = gindex.try_emplace(*key, static_cast<int>(des.group_names.size()));
      if (inserted) des.group_names.push_back(*key);
      des.group.push_back(it->second);
    }
    des.rows.push_back(r);
    ys.push_back(*y);
    ws.push_back(wr);
  }

  const auto n = static_cast<Eigen::Index>(des.rows.size());
  const auto p = static_cast<Eigen::Index>(des.col_names.size());
  des.X.resize(n, p);
  des.y = Eigen::Map<Eigen::VectorXd>(ys.data(), n);
  des.w = Eigen::Map<Eigen::VectorXd>(ws.data(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t r = des.rows[static_cast<std::size_t>(i)];
    Eigen::Index c = 0;
    if (des.intercept_col) des.X(i, c++) = 1.0;
    for (const auto& t : terms) des.X(i, c++) = *t[r];
  }
  return des;
}

inline double row_loglik(Family family, double y, double eta) {
  if (family == Family::gaussian) return -0.5 * (y - eta) * (y - eta);
  return y * log_expit(eta) + (1.0 - y) * log_expit(-eta);
}

inline double mean_fn(Family family, double eta) {
  return family == Family::logistic ? expit(eta) : eta;
}

inline double loglik(const Design& des, Family family, const Eigen::VectorXd& eta) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += des.w[i] * row_loglik(family, des.y[i], eta[i]);
  return ll;
}

}  // namespace detail

// Log-likelihood and its gradient with respect to the design coefficients
// (intercept first for models without fixed effects), group effects held at
// their absolute values in `alpha`.
inline std::pair<double, Eigen::VectorXd> loglik_and_score(
    const PanelDataset& d, const ModelSpec& spec, const Eigen::VectorXd& beta,
    const std::map<std::string, double>& alpha = {}) {
  const detail::Design des = detail::build_design(d, spec);
  if (beta.size() != des.X.cols()) {
    throw ValidationError("coefficient vector has " + std::to_string(beta.size()) +
                          " entries, design has " + std::to_string(des.X.cols()));
  }
  if (!spec.fe_group && !alpha.empty()) {
    throw ValidationError("group effects supplied for a model without fixed effects");
  }
  Eigen::VectorXd eta = des.X * beta;
  if (spec.fe_group) {
    std::vector<double> a(des.group_names.size());
    for (std::size_t g = 0; g < des.group_names.size(); ++g) {
      auto it = alpha.find(des.group_names[g]);
      if (it == alpha.end()) {
        throw ValidationError("no effect supplied for group '" + des.group_names[g] + "'");
      }
      a[g] = it->second;
    }
    for (Eigen::Index i = 0; i < eta.size(); ++i) eta[i] += a[static_cast<std::size_t>(des.group[static_cast<std::size_t>(i)])];
  }
  Eigen::VectorXd resid(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    resid[i] = des.w[i] * (des.y[i] - detail::mean_fn(spec.family, eta[i]));
  }
  return {detail::loglik(des, spec.family, eta), des.X.transpose() * resid};
}

inline FitResult fit(const PanelDataset& d, const ModelSpec& spec) {
  const GlmControl& ctl = spec.control;
  FitResult res;
  res.spec = spec;
  const bool logistic = spec.family == Family::logistic;

  std::set<std::string> dropped;
  if (spec.fe_group && logistic) {
    // Groups whose response never varies have an infinite MLE intercept.
    const detail::Design probe = detail::build_design(d, spec);
    std::vector<int> has_low(probe.group_names.size(), 0), has_high(probe.group_names.size(), 0);
    for (std::size_t i = 0; i < probe.rows.size(); ++i) {
      const double y = probe.y[static_cast<Eigen::Index>(i)];
      const auto g = static_cast<std::size_t>(probe.group[i]);
      if (y < 1.0) has_low[g] = 1;
      if (y > 0.0) has_high[g] = 1;
    }
    for (std::size_t g = 0; g < probe.group_names.size(); ++g) {
      if (!has_low[g] || !has_high[g]) dropped.insert(probe.group_names[g]);
    }
    if (!dropped.empty()) {
      std::string msg = "dropped " + std::to_string(dropped.size()) +
                        " group(s) with constant response:";
      for (const auto& g : dropped) msg += " " + g;
      res.warnings.push_back(msg);
      res.dropped_groups.assign(dropped.begin(), dropped.end());
    }
  }

  detail::Design des = detail::build_design(d, spec, dropped);
  const Eigen::Index n = des.X.rows();
  const Eigen::Index p = des.X.cols();
  if (n == 0) throw ValidationError("no complete observations for model of '" + spec.response + "'");
  const bool fe = spec.fe_group.has_value();
  const std::size_t G = des.group_names.size();

  // Column scaling keeps the least-squares problem well conditioned when
  // terms such as squared time trends are large.
  Eigen::VectorXd colscale = Eigen::VectorXd::Ones(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    const double m = des.X.col(k).cwiseAbs().maxCoeff();
    if (m == 0.0) {
      throw CollinearityError("term '" + des.col_names[static_cast<std::size_t>(k)] +
                              "' is identically zero");
    }
    colscale[k] = m;
    des.X.col(k) /= m;
  }

  auto group_of = [&](Eigen::Index i) { return static_cast<std::size_t>(des.group[static_cast<std::size_t>(i)]); };

  auto solve_step = [&](const Eigen::VectorXd& ww, const Eigen::VectorXd& z, Eigen::VectorXd& gamma,
                        std::vector<double>& alpha) {
    Eigen::MatrixXd Xd = des.X;
    Eigen::VectorXd zd = z;
    std::vector<double> gsum(G, 0.0);
    if (fe) {
      Eigen::MatrixXd gx = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(G), p);
      std::vector<double> gz(G, 0.0);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto g = group_of(i);
        gsum[g] += ww[i];
        gz[g] += ww[i] * z[i];
        gx.row(static_cast<Eigen::Index>(g)) += ww[i] * des.X.row(i);
      }
      for (std::size_t g = 0; g < G; ++g) {
        gz[g] /= gsum[g];
        gx.row(static_cast<Eigen::Index>(g)) /= gsum[g];
      }
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto g = group_of(i);
        zd[i] -= gz[g];
        Xd.row(i) -= gx.row(static_cast<Eigen::Index>(g));
      }
    }
    if (p > 0) {
      const Eigen::VectorXd sw = ww.cwiseSqrt();
      Eigen::MatrixXd A = sw.asDiagonal() * Xd;
      Eigen::VectorXd b = sw.cwiseProduct(zd);
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
      qr.setThreshold(1e-10);
      if (qr.rank() < p) {
        std::string names;
        const auto perm = qr.colsPermutation().indices();
        for (Eigen::Index k = qr.rank(); k < p; ++k) {
          names += (names.empty() ? "" : ", ") + des.col_names[static_cast<std::size_t>(perm[k])];
        }
        throw CollinearityError("collinear terms in model of '" + spec.response + "': " + names +
                                (fe ? " (absorbed by fixed effects or linearly dependent)" : ""));
      }
      gamma = qr.solve(b);
    } else {
      gamma.resize(0);
    }
    if (fe) {
      std::vector<double> num(G, 0.0);
      std::fill(gsum.begin(), gsum.end(), 0.0);
      const Eigen::VectorXd xb = p > 0 ? Eigen::VectorXd(des.X * gamma) : Eigen::VectorXd::Zero(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto g = group_of(i);
        num[g] += ww[i] * (z[i] - xb[i]);
        gsum[g] += ww[i];
      }
      alpha.assign(G, 0.0);
      for (std::size_t g = 0; g < G; ++g) alpha[g] = num[g] / gsum[g];
    }
  };

  auto linear_predictor = [&](const Eigen::VectorXd& gamma, const std::vector<double>& alpha) {
    Eigen::VectorXd eta = p > 0 ? Eigen::VectorXd(des.X * gamma) : Eigen::VectorXd::Zero(n);
    if (fe) {
      for (Eigen::Index i = 0; i < n; ++i) eta[i] += alpha[group_of(i)];
    }
    return eta;
  };

  auto score_max = [&](const Eigen::VectorXd& eta) {
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) r[i] = des.w[i] * (des.y[i] - detail::mean_fn(spec.family, eta[i]));
    double m = p > 0 ? (des.X.transpose() * r).cwiseAbs().maxCoeff() : 0.0;
    if (fe) {
      std::vector<double> gs(G, 0.0);
      for (Eigen::Index i = 0; i < n; ++i) gs[group_of(i)] += r[i];
      for (double s : gs) m = std::max(m, std::abs(s));
    }
    return m;
  };

  Eigen::VectorXd gamma = Eigen::VectorXd::Zero(p);
  std::vector<double> alpha(G, 0.0);
  Eigen::VectorXd eta(n);

  if (!logistic) {
    solve_step(des.w, des.y, gamma, alpha);
    eta = linear_predictor(gamma, alpha);
    res.loglik = detail::loglik(des, spec.family, eta);
    res.loglik_trace.push_back(res.loglik);
    res.iterations = 1;
    res.max_abs_score = score_max(eta);
    res.converged = true;
  } else {
    Eigen::VectorXd mu(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = 0.25 + 0.5 * std::clamp(des.y[i], 0.0, 1.0);
      eta[i] = logit(mu[i]);
    }
    double ll_old = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd gamma_old = gamma;
    std::vector<double> alpha_old = alpha;
    bool have_old = false;
    for (int it = 1; it <= ctl.max_iter; ++it) {
      Eigen::VectorXd ww(n), z(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double v = std::max(mu[i] * (1.0 - mu[i]), 1e-300);
        ww[i] = des.w[i] * v;
        z[i] = eta[i] + (des.y[i] - mu[i]) / v;
      }
      Eigen::VectorXd gamma_new;
      std::vector<double> alpha_new;
      solve_step(ww, z, gamma_new, alpha_new);
      Eigen::VectorXd eta_new = linear_predictor(gamma_new, alpha_new);
      double ll = detail::loglik(des, spec.family, eta_new);
      int halvings = 0;
      while (have_old && !(ll >= ll_old - 1e-12 * std::abs(ll_old)) && halvings < ctl.max_halvings) {
        gamma_new = 0.5 * (gamma_new + gamma_old);
        for (std::size_t g = 0; g < G; ++g) alpha_new[g] = 0.5 * (alpha_new[g] + alpha_old[g]);
        eta_new = linear_predictor(gamma_new, alpha_new);
        ll = detail::loglik(des, spec.family, eta_new);
        ++halvings;
      }
      gamma = gamma_new;
      alpha = alpha_new;
      eta = eta_new;
      for (Eigen::Index i = 0; i < n; ++i) mu[i] = expit(eta[i]);
      res.loglik_trace.push_back(ll);
      res.iterations = it;
      const double change = std::abs(ll - ll_old) / (std::abs(ll) + 0.1);
      res.max_abs_score = score_max(eta);
      if (have_old && change < ctl.deviance_tol && res.max_abs_score < ctl.score_tol) {
        res.converged = true;
        ll_old = ll;
        break;
      }
      ll_old = ll;
      gamma_old = gamma;
      alpha_old = alpha;
      have_old = true;
    }
    res.loglik = ll_old;
  }

  const double max_eta = n > 0 ? eta.cwiseAbs().maxCoeff() : 0.0;
  if (logistic && max_eta > ctl.separation_cap) {
    std::set<std::string> offenders;
    std::size_t rows = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(eta[i]) > ctl.separation_cap) {
        ++rows;
        if (fe) offenders.insert(des.group_names[group_of(i)]);
      }
    }
    std::string msg = "separation in model of '" + spec.response + "': " + std::to_string(rows) +
                      " row(s) with |linear predictor| > " + std::to_string(ctl.separation_cap);
    if (!offenders.empty()) {
      msg += " in group(s):";
      for (const auto& g : offenders) msg += " " + g;
    }
    throw SeparationError(msg);
  }
  if (!res.converged) {
    std::ostringstream os;
    os << "IRLS did not converge in " << ctl.max_iter << " iterations for '" << spec.response
       << "' (max |score| " << res.max_abs_score << "); loglik trace:";
    for (double v : res.loglik_trace) os << ' ' << v;
    throw ConvergenceError(os.str());
  }

  res.coefficients.resize(static_cast<Eigen::Index>(spec.terms.size()));
  const Eigen::Index off = des.intercept_col ? 1 : 0;
  for (Eigen::Index k = 0; k < p; ++k) {
    const double b = gamma[k] / colscale[k];
    if (k < off) {
      res.intercept = b;
    } else {
      res.coefficients[k - off] = b;
    }
  }
  if (fe) {
    double center = 0.0;
    for (double a : alpha) center += a;
    center /= static_cast<double>(G);
    res.intercept = center;
    for (std::size_t g = 0; g < G; ++g) res.fe_values[des.group_names[g]] = alpha[g] - center;
  }
  res.n_obs = static_cast<std::size_t>(n);
  res.sum_weights = des.w.sum();
  res.fitted.assign(d.n_rows(), std::nullopt);
  double ssr = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = detail::mean_fn(spec.family, eta[i]);
    res.fitted[des.rows[static_cast<std::size_t>(i)]] = m;
    ssr += des.w[i] * (des.y[i] - m) * (des.y[i] - m);
  }
  res.scale = ssr / res.sum_weights;
  return res;
}

struct Prediction {
  std::vector<Value> eta;
  std::vector<Value> values;  // probabilities (logistic) or means (gaussian)
  std::vector<std::string> warnings;
};

inline Prediction predict(const FitResult& f, const PanelDataset& d) {
  Prediction out;
  out.eta.assign(d.n_rows(), std::nullopt);
  out.values.assign(d.n_rows(), std::nullopt);
  std::vector<detail::ColumnRef> terms;
  for (const auto& t : f.spec.terms) terms.emplace_back(d, t);
  const std::set<std::string> dropped(f.dropped_groups.begin(), f.dropped_groups.end());
  std::set<std::string> unseen;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    double eta = f.intercept;
    bool ok = true;
    for (std::size_t k = 0; k < terms.size(); ++k) {
      const Value v = terms[k][r];
      if (!v) {
        ok = false;
        break;
      }
      eta += f.coefficients[static_cast<Eigen::Index>(k)] * *v;
    }
    if (!ok) continue;
    if (f.has_fe()) {
      const auto key = d.group_key(*f.spec.fe_group, r);
      if (!key) continue;
      auto it = f.fe_values.find(*key);
      if (it == f.fe_values.end()) {
        if (!dropped.count(*key)) unseen.insert(*key);
        continue;
      }
      eta += it->second;
    }
    out.eta[r] = eta;
    out.values[r] = detail::mean_fn(f.spec.family, eta);
  }
  if (!unseen.empty()) {
    std::string msg = "no fitted effect for " + std::to_string(unseen.size()) +
                      " group(s); predictions left missing:";
    for (const auto& g : unseen) msg += " " + g;
    out.warnings.push_back(msg);
  }
  return out;
}

}  // namespace msmfe
