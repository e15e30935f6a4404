#pragma once

// Covariate balance and weight-health diagnostics.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msmfe/core.hpp"
#include "msmfe/iptw.hpp"
#include "msmfe/panel.hpp"

namespace msmfe {

namespace detail {

struct GroupMoments {
  double mean = 0.0;
  double var = 0.0;
};

// Weighted mean and variance with normalized weights nw:
// var = sum nw (x - mean)^2 / (1 - sum nw^2).
inline GroupMoments weighted_moments(std::span<const double> x, std::span<const double> w) {
  if (x.size() != w.size()) throw ValidationError("values and weights differ in length");
  if (x.empty()) throw ValidationError("empty group in balance computation");
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(total > 0.0)) throw ValidationError("group weights sum to zero");
  GroupMoments m;
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double nw = w[i] / total;
    m.mean += nw * x[i];
    sq += nw * nw;
  }
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) ss += (w[i] / total) * (x[i] - m.mean) * (x[i] - m.mean);
  const double denom = 1.0 - sq;
  m.var = denom > 0.0 ? ss / denom : 0.0;
  return m;
}

struct GroupSplit {
  std::vector<double> x[2];
  std::vector<double> w[2];
};

inline GroupSplit split_by_treatment(const PanelDataset& d, const std::string& treatment,
                                     const std::string& covariate, const std::vector<Value>* weights,
                                     bool squared) {
  const Column& t = d.column(treatment);
  const auto cov = ColumnRef(d, covariate);
  if (weights && weights->size() != d.n_rows()) throw ValidationError("weights are not aligned to the panel");
  GroupSplit s;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    const Value x = cov[r];
    if (!t.values[r] || !x) continue;
    double w = 1.0;
    if (weights) {
      if (!(*weights)[r]) continue;
      w = *(*weights)[r];
    }
    const int g = *t.values[r] == 1.0 ? 1 : 0;
    s.x[g].push_back(squared ? *x * *x : *x);
    s.w[g].push_back(w);
  }
  return s;
}

}  // namespace detail

// Absolute standardized mean difference between treated and control values.
inline double smd(std::span<const double> x_treated, std::span<const double> w_treated,
                  std::span<const double> x_control, std::span<const double> w_control) {
  const auto t = detail::weighted_moments(x_treated, w_treated);
  const auto c = detail::weighted_moments(x_control, w_control);
  const double pooled = std::sqrt((t.var + c.var) / 2.0);
  if (!(pooled > 0.0)) throw ValidationError("standardized mean difference undefined: zero pooled variance");
  return std::abs(t.mean - c.mean) / pooled;
}

inline double smd(std::span<const double> x_treated, std::span<const double> x_control) {
  const std::vector<double> wt(x_treated.size(), 1.0), wc(x_control.size(), 1.0);
  return smd(x_treated, wt, x_control, wc);
}

// Dataset form; weights == nullptr gives the unweighted SMD. Rows with a
// missing weight are outside the weighted sample and are skipped.
inline double smd(const PanelDataset& d, const std::string& treatment, const std::string& covariate,
                  const std::vector<Value>* weights = nullptr) {
  const auto s = detail::split_by_treatment(d, treatment, covariate, weights, false);
  return smd(s.x[1], s.w[1], s.x[0], s.w[0]);
}

inline double higher_moment_balance(const PanelDataset& d, const std::string& treatment,
                                    const std::string& covariate,
                                    const std::vector<Value>* weights = nullptr) {
  const auto s = detail::split_by_treatment(d, treatment, covariate, weights, true);
  return smd(s.x[1], s.w[1], s.x[0], s.w[0]);
}

struct EffectiveSampleSize {
  double absolute = 0.0;
  double percent = 0.0;
};

inline EffectiveSampleSize ess(std::span<const double> w) {
  if (w.empty()) throw ValidationError("effective sample size of an empty weight vector");
  double s = 0.0, s2 = 0.0;
  for (double v : w) {
    if (!(v > 0.0)) throw ValidationError("effective sample size needs positive weights");
    s += v;
    s2 += v * v;
  }
  EffectiveSampleSize e;
  e.absolute = s * s / s2;
  e.percent = 100.0 * e.absolute / static_cast<double>(w.size());
  return e;
}

inline EffectiveSampleSize ess(const std::vector<Value>& w) {
  std::vector<double> v;
  for (const Value& x : w) {
    if (x) v.push_back(*x);
  }
  return ess(std::span<const double>(v));
}

// Shared area under the two propensity-score histograms, in percent.
inline double overlap_coefficient(std::span<const double> ps_treated,
                                  std::span<const double> ps_control, int bins = 50) {
  if (ps_treated.empty() || ps_control.empty()) {
    throw ValidationError("overlap needs propensity scores in both groups");
  }
  if (bins < 1) throw ValidationError("overlap needs at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (auto s : {ps_treated, ps_control}) {
    for (double p : s) {
      lo = std::min(lo, p);
      hi = std::max(hi, p);
    }
  }
  if (hi == lo) return 100.0;
  const double width = (hi - lo) / bins;
  auto histogram = [&](std::span<const double> s) {
    std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
    for (double p : s) {
      auto b = static_cast<int>((p - lo) / width);
      b = std::clamp(b, 0, bins - 1);
      h[static_cast<std::size_t>(b)] += 1.0 / static_cast<double>(s.size());
    }
    return h;
  };
  const auto ht = histogram(ps_treated), hc = histogram(ps_control);
  double shared = 0.0;
  for (std::size_t b = 0; b < ht.size(); ++b) shared += std::min(ht[b], hc[b]);
  return std::min(100.0, 100.0 * shared);
}

struct GroupDistribution {
  double q25 = 0.0, q50 = 0.0, q75 = 0.0;
  std::vector<double> ecdf;  // aligned to DistributionSummary::grid
};

struct DistributionSummary {
  std::string covariate;
  std::vector<double> grid;
  GroupDistribution treated, control;
};

// Smallest value whose cumulative normalized weight reaches p.
inline double weighted_quantile(std::span<const double> x, std::span<const double> w, double p) {
  if (x.empty()) throw ValidationError("weighted quantile of an empty sample");
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  double cum = 0.0;
  for (std::size_t i : idx) {
    cum += w[i] / total;
    if (cum >= p - 1e-12) return x[i];
  }
  return x[idx.back()];
}

inline DistributionSummary weighted_distribution_summary(const PanelDataset& d,
                                                         const std::string& treatment,
                                                         const std::string& covariate,
                                                         const std::vector<Value>* weights = nullptr,
                                                         std::size_t max_points = 1000) {
  const auto s = detail::split_by_treatment(d, treatment, covariate, weights, false);
  DistributionSummary out;
  out.covariate = covariate;
  std::vector<double> all = s.x[0];
  all.insert(all.end(), s.x[1].begin(), s.x[1].end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  if (all.size() <= max_points) {
    out.grid = all;
  } else {
    for (std::size_t i = 0; i < max_points; ++i) {
      const auto k = static_cast<std::size_t>(std::llround(
          static_cast<double>(i) * static_cast<double>(all.size() - 1) / static_cast<double>(max_points - 1)));
      out.grid.push_back(all[k]);
    }
  }
  auto summarize = [&](int g, GroupDistribution& gd) {
    if (s.x[g].empty()) return;
    gd.q25 = weighted_quantile(s.x[g], s.w[g], 0.25);
    gd.q50 = weighted_quantile(s.x[g], s.w[g], 0.50);
    gd.q75 = weighted_quantile(s.x[g], s.w[g], 0.75);
    std::vector<std::size_t> idx(s.x[g].size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.x[g][a] < s.x[g][b]; });
    const double total = std::accumulate(s.w[g].begin(), s.w[g].end(), 0.0);
    double cum = 0.0;
    std::size_t k = 0;
    for (double v : out.grid) {
      while (k < idx.size() && s.x[g][idx[k]] <= v) cum += s.w[g][idx[k++]];
      gd.ecdf.push_back(k == idx.size() ? 1.0 : cum / total);
    }
  };
  summarize(1, out.treated);
  summarize(0, out.control);
  return out;
}

struct BalanceRow {
  std::string name;
  double smd_unweighted = 0.0;
  double smd_weighted_raw = 0.0;
  double smd_weighted_truncated = 0.0;
  double smd_squared_unweighted = 0.0;
  double smd_squared_covariate = 0.0;  // squared covariate under truncated weights
};

struct BalanceReport {
  std::vector<BalanceRow> rows;
  double ess_percent = 0.0;
  WeightStats raw_stats;
  WeightStats truncated_stats;
  double overlap_percent = 0.0;
  double threshold = 0.1;

  bool balanced() const {
    return std::all_of(rows.begin(), rows.end(),
                       [&](const BalanceRow& r) { return r.smd_weighted_truncated < threshold; });
  }
};

// Balance on the weighted estimation sample (rows with a weight). Unweighted
// SMDs use the same rows so that the comparison isolates the weighting.
inline BalanceReport balance_report(const PanelDataset& d, const std::string& treatment,
                                    const std::vector<std::string>& covariates,
                                    const WeightSeries& w, const std::vector<Value>& propensity) {
  BalanceReport rep;
  std::vector<Value> ones(d.n_rows());
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (w.truncated[r]) ones[r] = 1.0;
  }
  for (const auto& c : covariates) {
    BalanceRow row;
    row.name = c;
    row.smd_unweighted = smd(d, treatment, c, &ones);
    row.smd_weighted_raw = smd(d, treatment, c, &w.raw);
    row.smd_weighted_truncated = smd(d, treatment, c, &w.truncated);
    row.smd_squared_unweighted = higher_moment_balance(d, treatment, c, &ones);
    row.smd_squared_covariate = higher_moment_balance(d, treatment, c, &w.truncated);
    rep.rows.push_back(row);
  }
  rep.ess_percent = ess(w.truncated).percent;
  rep.raw_stats = weight_stats(w.raw);
  rep.truncated_stats = weight_stats(w.truncated);
  const Column& t = d.column(treatment);
  std::vector<double> pt, pc;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (!propensity[r] || !t.values[r] || !w.truncated[r]) continue;
    (*t.values[r] == 1.0 ? pt : pc).push_back(*propensity[r]);
  }
  if (!pt.empty() && !pc.empty()) rep.overlap_percent = overlap_coefficient(pt, pc);
  return rep;
}

}  // namespace msmfe
