#pragma once

// Pairs cluster bootstrap around an arbitrary (vector-valued) estimator.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "msmfe/core.hpp"
#include "msmfe/panel.hpp"

namespace msmfe {

struct BootstrapOptions {
  int replicates = 500;
  std::uint64_t seed = 0;
  int threads = 1;  // 0 uses every hardware thread
  double max_failure_share = 0.2;
};

struct BootstrapResult {
  double estimate = 0.0;
  std::vector<double> replicates;
  std::vector<std::size_t> replicate_ids;  // replicate index of each entry
  std::size_t n_failed = 0;
  double se = 0.0;
  double ci_low = 0.0, ci_high = 0.0;                // percentile
  double ci_low_normal = 0.0, ci_high_normal = 0.0;  // estimate +- 1.96 se
  double p_value = 1.0;
};

inline BootstrapResult summarize_replicates(double estimate, std::vector<double> reps,
                                            std::vector<std::size_t> ids, std::size_t n_failed) {
  BootstrapResult r;
  r.estimate = estimate;
  r.replicates = std::move(reps);
  r.replicate_ids = std::move(ids);
  r.n_failed = n_failed;
  if (r.replicates.empty()) return r;
  r.se = r.replicates.size() > 1 ? sample_sd(r.replicates) : 0.0;
  r.ci_low = quantile(r.replicates, 0.025);
  r.ci_high = quantile(r.replicates, 0.975);
  constexpr double z = 1.959963984540054;
  r.ci_low_normal = estimate - z * r.se;
  r.ci_high_normal = estimate + z * r.se;
  if (r.se > 0.0) {
    r.p_value = 2.0 * (1.0 - normal_cdf(std::abs(estimate / r.se)));
  } else {
    r.p_value = estimate == 0.0 ? 1.0 : 0.0;
  }
  return r;
}

struct MultiBootstrap {
  std::vector<double> estimate;
  std::vector<std::vector<double>> replicates;  // successful replicates, by replicate index
  std::vector<std::size_t> replicate_ids;
  std::size_t n_failed = 0;
  std::vector<std::string> failures;  // "replicate k: message"

  std::size_t size() const { return estimate.size(); }

  BootstrapResult component(std::size_t i) const {
    std::vector<double> v;
    v.reserve(replicates.size());
    for (const auto& r : replicates) v.push_back(r.at(i));
    return summarize_replicates(estimate.at(i), std::move(v), replicate_ids, n_failed);
  }

  // Bootstrap distribution of a function of the whole estimate vector.
  BootstrapResult combine(const std::function<double(const std::vector<double>&)>& g) const {
    std::vector<double> v;
    v.reserve(replicates.size());
    for (const auto& r : replicates) v.push_back(g(r));
    return summarize_replicates(g(estimate), std::move(v), replicate_ids, n_failed);
  }
};

// Cluster label per row: the unit, or the value of the dataset's cluster column.
inline std::vector<std::string> cluster_labels(const PanelDataset& d) {
  std::vector<std::string> out(d.n_rows());
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (d.cluster_col().empty()) {
      out[r] = d.unit_name(r);
    } else {
      auto k = d.group_key(d.cluster_col(), r);
      if (!k) {
        throw ValidationError("missing cluster value at unit " + d.unit_name(r) + ", time " +
                              std::to_string(d.time(r)));
      }
      out[r] = *k;
    }
  }
  return out;
}

// Draws as many clusters as the data has, with replacement. The k-th draw's
// units become "<unit>#k", so a cluster drawn twice yields distinct units
// (and distinct fixed-effect groups). A numeric cluster column is recoded to k.
inline PanelDataset resample_clusters(const PanelDataset& d, Rng& rng) {
  const auto labels = cluster_labels(d);
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    auto [it, inserted] = index.try_emplace(labels[r], members.size());
    if (inserted) members.emplace_back();
    members[it->second].push_back(r);
  }
  const std::size_t g = members.size();
  if (g < 2) throw InferenceError("cluster bootstrap needs at least two clusters");
  std::vector<std::string> units;
  std::vector<int> times;
  std::vector<std::size_t> src;
  std::vector<double> draw_of_row;
  for (std::size_t k = 0; k < g; ++k) {
    const std::size_t c = rng.below(g);
    const std::string suffix = "#" + std::to_string(k);
    for (std::size_t r : members[c]) {
      units.push_back(d.unit_name(r) + suffix);
      times.push_back(d.time(r));
      src.push_back(r);
      draw_of_row.push_back(static_cast<double>(k));
    }
  }
  std::vector<std::pair<std::string, Column>> cols;
  for (const auto& name : d.column_names()) {
    const Column& s = d.column(name);
    Column c;
    c.binary = s.binary;
    c.values.reserve(src.size());
    if (name == d.cluster_col()) {
      for (double k : draw_of_row) c.values.emplace_back(k);
    } else {
      for (std::size_t r : src) c.values.push_back(s.values[r]);
    }
    cols.emplace_back(name, std::move(c));
  }
  PanelDataset out = PanelDataset::from_long(units, times, std::move(cols));
  return out.with_cluster_col(d.cluster_col()).with_group_col(d.group_col());
}

namespace detail {

// Runs body(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  unsigned workers = threads > 0 ? static_cast<unsigned>(threads) : std::thread::hardware_concurrency();
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) body(i);
    });
  }
}

}  // namespace detail

using VectorEstimator = std::function<std::vector<double>(const PanelDataset&)>;
using ScalarEstimator = std::function<double(const PanelDataset&)>;

// Replicate b uses Rng(seed, b), so results do not depend on thread count.
inline MultiBootstrap pairs_cluster_bootstrap(const VectorEstimator& estimator, const PanelDataset& d,
                                              const BootstrapOptions& opt) {
  if (opt.replicates < 1) throw ValidationError("bootstrap needs at least one replicate");
  const auto labels = cluster_labels(d);
  if (std::set<std::string>(labels.begin(), labels.end()).size() < 2) {
    throw InferenceError("cluster bootstrap needs at least two clusters");
  }
  MultiBootstrap out;
  out.estimate = estimator(d);
  const auto B = static_cast<std::size_t>(opt.replicates);
  std::vector<std::optional<std::vector<double>>> results(B);
  std::vector<std::string> errors(B);
  detail::parallel_for(B, opt.threads, [&](std::size_t b) {
    Rng rng(opt.seed, b);
    try {
      const PanelDataset sample = resample_clusters(d, rng);
      auto v = estimator(sample);
      if (v.size() != out.estimate.size()) throw InferenceError("estimator changed output length");
      for (double x : v) {
        if (!std::isfinite(x)) throw InferenceError("non-finite estimate");
      }
      results[b] = std::move(v);
    } catch (const std::exception& e) {
      errors[b] = e.what();
    }
  });
  for (std::size_t b = 0; b < B; ++b) {
    if (results[b]) {
      out.replicates.push_back(std::move(*results[b]));
      out.replicate_ids.push_back(b);
    } else {
      ++out.n_failed;
      out.failures.push_back("replicate " + std::to_string(b) + ": " + errors[b]);
    }
  }
  if (static_cast<double>(out.n_failed) > opt.max_failure_share * static_cast<double>(B)) {
    throw InferenceError(std::to_string(out.n_failed) + " of " + std::to_string(B) +
                         " bootstrap replicates failed; first: " + out.failures.front());
  }
  return out;
}

inline BootstrapResult pairs_cluster_bootstrap(const ScalarEstimator& estimator, const PanelDataset& d,
                                               const BootstrapOptions& opt) {
  auto multi = pairs_cluster_bootstrap(
      VectorEstimator([&](const PanelDataset& s) { return std::vector<double>{estimator(s)}; }), d, opt);
  return multi.component(0);
}

}  // namespace msmfe
