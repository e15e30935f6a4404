#include <gtest/gtest.h>

#include <cmath>

#include "msmfe/outcome.hpp"
#include "oracles.hpp"

using namespace msmfe;

namespace {

struct Toy {
  PanelDataset data;
  std::vector<Value> weights;
};

Toy binary_toy(std::uint64_t seed, int n) {
  Rng rng(seed, 1);
  std::vector<std::string> units;
  std::vector<int> times;
  Column t{{}, true}, y{{}, true}, x;
  for (int i = 0; i < n; ++i) {
    units.push_back("u" + std::to_string(i % 17));
    times.push_back(i / 17 + 1);
    const bool ti = rng.bernoulli(0.4);
    t.values.push_back(ti ? 1.0 : 0.0);
    y.values.push_back(rng.bernoulli(ti ? 0.35 : 0.2) ? 1.0 : 0.0);
    x.values.push_back(rng.normal());
  }
  auto d = PanelDataset::from_long(units, times, {{"T", t}, {"Y", y}, {"x", x}});
  std::vector<Value> aligned(d.n_rows());
  Rng again(seed, 2);
  for (auto& v : aligned) v = 0.2 + 2.0 * again.uniform();
  return {d, aligned};
}

OutcomeSpec simple_spec() {
  OutcomeSpec s;
  s.name = "primary";
  s.outcome = "Y";
  s.treatment_terms = {"T"};
  return s;
}

}  // namespace

TEST(Outcome, SingleBinaryTreatmentMatchesWeightedOddsRatio) {
  auto [d, w] = binary_toy(4, 600);
  auto f = fit_msm(d, simple_spec(), w);
  double n[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    n[static_cast<int>(*d.column("T").values[r])][static_cast<int>(*d.column("Y").values[r])] += *w[r];
  }
  const double log_or = std::log(n[1][1] * n[0][0] / (n[1][0] * n[0][1]));
  EXPECT_NEAR(f.coefficient("T"), log_or, 1e-9);
  EXPECT_NEAR(f.intercept, std::log(n[0][1] / n[0][0]), 1e-9);
}

TEST(Outcome, WeightRescalingLeavesCoefficientsUnchanged) {
  auto [d, w] = binary_toy(5, 400);
  std::vector<Value> w3;
  for (const Value& v : w) w3.push_back(3.7 * *v);
  auto a = fit_msm(d, simple_spec(), w);
  auto b = fit_msm(d, simple_spec(), w3);
  EXPECT_NEAR(a.coefficient("T"), b.coefficient("T"), 1e-10);
  EXPECT_NEAR(a.intercept, b.intercept, 1e-10);
}

TEST(Outcome, MissingWeightsDropRows) {
  auto [d, w] = binary_toy(6, 200);
  w[0] = std::nullopt;
  auto f = fit_msm(d, simple_spec(), w);
  EXPECT_EQ(f.n_obs, d.n_rows() - 1);
  EXPECT_FALSE(f.fitted[0].has_value());
}

TEST(Outcome, RejectsMisalignedWeightsAndFractionalTreatment) {
  auto [d, w] = binary_toy(7, 50);
  w.pop_back();
  EXPECT_THROW(fit_msm(d, simple_spec(), w), ValidationError);
  auto spec = simple_spec();
  spec.treatment_terms = {"x"};
  std::vector<Value> ones(d.n_rows(), 1.0);
  EXPECT_THROW(fit_msm(d, spec, ones), ValidationError);
}

TEST(Outcome, IncrementalEffectHandValues) {
  auto d = PanelDataset::from_long({"a", "a"}, {1, 2}, {{"T", Column{{1.0, 0.0}, true}}});
  std::vector<Value> w{1.0, 1.0};
  FitResult f;
  f.spec.terms = {"T"};
  f.spec.family = Family::logistic;
  f.coefficients = Eigen::VectorXd::Constant(1, std::log(9.0));
  f.fitted = {0.5, 0.5};
  EXPECT_NEAR(incremental_effect(f, d, w, "T"), 40.0, 1e-12);
  f.coefficients[0] = 0.0;
  EXPECT_EQ(incremental_effect(f, d, w, "T"), 0.0);
  f.spec.family = Family::gaussian;
  EXPECT_THROW(incremental_effect(f, d, w, "T"), ValidationError);
}

TEST(Outcome, IncrementalEffectSignAndBound) {
  auto [d, w] = binary_toy(8, 500);
  auto f = fit_msm(d, simple_spec(), w);
  const double ie = incremental_effect(f, d, w, "T");
  EXPECT_EQ(std::signbit(ie), std::signbit(f.coefficient("T")));
  EXPECT_LE(std::abs(ie), 100.0);
}

TEST(Outcome, PercentChangeArithmetic) {
  EXPECT_EQ(percent_change(0.0), 0.0);
  EXPECT_NEAR(std::round(percent_change(0.0656) * 100.0) / 100.0, 6.78, 1e-12);
  EXPECT_NEAR(std::round(percent_change(0.0733) * 100.0) / 100.0, 7.61, 1e-12);
  FitResult f;
  f.spec.terms = {"T"};
  f.coefficients = Eigen::VectorXd::Constant(1, 0.0656);
  EXPECT_THROW(percent_change(f, "T"), ValidationError);
  f.spec.family = Family::gaussian;
  EXPECT_NEAR(percent_change(f, "T"), 6.7799, 1e-3);
}

TEST(Outcome, WindowCumulativeEffect) {
  std::vector<double> zero(5, 0.0);
  EXPECT_EQ(window_cumulative_effect(zero, {}).sum, 0.0);
  std::vector<double> eff{-1.0, -2.0, -1.5, -2.0, -1.28};
  std::vector<std::vector<double>> reps;
  for (int b = 0; b < 100; ++b) {
    std::vector<double> r;
    for (double e : eff) r.push_back(e + 0.01 * (b - 50));
    reps.push_back(r);
  }
  auto w = window_cumulative_effect(eff, reps);
  EXPECT_DOUBLE_EQ(w.sum, -1.0 - 2.0 - 1.5 - 2.0 - 1.28);
  EXPECT_LT(w.ci_low, w.sum);
  EXPECT_GT(w.ci_high, w.sum);
  EXPECT_THROW(window_cumulative_effect({1.0, 2.0}, {}), ValidationError);
}

TEST(Outcome, TwfeMatchesDummyVariableOls) {
  Rng rng(21, 0);
  std::vector<std::string> units;
  std::vector<int> times;
  Column y, x1, x2;
  for (int u = 0; u < 8; ++u) {
    const double a = rng.normal();
    for (int t = 1; t <= 6; ++t) {
      if (u == 3 && t == 2) continue;  // unbalanced
      units.push_back("u" + std::to_string(u));
      times.push_back(t);
      const double v1 = rng.normal() + 0.5 * a, v2 = rng.normal();
      x1.values.push_back(v1);
      x2.values.push_back(v2);
      y.values.push_back(a + 0.3 * t + 1.5 * v1 - 0.7 * v2 + rng.normal());
    }
  }
  auto d = PanelDataset::from_long(units, times, {{"y", y}, {"x1", x1}, {"x2", x2}});
  for (bool two_way : {false, true}) {
    auto res = twfe_fit(d, "y", {"x1", "x2"}, two_way);
    const auto n = static_cast<Eigen::Index>(d.n_rows());
    const int extra = two_way ? 5 : 0;
    Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(n, 2 + 8 + extra);
    Eigen::VectorXd yy(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto r = static_cast<std::size_t>(i);
      yy[i] = *d.column("y").values[r];
      Z(i, 0) = *d.column("x1").values[r];
      Z(i, 1) = *d.column("x2").values[r];
      Z(i, 2 + d.unit_index(r)) = 1.0;
      if (two_way && d.time(r) > 1) Z(i, 10 + d.time(r) - 2) = 1.0;
    }
    auto beta = oracle::ols(Z, yy);
    EXPECT_NEAR(res.coefficient("x1"), beta[0], 1e-8);
    EXPECT_NEAR(res.coefficient("x2"), beta[1], 1e-8);

    std::vector<Value> shifted;
    for (const Value& v : d.column("y").values) shifted.push_back(*v + 11.0);
    auto s = twfe_fit(d.with_column("y", Column{shifted, false}), "y", {"x1", "x2"}, two_way);
    EXPECT_NEAR(s.coefficient("x1"), res.coefficient("x1"), 1e-10);
  }
}

TEST(Outcome, TwfeRejectsAbsorbedTreatment) {
  std::vector<std::string> units{"a", "a", "b", "b", "c", "c"};
  std::vector<int> times{1, 2, 1, 2, 1, 2};
  Column y{{1.0, 2.0, 0.5, 0.7, 3.0, 1.0}, false}, t{{1.0, 1.0, 0.0, 0.0, 1.0, 1.0}, true};
  auto d = PanelDataset::from_long(units, times, {{"y", y}, {"T", t}});
  EXPECT_THROW(twfe_fit(d, "y", {"T"}, false), CollinearityError);
}
