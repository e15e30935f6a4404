#include <gtest/gtest.h>

#include <cmath>

#include "msmfe/glm.hpp"
#include "oracles.hpp"

using namespace msmfe;

namespace {

struct Extracted {
  Eigen::MatrixXd X;
  Eigen::VectorXd y, w;
  std::vector<int> group;
  std::vector<std::string> names;
};

Extracted extract(const PanelDataset& d, const std::vector<std::string>& terms,
                  const std::set<std::string>& skip = {}) {
  Extracted e;
  std::map<std::string, int> idx;
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    if (skip.count(d.unit_name(r))) continue;
    rows.push_back(r);
  }
  e.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(terms.size()));
  e.y.resize(static_cast<Eigen::Index>(rows.size()));
  e.w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    for (std::size_t k = 0; k < terms.size(); ++k) {
      e.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = *d.value(terms[k], r);
    }
    e.y[static_cast<Eigen::Index>(i)] = *d.value("y", r);
    auto [it, ins] = idx.try_emplace(d.unit_name(r), static_cast<int>(e.names.size()));
    if (ins) e.names.push_back(d.unit_name(r));
    e.group.push_back(it->second);
  }
  return e;
}

ModelSpec fe_spec() {
  ModelSpec s;
  s.response = "y";
  s.terms = {"x1", "x2"};
  s.fe_group = std::string(kUnitColumn);
  return s;
}

}  // namespace

TEST(Glm, ConstantOnlyModelOnSymmetricDataIsZero) {
  Column y{{0.0, 1.0, 0.0, 1.0}, true};
  Column x{{-1.0, 1.0, -1.0, 1.0}};
  auto d = PanelDataset::from_long({"a", "a", "b", "b"}, {1, 2, 1, 2}, {{"y", y}, {"x", x}});
  ModelSpec s;
  s.response = "y";
  auto f = fit(d, s);
  EXPECT_NEAR(f.intercept, 0.0, 1e-14);
  EXPECT_TRUE(f.converged);
}

TEST(Glm, FixedEffectsMatchDummyVariableMle) {
  auto d = oracle::random_logit_panel(11, 20, 10);
  auto f = fit(d, fe_spec());
  auto e = extract(d, {"x1", "x2"}, {f.dropped_groups.begin(), f.dropped_groups.end()});
  auto ref = oracle::dummy_logit_mle(e.X, e.y, e.w, e.group, static_cast<int>(e.names.size()));
  EXPECT_NEAR(f.coefficients[0], ref.slopes[0], 1e-6);
  EXPECT_NEAR(f.coefficients[1], ref.slopes[1], 1e-6);
  auto abs_fe = f.absolute_fe();
  for (std::size_t g = 0; g < e.names.size(); ++g) {
    EXPECT_NEAR(abs_fe.at(e.names[g]), ref.group_effects[g], 1e-6);
  }
  double centered = 0.0;
  for (const auto& [g, a] : f.fe_values) centered += a;
  EXPECT_NEAR(centered, 0.0, 1e-10);
}

TEST(Glm, AllOneUnitIsDroppedWithWarning) {
  auto d = oracle::random_logit_panel(5, 12, 8);
  Column y = d.column("y");
  auto [lo, hi] = d.unit_rows(3);
  for (auto r = lo; r < hi; ++r) y.values[r] = 1.0;
  d = d.with_column("y", y);
  auto f = fit(d, fe_spec());
  ASSERT_EQ(f.dropped_groups.size(), 1u);
  EXPECT_EQ(f.dropped_groups[0], "u3");
  ASSERT_FALSE(f.warnings.empty());
  EXPECT_NE(f.warnings[0].find("u3"), std::string::npos);
  auto e = extract(d, {"x1", "x2"}, {"u3"});
  auto ref = oracle::dummy_logit_mle(e.X, e.y, e.w, e.group, static_cast<int>(e.names.size()));
  EXPECT_NEAR(f.coefficients[0], ref.slopes[0], 1e-6);
  EXPECT_NEAR(f.coefficients[1], ref.slopes[1], 1e-6);
  auto pred = predict(f, d);
  EXPECT_FALSE(pred.values[lo].has_value());
  EXPECT_TRUE(pred.warnings.empty());
}

TEST(Glm, BalancedResponseAtZeroHasHalfLogLikelihood) {
  auto d = oracle::random_logit_panel(3, 4, 5);
  Column y = d.column("y");
  for (std::size_t r = 0; r < y.values.size(); ++r) y.values[r] = static_cast<double>(r % 2);
  d = d.with_column("y", y);
  ModelSpec s;
  s.response = "y";
  s.terms = {"x1"};
  auto [ll, score] = loglik_and_score(d, s, Eigen::Vector2d::Zero());
  EXPECT_NEAR(ll, 20.0 * std::log(0.5), 1e-12);
}

TEST(Glm, ScoreMatchesFiniteDifferences) {
  for (Family fam : {Family::logistic, Family::gaussian}) {
    auto d = oracle::random_logit_panel(21, 6, 5);
    ModelSpec s = fe_spec();
    s.family = fam;
    Eigen::Vector2d beta(0.3, -0.2);
    std::map<std::string, double> alpha;
    for (std::size_t u = 0; u < d.n_units(); ++u) alpha[d.units()[u]] = 0.1 * static_cast<double>(u) - 0.2;
    auto [ll, score] = loglik_and_score(d, s, beta, alpha);
    auto fd = oracle::central_difference(
        [&](const Eigen::VectorXd& b) { return loglik_and_score(d, s, b, alpha).first; }, beta, 1e-6);
    for (Eigen::Index k = 0; k < 2; ++k) {
      EXPECT_LT(std::abs(score[k] - fd[k]) / std::max(1.0, std::abs(fd[k])), 1e-5) << to_string(fam);
    }
  }
}

TEST(Glm, ScoreVanishesAtFit) {
  auto d = oracle::random_logit_panel(8, 15, 10);
  auto f = fit(d, fe_spec());
  auto [ll, score] = loglik_and_score(d, fe_spec(), f.design_coefficients(), f.absolute_fe());
  EXPECT_LT(score.cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(ll, f.loglik, 1e-9);
}

TEST(Glm, LogLikelihoodNondecreasingAcrossIterations) {
  auto d = oracle::random_logit_panel(9, 25, 12);
  auto f = fit(d, fe_spec());
  for (std::size_t i = 1; i < f.loglik_trace.size(); ++i) {
    EXPECT_GE(f.loglik_trace[i], f.loglik_trace[i - 1] - 1e-9);
  }
}

TEST(Glm, GaussianEqualWeightsIsOlsAndDoublingWeightsIsInvariant) {
  auto d = oracle::random_logit_panel(4, 10, 6);
  ModelSpec s;
  s.response = "x1";
  s.terms = {"x2", "y"};
  s.family = Family::gaussian;
  auto plain = fit(d, s);
  Column w{std::vector<Value>(d.n_rows(), 1.0)};
  auto dw = d.with_column("w", w);
  s.obs_weights = "w";
  auto weighted = fit(dw, s);
  Column w2{std::vector<Value>(d.n_rows(), 2.0)};
  auto dw2 = d.with_column("w", w2);
  auto doubled = fit(dw2, s);
  Eigen::MatrixXd Z(static_cast<Eigen::Index>(d.n_rows()), 3);
  Eigen::VectorXd yv(static_cast<Eigen::Index>(d.n_rows()));
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    Z(i, 0) = 1.0;
    Z(i, 1) = *d.value("x2", r);
    Z(i, 2) = *d.value("y", r);
    yv[i] = *d.value("x1", r);
  }
  auto ref = oracle::ols(Z, yv);
  EXPECT_NEAR(plain.intercept, ref[0], 1e-10);
  EXPECT_NEAR(plain.coefficients[0], ref[1], 1e-10);
  EXPECT_NEAR(plain.coefficients[1], ref[2], 1e-10);
  EXPECT_NEAR(weighted.coefficients[0], plain.coefficients[0], 1e-12);
  EXPECT_NEAR(doubled.coefficients[0], plain.coefficients[0], 1e-12);
  EXPECT_NEAR(doubled.coefficients[1], plain.coefficients[1], 1e-12);
}

TEST(Glm, InSampleMeanPredictionEqualsResponseMean) {
  auto d = oracle::random_logit_panel(14, 10, 8);
  ModelSpec s;
  s.response = "y";
  s.terms = {"x1"};
  auto f = fit(d, s);
  auto pred = predict(f, d);
  double sp = 0.0, sy = 0.0;
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    sp += *pred.values[r];
    sy += *d.value("y", r);
  }
  EXPECT_NEAR(sp, sy, 1e-8);
}

TEST(Glm, PredictZeroModelIsHalfAndHandComputedRow) {
  auto d = oracle::random_logit_panel(2, 3, 3);
  FitResult f;
  f.spec.response = "y";
  f.spec.terms = {"x1"};
  f.coefficients = Eigen::VectorXd::Zero(1);
  auto p0 = predict(f, d);
  for (const auto& v : p0.values) EXPECT_DOUBLE_EQ(*v, 0.5);
  f.intercept = -0.4;
  f.coefficients[0] = 1.5;
  auto p1 = predict(f, d);
  const double x = *d.value("x1", 4);
  EXPECT_NEAR(*p1.values[4], 1.0 / (1.0 + std::exp(-(-0.4 + 1.5 * x))), 1e-15);
}

TEST(Glm, UnseenGroupGivesMissingPredictionAndWarning) {
  auto d = oracle::random_logit_panel(30, 6, 8);
  auto train = d.select_rows([&] {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < d.n_rows(); ++r) {
      if (d.unit_name(r) != "u5") rows.push_back(r);
    }
    return rows;
  }());
  auto f = fit(train, fe_spec());
  auto pred = predict(f, d);
  auto [lo, hi] = d.unit_rows(5);
  EXPECT_FALSE(pred.values[lo].has_value());
  ASSERT_EQ(pred.warnings.size(), 1u);
  EXPECT_NE(pred.warnings[0].find("u5"), std::string::npos);
}

TEST(Glm, SeparationIsReported) {
  Column y{{0.0, 0.0, 0.0, 1.0, 1.0, 1.0}, true};
  Column x{{-3.0, -2.0, -1.0, 1.0, 2.0, 3.0}};
  auto d = PanelDataset::from_long({"a", "a", "a", "b", "b", "b"}, {1, 2, 3, 1, 2, 3},
                                   {{"y", y}, {"x", x}});
  ModelSpec s;
  s.response = "y";
  s.terms = {"x"};
  EXPECT_THROW(fit(d, s), SeparationError);
}

TEST(Glm, NonBinaryLogisticResponseRejectedUnlessFractional) {
  auto d = oracle::random_logit_panel(6, 5, 4);
  Column y = d.column("y");
  y.values[0] = 1.4;
  y.binary = false;
  d = d.with_column("y", y);
  ModelSpec s;
  s.response = "y";
  s.terms = {"x1"};
  EXPECT_THROW(fit(d, s), ValidationError);
  s.fractional = true;
  auto f = fit(d, s);
  EXPECT_TRUE(f.converged);
}

TEST(Glm, CollinearTermsRejected) {
  auto d = oracle::random_logit_panel(6, 5, 4);
  Column x = d.column("x1");
  d = d.with_column("x3", x);
  ModelSpec s;
  s.response = "y";
  s.terms = {"x1", "x3"};
  EXPECT_THROW(fit(d, s), CollinearityError);
}

TEST(Glm, DimensionMismatchRejected) {
  auto d = oracle::random_logit_panel(6, 5, 4);
  ModelSpec s;
  s.response = "y";
  s.terms = {"x1"};
  EXPECT_THROW(loglik_and_score(d, s, Eigen::Vector3d::Zero()), ValidationError);
}
