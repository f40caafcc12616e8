#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "csl/csl.hpp"
#include "oracles.hpp"

using namespace csl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Dataset make_data(Index n, Index p, std::uint64_t seed, double noise = 1.0) {
  const StreamKey k(seed);
  Dataset d{MatrixXd(n, p), VectorXd(n)};
  for (Index i = 0; i < n; ++i) {
    double mu = 0.5;
    for (Index j = 0; j < p; ++j) {
      d.x(i, j) = standard_normal(k, static_cast<std::uint64_t>(i * 64 + j));
      mu += (0.3 * static_cast<double>(j) - 0.4) * d.x(i, j);
    }
    d.y(i) = mu + noise * standard_normal(k.child(1), static_cast<std::uint64_t>(i));
  }
  return d;
}

std::vector<LearnerSpec> all_specs() {
  std::vector<LearnerSpec> s;
  for (auto k : {LearnerKind::ols, LearnerKind::lasso, LearnerKind::knn, LearnerKind::forest, LearnerKind::locscale})
    s.push_back(LearnerSpec::defaults(k));
  return s;
}

}  // namespace

// --- ols

TEST(Ols, NoiselessLineIsRecovered) {
  Dataset d{MatrixXd(10, 1), VectorXd(10)};
  for (int i = 0; i < 10; ++i) {
    d.x(i, 0) = 0.7 * i - 2.0;
    d.y(i) = 2.0 + 3.0 * d.x(i, 0);
  }
  const auto f = fit_ols(d);
  EXPECT_NEAR(f.linear().intercept, 2.0, 1e-10);
  EXPECT_NEAR(f.linear().slopes(0), 3.0, 1e-10);
  EXPECT_EQ(f.score_kind(), ScoreKind::absolute);
}

TEST(Ols, SquareDesignIsSingular) {
  const auto d = make_data(3, 3, 1);
  try {
    fit_ols(d);
    FAIL() << "expected singular_design";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::singular_design);
  }
}

TEST(Ols, MatchesNormalEquations) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto d = make_data(50, 3, 100 + s);
    const VectorXd ref = oracle::normal_equations(d.x, d.y);
    const VectorXd got = fit_ols(d).linear().coefficients();
    EXPECT_LT((ref - got).cwiseAbs().maxCoeff(), 1e-8) << "seed " << s;
  }
}

TEST(Ols, RankDeficientUsesPseudoInverseOrFails) {
  auto d = make_data(30, 2, 4);
  d.x.conservativeResize(30, 3);
  d.x.col(2) = d.x.col(0) * 2.0;
  const auto f = fit_ols(d);
  // fitted values still equal the least-squares projection
  const auto g = fit_ols(Dataset{d.x.leftCols(2), d.y});
  for (Index i = 0; i < 30; ++i) EXPECT_NEAR(f.predict(d.x.row(i).transpose()).center, g.predict(d.x.row(i).leftCols(2).transpose()).center, 1e-9);
  EXPECT_THROW(fit_ols(d, OlsParams{false}), Error);
}

// --- lasso

TEST(Lasso, ZeroPenaltyEqualsOls) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto d = make_data(80, 4, 200 + s);
    LassoParams p;
    p.lambdas = {0.0};
    const VectorXd a = fit_lasso(d, p).linear().coefficients();
    const VectorXd b = fit_ols(d).linear().coefficients();
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Lasso, OrthonormalDesignSoftThresholds) {
  // centered +-1 Hadamard columns: X'X = n I and unit population variance
  const int h[8][3] = {{1, 1, 1}, {-1, 1, 1}, {1, -1, 1}, {-1, -1, 1}, {1, 1, -1}, {-1, 1, -1}, {1, -1, -1}, {-1, -1, -1}};
  Dataset d{MatrixXd(8, 3), VectorXd(8)};
  const StreamKey k(77);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 3; ++j) d.x(i, j) = h[i][j];
    d.y(i) = 1.0 + 0.9 * h[i][0] - 0.3 * h[i][1] + 0.05 * h[i][2] + 0.2 * standard_normal(k, i);
  }
  const VectorXd ols = fit_ols(d).linear().slopes;
  for (double lambda : {0.0, 0.01, 0.1, 0.25, 0.5, 1.0}) {
    LassoParams p;
    p.lambdas = {lambda};
    const auto f = fit_lasso(d, p);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(f.linear().slopes(j), oracle::soft_threshold(ols(j), lambda), 1e-6);
  }
}

TEST(Lasso, LargePenaltyZeroesAllSlopes) {
  const auto d = make_data(60, 5, 9);
  LassoParams p;
  p.lambdas = {detail::LassoProblem::of(d.x, d.y).lambda_max()};
  const auto f = fit_lasso(d, p);
  for (Index j = 0; j < 5; ++j) EXPECT_EQ(f.linear().slopes(j), 0.0);
  EXPECT_NEAR(f.linear().intercept, d.y.mean(), 1e-12);
}

TEST(Lasso, DefaultGridIsLogSpacedAndCvPicksFromIt) {
  const auto d = make_data(100, 4, 10);
  const auto grid = lasso_lambda_grid(d, {});
  ASSERT_EQ(grid.size(), 50u);
  EXPECT_NEAR(grid.back() / grid.front(), 1e-3, 1e-12);
  for (std::size_t i = 1; i < grid.size(); ++i) EXPECT_LT(grid[i], grid[i - 1]);
  const auto f = fit_lasso(d, {}, StreamKey(1));
  ASSERT_TRUE(f.lambda().has_value());
  EXPECT_NE(std::find(grid.begin(), grid.end(), *f.lambda()), grid.end());
}

TEST(Lasso, TooFewRowsForCvIsDegenerateFold) {
  const auto d = make_data(8, 2, 3);
  try {
    fit_lasso(d, {}, StreamKey(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::degenerate_fold);
  }
}

// --- knn

TEST(Knn, KEqualsNGivesGlobalMean) {
  const auto d = make_data(25, 2, 5);
  const auto f = fit_knn(d, {25});
  const VectorXd q = VectorXd::Constant(2, 0.3);
  EXPECT_NEAR(f.predict(q).center, d.y.mean(), 1e-12);
}

TEST(Knn, OneNeighbourAtATrainingRowReturnsItsResponse) {
  const auto d = make_data(25, 3, 6);
  const auto f = fit_knn(d, {1});
  for (Index i = 0; i < 25; ++i) EXPECT_EQ(f.predict(d.x.row(i).transpose()).center, d.y(i));
}

TEST(Knn, MatchesBruteForceSearch) {
  Dataset d{MatrixXd(10, 1), VectorXd(10)};
  const StreamKey k(12);
  for (int i = 0; i < 10; ++i) {
    d.x(i, 0) = standard_normal(k, i);
    d.y(i) = standard_normal(k, 100 + i);
  }
  const auto f = fit_knn(d, {3});
  for (double q = -3; q <= 3; q += 0.05) {
    const VectorXd qv = VectorXd::Constant(1, q);
    EXPECT_NEAR(f.predict(qv).center, oracle::knn_predict(d.x, d.y, 3, qv), 1e-12);
  }
}

TEST(Knn, TiesGoToTheLowestRow) {
  Dataset d{MatrixXd(4, 1), VectorXd(4)};
  d.x << 1, -1, 1, -1;
  d.y << 10, 20, 30, 40;
  const auto& m = std::get<KnnModel>(fit_knn(d, {1}).model());
  EXPECT_EQ(m.neighbors(VectorXd::Zero(1)).front(), 0);
}

TEST(Knn, KOutOfRangeIsPrecondition) {
  const auto d = make_data(5, 1, 1);
  EXPECT_THROW(fit_knn(d, {6}), Error);
  EXPECT_THROW(fit_knn(d, {0}), Error);
}

// --- forest

TEST(Forest, StumpPredictsBootstrapMean) {
  const auto d = make_data(30, 2, 7);
  ForestParams p;
  p.trees = 1;
  p.max_depth = 0;
  const StreamKey key(3);
  const auto f = fit_forest(d, p, key);
  CounterRng rng(key.child(0));
  const auto sample = draw_bootstrap(30, rng);
  double s = 0;
  for (Index i : sample) s += d.y(i);
  EXPECT_NEAR(f.predict(VectorXd::Zero(2)).center, s / 30, 1e-12);
}

TEST(Forest, ConstantResponseIsPredictedExactly) {
  auto d = make_data(40, 3, 8);
  d.y.setConstant(0.1);
  const auto f = fit_forest(d, {}, StreamKey(1));
  for (Index i = 0; i < 40; ++i) EXPECT_EQ(f.predict(d.x.row(i).transpose()).center, 0.1);
}

TEST(Forest, MatchesExhaustiveSplitOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto d = make_data(12, 2, 300 + s);
    ForestParams p;
    p.trees = 5;
    p.max_depth = 2;
    p.min_leaf = 2;
    p.features_per_split = 1;
    const StreamKey key(s);
    const auto f = fit_forest(d, p, key);
    const auto ref = oracle::exhaustive_forest(d.x, d.y, 5, 2, 2, 1, key);
    const auto& trees = std::get<ForestModel>(f.model()).trees;
    ASSERT_EQ(trees.size(), ref.size());
    const StreamKey qk(900 + s);
    for (int q = 0; q < 200; ++q) {
      const VectorXd x = Eigen::Vector2d(2 * standard_normal(qk, 2 * q), 2 * standard_normal(qk, 2 * q + 1));
      for (std::size_t t = 0; t < trees.size(); ++t) ASSERT_NEAR(trees[t].predict(x), ref[t].predict(x), 1e-12);
    }
  }
}

TEST(Forest, UnlimitedDepthMatchesOracleWithTwoFeatures) {
  // small bootstrap nodes often hold copies of two rows, so several features
  // induce the same partition: this exercises the tie rule too
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto d = make_data(40, 3, 55 + s);
    ForestParams p;
    p.trees = 8;
    p.min_leaf = 3;
    p.features_per_split = 2;
    const StreamKey key(8 + s);
    const auto f = fit_forest(d, p, key);
    const auto ref = oracle::exhaustive_forest(d.x, d.y, 8, 1 << 20, 3, 2, key);
    const auto& trees = std::get<ForestModel>(f.model()).trees;
    for (Index i = 0; i < 40; ++i)
      for (std::size_t t = 0; t < trees.size(); ++t)
        ASSERT_NEAR(trees[t].predict(d.x.row(i).transpose()), ref[t].predict(d.x.row(i).transpose()), 1e-12) << s;
  }
}

TEST(Forest, LeavesRespectMinimumSize) {
  const auto d = make_data(200, 3, 13);
  ForestParams p;
  p.trees = 3;
  const StreamKey key(2);
  const auto f = fit_forest(d, p, key);
  const auto& trees = std::get<ForestModel>(f.model()).trees;
  for (std::size_t t = 0; t < trees.size(); ++t) {
    CounterRng rng(key.child(t));
    const auto sample = draw_bootstrap(200, rng);
    std::vector<int> counts(trees[t].nodes.size(), 0);
    for (Index i : sample) ++counts[static_cast<std::size_t>(trees[t].leaf_of(d.x.row(i).transpose()))];
    for (std::size_t nd = 0; nd < counts.size(); ++nd) {
      if (trees[t].nodes[nd].feature < 0) {
        EXPECT_GE(counts[nd], 5);
      }
    }
    EXPECT_GT(trees[t].depth(), 2);
  }
}

TEST(Forest, DefaultFeatureCount) {
  EXPECT_EQ(forest_features_per_split({}, 3), 1);
  EXPECT_EQ(forest_features_per_split({}, 4), 2);
  EXPECT_EQ(forest_features_per_split({}, 13), 5);
}

// --- locscale

TEST(LocScale, HomoscedasticSlopesVanish) {
  const auto sim = generate({Scenario::s1, 2000, 21, 0});
  const auto f = fit_locscale(sim.data);
  const auto& m = std::get<LocScaleModel>(f.model());
  for (Index j = 0; j < 3; ++j) EXPECT_LT(std::abs(m.log_scale.slopes(j)), 0.1);
  EXPECT_NEAR(m.log_scale.intercept, std::log(0.75), 0.1);
  EXPECT_EQ(f.score_kind(), ScoreKind::standardized);
}

TEST(LocScale, RecoversHeteroscedasticScale) {
  const auto sim = generate({Scenario::s3, 5000, 22, 0});
  const auto f = fit_locscale(sim.data);
  const auto& m = std::get<LocScaleModel>(f.model());
  const double truth[] = {std::log(0.75), 0.25, 0.08, 0.18, 0.9};
  const VectorXd g = m.log_scale.coefficients();
  for (int j = 0; j < 5; ++j) EXPECT_NEAR(g(j), truth[j], 0.1) << "component " << j;
  const VectorXd b = m.mean.coefficients();
  const double mean_truth[] = {3.0, 1.5, -1.2, 1.8, 0.0};
  for (int j = 0; j < 5; ++j) EXPECT_NEAR(b(j), mean_truth[j], 0.1);
  EXPECT_FALSE(m.clamped);
}

TEST(LocScale, TooFewRowsIsPrecondition) {
  const auto d = make_data(8, 3, 1);
  try {
    fit_locscale(d);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::precondition);
  }
}

TEST(LocScale, PerfectFitClampsScale) {
  Dataset d{MatrixXd(20, 1), VectorXd(20)};
  for (int i = 0; i < 20; ++i) {
    d.x(i, 0) = i;
    d.y(i) = 1 + 2 * i;
  }
  const auto f = fit_locscale(d);
  const auto& m = std::get<LocScaleModel>(f.model());
  EXPECT_TRUE(m.clamped);
  EXPECT_GE(f.predict(VectorXd::Constant(1, 3.0)).scale, LocScaleModel::kScaleFloor);
}

// --- scores and shared properties

TEST(Scores, Arithmetic) {
  EXPECT_DOUBLE_EQ(nonconformity_score({1.5, 1.0}, ScoreKind::absolute, 2.0), 0.5);
  EXPECT_DOUBLE_EQ(nonconformity_score({0.0, 2.0}, ScoreKind::standardized, -3.0), 1.5);
  EXPECT_EQ(nonconformity_score({0.7, 3.0}, ScoreKind::absolute, 0.7), 0.0);
  EXPECT_EQ(nonconformity_score({0.7, 3.0}, ScoreKind::standardized, 0.7), 0.0);
}

TEST(Properties, PredictIsPure) {
  const auto d = make_data(120, 3, 31);
  for (const auto& s : all_specs()) {
    const auto f = fit(d, s, StreamKey(4));
    for (Index i = 0; i < 20; ++i) {
      const VectorXd x = d.x.row(i).transpose();
      const auto a = f.predict(x), b = f.predict(x);
      EXPECT_EQ(a.center, b.center);
      EXPECT_EQ(a.scale, b.scale);
    }
  }
}

TEST(Properties, ScoreIsMonotoneInDistanceFromCenter) {
  const auto d = make_data(120, 3, 32);
  const StreamKey k(6);
  for (const auto& s : all_specs()) {
    const auto f = fit(d, s, StreamKey(4));
    for (int t = 0; t < 1000; ++t) {
      const VectorXd x = Eigen::Vector3d(standard_normal(k, 5 * t), standard_normal(k, 5 * t + 1), standard_normal(k, 5 * t + 2));
      const double c = f.predict(x).center;
      const double r1 = std::abs(standard_normal(k, 5 * t + 3));
      const double r2 = r1 + std::abs(standard_normal(k, 5 * t + 4));
      const double s1 = nonconformity_score(f, x, c + r1);
      EXPECT_LE(s1, nonconformity_score(f, x, c - r2)) << s.name();
      // c +- r1 round differently, so symmetry holds to rounding only
      EXPECT_NEAR(s1, nonconformity_score(f, x, c - r1), 1e-12 * (1 + std::abs(c))) << s.name();
    }
  }
}

TEST(Properties, ForestAndKnnStayInsideResponseRange) {
  const auto d = make_data(80, 3, 33);
  const StreamKey k(7);
  for (auto kind : {LearnerKind::knn, LearnerKind::forest}) {
    const auto f = fit(d, LearnerSpec::defaults(kind), StreamKey(1));
    for (int t = 0; t < 500; ++t) {
      const VectorXd x = 3 * Eigen::Vector3d(standard_normal(k, 3 * t), standard_normal(k, 3 * t + 1), standard_normal(k, 3 * t + 2));
      const double c = f.predict(x).center;
      EXPECT_GE(c, d.y.minCoeff());
      EXPECT_LE(c, d.y.maxCoeff());
    }
  }
}

TEST(Specs, ValidationRejectsBadParameters) {
  LassoParams lp;
  lp.lambdas = {1.0, 2.0};
  EXPECT_THROW(LearnerSpec{lp}.validate(), Error);
  ForestParams fp;
  fp.trees = 0;
  EXPECT_THROW(LearnerSpec{fp}.validate(), Error);
  EXPECT_THROW(LearnerSpec{KnnParams{0}}.validate(), Error);
  EXPECT_EQ(parse_learner_kind("forest"), LearnerKind::forest);
  EXPECT_FALSE(parse_learner_kind("gam").has_value());
}
