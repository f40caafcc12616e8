#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "csl/csl.hpp"
#include "oracles.hpp"

using namespace csl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

VectorXd random_simplex(Index k, StreamKey key, std::uint64_t c) {
  VectorXd w(k);
  for (Index j = 0; j < k; ++j) w(j) = -std::log(uniform01(key, c * 16 + static_cast<std::uint64_t>(j)));
  return w / w.sum();
}

// NNLS KKT conditions at tolerance tol * ||Z'y||.
void expect_kkt(const MatrixXd& z, const VectorXd& y, const VectorXd& b, double tol) {
  const VectorXd grad = z.transpose() * (z * b - y);
  const double scale = (z.transpose() * y).norm();
  for (Index k = 0; k < b.size(); ++k) {
    ASSERT_GE(b(k), 0.0);
    if (b(k) > 0) EXPECT_LE(std::abs(grad(k)), tol * scale) << "active " << k;
    else EXPECT_GE(grad(k), -tol * scale) << "inactive " << k;
  }
}

}  // namespace

TEST(WeightVector, Invariants) {
  EXPECT_THROW(WeightVector(Eigen::Vector2d(0.5, 0.6)), Error);
  EXPECT_THROW(WeightVector(Eigen::Vector2d(-0.1, 1.1)), Error);
  const auto u = WeightVector::uniform(4);
  EXPECT_NEAR(u.values().sum(), 1.0, 1e-15);
  EXPECT_EQ(WeightVector::vertex(3, 2)[2], 1.0);
  EXPECT_EQ(WeightVector(Eigen::Vector2d(0.5, 0.5)).argmax(), 0);
  EXPECT_FALSE(WeightVector(Eigen::Vector2d(0.5, 0.5)).has_dominant());
  EXPECT_TRUE(WeightVector(Eigen::Vector2d(0.6, 0.4)).has_dominant());
}

TEST(Folds, BalancedDeterministicAndValidated) {
  const auto a = assign_folds(23, 5, StreamKey(1));
  EXPECT_EQ(a, assign_folds(23, 5, StreamKey(1)));
  std::vector<int> counts(5, 0);
  for (int f : a) ++counts[static_cast<std::size_t>(f)];
  EXPECT_EQ(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()), 1);
  EXPECT_THROW(assign_folds(3, 5, StreamKey(1)), Error);
  EXPECT_THROW(assign_folds(10, 1, StreamKey(1)), Error);
}

TEST(CvPredictions, ExactModelReproducesResponse) {
  Dataset d{MatrixXd(30, 2), VectorXd(30)};
  const StreamKey k(2);
  for (int i = 0; i < 30; ++i) {
    d.x(i, 0) = standard_normal(k, 2 * i);
    d.x(i, 1) = standard_normal(k, 2 * i + 1);
    d.y(i) = 1 - 2 * d.x(i, 0) + 0.5 * d.x(i, 1);
  }
  const std::vector<LearnerSpec> specs{LearnerSpec::defaults(LearnerKind::ols)};
  const auto cv = cv_predictions(d, specs, 5, StreamKey(3));
  EXPECT_LT((cv.z.col(0) - d.y).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(CvPredictions, LeaveOneOutNearestNeighbour) {
  Dataset d{MatrixXd(8, 1), VectorXd(8)};
  const StreamKey k(4);
  for (int i = 0; i < 8; ++i) {
    d.x(i, 0) = standard_normal(k, i);
    d.y(i) = standard_normal(k, 50 + i);
  }
  const std::vector<LearnerSpec> specs{{KnnParams{1}}};
  const auto cv = cv_predictions(d, specs, 8, StreamKey(5));
  for (Index i = 0; i < 8; ++i) {
    Index best = -1;
    for (Index j = 0; j < 8; ++j) {
      if (j == i) continue;
      if (best < 0 || std::abs(d.x(j, 0) - d.x(i, 0)) < std::abs(d.x(best, 0) - d.x(i, 0))) best = j;
    }
    EXPECT_EQ(cv.z(i, 0), d.y(best));
  }
}

TEST(CvPredictions, OutOfFoldAndThreadIndependent) {
  const auto sim = generate({Scenario::s1, 60, 1, 0});
  std::vector<LearnerSpec> specs;
  for (auto kind : {LearnerKind::ols, LearnerKind::knn, LearnerKind::forest}) specs.push_back(LearnerSpec::defaults(kind));
  const auto a = cv_predictions(sim.data, specs, 5, StreamKey(9), 1);
  const auto b = cv_predictions(sim.data, specs, 5, StreamKey(9), 4);
  EXPECT_EQ(a.fold, b.fold);
  EXPECT_TRUE((a.z.array() == b.z.array()).all());
  // column 0 must equal OLS fitted without the row's fold
  for (int v = 0; v < 5; ++v) {
    std::vector<Index> tr;
    for (Index i = 0; i < 60; ++i)
      if (a.fold[static_cast<std::size_t>(i)] != v) tr.push_back(i);
    const auto f = fit_ols(sim.data.subset(tr));
    for (Index i = 0; i < 60; ++i) {
      if (a.fold[static_cast<std::size_t>(i)] == v) {
        EXPECT_DOUBLE_EQ(a.z(i, 0), f.predict(sim.data.x.row(i).transpose()).center);
      }
    }
  }
}

TEST(CvPredictions, ErrorsNameFoldAndLearner) {
  const auto sim = generate({Scenario::s1, 20, 1, 0});
  const std::vector<LearnerSpec> specs{{KnnParams{19}}};
  try {
    cv_predictions(sim.data, specs, 5, StreamKey(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("learner knn"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("fold"), std::string::npos);
  }
}

TEST(Risk, Arithmetic) {
  MatrixXd z(2, 2);
  z << 1, 3, 2, 0;
  EXPECT_EQ(empirical_risk(z, Eigen::Vector2d(2, 1), Eigen::Vector2d(0.5, 0.5)), 0.0);
  EXPECT_EQ(empirical_risk(z, z.col(1), Eigen::Vector2d(0, 1)), 0.0);
}

TEST(Risk, MatchesLoopOracle) {
  const StreamKey k(6);
  for (int t = 0; t < 50; ++t) {
    MatrixXd z(7, 3);
    VectorXd y(7);
    for (int i = 0; i < 7; ++i) {
      y(i) = standard_normal(k, 100 * t + i);
      for (int j = 0; j < 3; ++j) z(i, j) = standard_normal(k, 100 * t + 10 + 3 * i + j);
    }
    const VectorXd w = random_simplex(3, k.child(1), t);
    double s = 0;
    for (int i = 0; i < 7; ++i) {
      double p = 0;
      for (int j = 0; j < 3; ++j) p += w(j) * z(i, j);
      s += (y(i) - p) * (y(i) - p);
    }
    EXPECT_NEAR(empirical_risk(z, y, w), s / 7, 1e-12);
  }
}

TEST(Risk, ConvexInWeights) {
  const StreamKey k(7);
  MatrixXd z(40, 4);
  VectorXd y(40);
  for (int i = 0; i < 40; ++i) {
    y(i) = standard_normal(k, i);
    for (int j = 0; j < 4; ++j) z(i, j) = y(i) + (j + 1) * 0.3 * standard_normal(k, 1000 + 4 * i + j);
  }
  for (int t = 0; t < 200; ++t) {
    const VectorXd a = random_simplex(4, k.child(2), t), b = random_simplex(4, k.child(3), t);
    const double s = uniform01(k.child(4), t);
    EXPECT_LE(empirical_risk(z, y, s * a + (1 - s) * b), s * empirical_risk(z, y, a) + (1 - s) * empirical_risk(z, y, b) + 1e-10);
  }
}

TEST(Nnls, MatchesSupportEnumerationAndKkt) {
  const StreamKey k(8);
  for (int t = 0; t < 300; ++t) {
    const int kk = 1 + t % 4;
    const int n = 6 + t % 30;
    MatrixXd z(n, kk);
    VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      y(i) = standard_normal(k, 1000 * t + i);
      for (int j = 0; j < kk; ++j) z(i, j) = (j % 2 ? -0.5 : 1.0) * y(i) + standard_normal(k, 1000 * t + 100 + 5 * i + j);
    }
    const VectorXd b = nnls(z, y);
    expect_kkt(z, y, b, 1e-8);
    const VectorXd ref = oracle::nnls_enumerate(z, y);
    EXPECT_NEAR((z * b - y).squaredNorm(), (z * ref - y).squaredNorm(), 1e-9 * (1 + y.squaredNorm()));
  }
}

TEST(SimplexWeights, SingletonAndZeroFallback) {
  const MatrixXd z = MatrixXd::Constant(5, 1, 2.0);
  EXPECT_EQ(solve_simplex_weights(z, VectorXd::Ones(5)).values()(0), 1.0);
  MatrixXd neg(4, 2);
  neg << 1, 1, 1, 1, 1, 1, 1, 1;
  const auto w = solve_simplex_weights(neg, -VectorXd::Ones(4));
  EXPECT_EQ(w[0], 0.5);
  EXPECT_EQ(w[1], 0.5);
}

TEST(SimplexWeights, PerfectColumnWinsAgainstOrthogonalJunk) {
  VectorXd y(8);
  y << 1, 2, 3, 4, 5, 6, 7, 8;
  MatrixXd z(8, 2);
  z.col(0) = y;
  // junk orthogonal to y
  VectorXd junk(8);
  junk << 1, -1, -1, 1, 1, -1, -1, 1;
  junk -= junk.dot(y) / y.squaredNorm() * y;
  z.col(1) = junk;
  const auto w = solve_simplex_weights(z, y);
  EXPECT_NEAR(w[0], 1.0, 1e-6);
  EXPECT_NEAR(empirical_risk(z, y, w.values()), oracle::simplex_grid_min_risk(z, y, 1e-4), 1e-6);
}

TEST(SimplexWeights, IdenticalColumnsAreRiskOptimal) {
  const auto sim = generate({Scenario::s1, 50, 3, 0});
  MatrixXd z(50, 2);
  z.col(0) = sim.data.y + 0.3 * sim.data.x.col(0);
  z.col(1) = z.col(0);
  const auto w = solve_simplex_weights(z, sim.data.y);
  EXPECT_NEAR(empirical_risk(z, sim.data.y, w.values()), empirical_risk(z, sim.data.y, Eigen::Vector2d(1, 0)), 1e-12);
}

TEST(SimplexWeights, RiskAgreesWithGridOracle) {
  // y = Z w* + e with e orthogonal to the columns of Z: NNLS and the simplex
  // optimum coincide, so the grid oracle's risk is the target.
  const StreamKey k(10);
  for (int t = 0; t < 20; ++t) {
    const int kk = 2 + t % 2;
    const int n = 30;
    MatrixXd z(n, kk);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < kk; ++j) z(i, j) = standard_normal(k, 1000 * t + kk * i + j);
    VectorXd w = random_simplex(kk, k.child(1), t);
    if (t % 5 == 0) {
      w(0) = 0;
      w /= w.sum();
    }
    VectorXd e(n);
    for (int i = 0; i < n; ++i) e(i) = 0.5 * standard_normal(k.child(2), 100 * t + i);
    const MatrixXd q = z.householderQr().householderQ() * MatrixXd::Identity(n, kk);
    e -= q * (q.transpose() * e);
    const VectorXd y = z * w + e;
    const auto got = solve_simplex_weights(z, y);
    expect_kkt(z, y, nnls(z, y), 1e-8);
    EXPECT_NEAR(empirical_risk(z, y, got.values()), oracle::simplex_grid_min_risk(z, y, 1e-4), 1e-6);
    for (int s = 0; s < 200; ++s) {
      EXPECT_LE(empirical_risk(z, y, got.values()), empirical_risk(z, y, random_simplex(kk, k.child(3), 1000 * t + s)) + 1e-8);
    }
  }
}

TEST(SlPoint, Examples) {
  EXPECT_EQ(sl_point_prediction(WeightVector::vertex(3, 1), Eigen::Vector3d(5, 7, 9)), 7.0);
  EXPECT_NEAR(sl_point_prediction(WeightVector::uniform(3), Eigen::Vector3d(0, 3, 6)), 3.0, 1e-15);
  const StreamKey k(11);
  for (int t = 0; t < 50; ++t) {
    const WeightVector w(random_simplex(4, k, t));
    VectorXd p(4);
    double s = 0;
    for (int j = 0; j < 4; ++j) {
      p(j) = standard_normal(k.child(1), 4 * t + j);
      s += w[j] * p(j);
    }
    EXPECT_NEAR(sl_point_prediction(w, p), s, 1e-12);
  }
}

TEST(ParallelFor, RethrowsFirstError) {
  std::vector<int> hit(100, 0);
  detail::parallel_for(100, 4, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 100);
  EXPECT_THROW(detail::parallel_for(10, 3, [](std::size_t i) {
                 if (i == 5) throw Error(Errc::precondition, "boom");
               }),
               Error);
}
