#pragma once

// Super Learner weights: cross-validated predictions, empirical risk and
// non-negative least squares on the simplex.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "csl/dataset.hpp"
#include "csl/error.hpp"
#include "csl/learners.hpp"
#include "csl/rng.hpp"

namespace csl {

// A point of the probability simplex.
class WeightVector {
 public:
  WeightVector() = default;

  explicit WeightVector(Eigen::VectorXd w) : w_(std::move(w)) {
    require(w_.size() >= 1, Errc::precondition, "weight vector must be nonempty");
    require(w_.allFinite() && (w_.array() >= 0).all(), Errc::precondition, "weights must be finite and nonnegative");
    require(std::abs(w_.sum() - 1.0) <= 1e-12, Errc::precondition, "weights must sum to one");
  }

  static WeightVector uniform(Index k) { return WeightVector(Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k))); }

  static WeightVector vertex(Index k, Index at) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(k);
    w(at) = 1.0;
    return WeightVector(std::move(w));
  }

  Index size() const { return w_.size(); }
  double operator[](Index k) const { return w_(k); }
  const Eigen::VectorXd& values() const { return w_; }

  // Index of the largest weight, lowest index on ties.
  Index argmax() const {
    Index best = 0;
    for (Index k = 1; k < w_.size(); ++k) {
      if (w_(k) > w_(best)) best = k;
    }
    return best;
  }

  bool has_dominant() const { return w_(argmax()) > 0.5; }

 private:
  Eigen::VectorXd w_;
};

// Out-of-fold predictions: z(i, k) comes from learner k fitted without
// the fold containing row i.
struct CvPredictionMatrix {
  Eigen::MatrixXd z;
  std::vector<int> fold;  // 0-based fold index per row
  int folds = 0;
};

// Seeded shuffle, then round-robin: fold sizes differ by at most one.
inline std::vector<int> assign_folds(Index n, int folds, StreamKey key) {
  require(folds >= 2, Errc::invalid_config, "fold count must be >= 2");
  require(n >= folds, Errc::degenerate_fold,
          "cannot split " + std::to_string(n) + " rows into " + std::to_string(folds) + " nonempty folds");
  const auto f = detail::round_robin_folds(n, folds, key);
  return {f.begin(), f.end()};
}

namespace detail {

// Runs body(i) for i in [0, count) on up to `threads` workers.
// The first exception is rethrown after all workers finish.
template <class Body>
void parallel_for(std::size_t count, int threads, Body&& body) {
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(count))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  auto run = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first) first = std::current_exception();
        next.store(count);
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

constexpr std::uint64_t kFoldTag = 0xF01D;
constexpr std::uint64_t kFitTag = 0xF17;

}  // namespace detail

inline CvPredictionMatrix cv_predictions(const Dataset& data, std::span<const LearnerSpec> specs, int folds,
                                         StreamKey key, int threads = 1) {
  data.validate();
  require(!specs.empty(), Errc::invalid_config, "learner library is empty");
  CvPredictionMatrix out;
  out.folds = folds;
  out.fold = assign_folds(data.rows(), folds, key.child(detail::kFoldTag));
  out.z.resize(data.rows(), static_cast<Index>(specs.size()));

  std::vector<std::vector<Index>> train(static_cast<std::size_t>(folds)), test(static_cast<std::size_t>(folds));
  for (Index i = 0; i < data.rows(); ++i) {
    for (int v = 0; v < folds; ++v) (out.fold[static_cast<std::size_t>(i)] == v ? test : train)[static_cast<std::size_t>(v)].push_back(i);
  }

  const std::size_t jobs = static_cast<std::size_t>(folds) * specs.size();
  detail::parallel_for(jobs, threads, [&](std::size_t job) {
    const auto v = static_cast<int>(job / specs.size());
    const auto k = job % specs.size();
    const auto vs = static_cast<std::size_t>(v);
    try {
      const FittedLearner f =
          fit(data.subset(train[vs]), specs[k], key.child({detail::kFitTag, static_cast<std::uint64_t>(v), k}));
      for (Index i : test[vs]) out.z(i, static_cast<Index>(k)) = f.predict(data.x.row(i).transpose()).center;
    } catch (const Error& e) {
      throw e.with_context("fold " + std::to_string(v + 1) + ", learner " + specs[k].name());
    }
  });
  return out;
}

// (1/n) sum_i (y_i - sum_k w_k z_ik)^2
inline double empirical_risk(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  require(z.rows() == y.size() && z.cols() == w.size(), Errc::precondition, "empirical_risk: dimension mismatch");
  return (y - z * w).squaredNorm() / static_cast<double>(y.size());
}

inline double empirical_risk(const CvPredictionMatrix& cv, const Eigen::VectorXd& y, const WeightVector& w) {
  return empirical_risk(cv.z, y, w.values());
}

// Lawson-Hanson active-set solver for min ||A b - y||^2 subject to b >= 0.
inline Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& y) {
  const Index k = a.cols();
  require(a.rows() == y.size(), Errc::precondition, "nnls: dimension mismatch");
  require(a.allFinite() && y.allFinite(), Errc::precondition, "nnls: non-finite input");
  Eigen::VectorXd x = Eigen::VectorXd::Zero(k);
  std::vector<bool> passive(static_cast<std::size_t>(k), false);
  const double tol = 1e-12 * std::max(1.0, (a.transpose() * y).norm());

  auto solve_passive = [&](Eigen::VectorXd& s) {
    std::vector<Index> cols;
    for (Index j = 0; j < k; ++j) {
      if (passive[static_cast<std::size_t>(j)]) cols.push_back(j);
    }
    s = Eigen::VectorXd::Zero(k);
    if (cols.empty()) return;
    Eigen::MatrixXd ap(a.rows(), static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) ap.col(static_cast<Index>(c)) = a.col(cols[c]);
    const Eigen::VectorXd sp = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(ap).solve(y);
    for (std::size_t c = 0; c < cols.size(); ++c) s(cols[c]) = sp(static_cast<Index>(c));
  };

  Eigen::VectorXd grad = a.transpose() * (y - a * x);  // negative gradient / 2
  const int max_outer = static_cast<int>(3 * k + 10);
  for (int outer = 0; outer < max_outer; ++outer) {
    Index enter = -1;
    double best = tol;
    for (Index j = 0; j < k; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && grad(j) > best) {
        best = grad(j);
        enter = j;
      }
    }
    if (enter < 0) break;
    passive[static_cast<std::size_t>(enter)] = true;

    Eigen::VectorXd s;
    for (int inner = 0; inner < 3 * k + 10; ++inner) {
      solve_passive(s);
      bool feasible = true;
      for (Index j = 0; j < k; ++j) {
        if (passive[static_cast<std::size_t>(j)] && s(j) <= 0) feasible = false;
      }
      if (feasible) break;
      double alpha = 1.0;
      for (Index j = 0; j < k; ++j) {
        if (passive[static_cast<std::size_t>(j)] && s(j) <= 0) alpha = std::min(alpha, x(j) / (x(j) - s(j)));
      }
      x += alpha * (s - x);
      for (Index j = 0; j < k; ++j) {
        if (passive[static_cast<std::size_t>(j)] && x(j) <= 1e-15 * std::max(1.0, x.cwiseAbs().maxCoeff())) {
          passive[static_cast<std::size_t>(j)] = false;
          x(j) = 0.0;
        }
      }
    }
    for (Index j = 0; j < k; ++j) x(j) = passive[static_cast<std::size_t>(j)] ? std::max(s(j), 0.0) : 0.0;
    const Eigen::VectorXd next_grad = a.transpose() * (y - a * x);
    if (next_grad(enter) >= grad(enter) && x(enter) == 0.0) {
      // the entering column could not improve the fit; stop rather than cycle
      grad = next_grad;
      break;
    }
    grad = next_grad;
  }
  return x;
}

// Super Learner weights: NNLS, then normalized onto the simplex. Falls back
// to uniform weights when the NNLS solution is identically zero.
inline WeightVector solve_simplex_weights(const Eigen::MatrixXd& z, const Eigen::VectorXd& y) {
  require(z.rows() == y.size() && z.cols() >= 1, Errc::precondition, "solve_simplex_weights: dimension mismatch");
  const Eigen::VectorXd b = nnls(z, y);
  const double total = b.sum();
  if (!(total > 0)) return WeightVector::uniform(z.cols());
  Eigen::VectorXd w = b / total;
  // renormalize once more so the sum is one to rounding
  w /= w.sum();
  return WeightVector(std::move(w));
}

inline WeightVector solve_simplex_weights(const CvPredictionMatrix& cv, const Eigen::VectorXd& y) {
  return solve_simplex_weights(cv.z, y);
}

inline double sl_point_prediction(const WeightVector& w, const Eigen::Ref<const Eigen::VectorXd>& predictions) {
  require(w.size() == predictions.size(), Errc::precondition, "sl_point_prediction: length mismatch");
  return w.values().dot(predictions);
}

}  // namespace csl
