#pragma once

// Split and full conformal prediction intervals for a single learner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "csl/dataset.hpp"
#include "csl/error.hpp"
#include "csl/learners.hpp"
#include "csl/rng.hpp"

namespace csl {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Closed interval on the extended real line.
struct Interval {
  double lower = 0.0;
  double upper = 0.0;

  bool bounded() const { return std::isfinite(lower) && std::isfinite(upper); }
  double width() const { return upper - lower; }
  bool contains(double y) const { return lower <= y && y <= upper; }

  static Interval everything() { return {-kInf, kInf}; }

  bool operator==(const Interval&) const = default;
};

// Sorted nonnegative calibration scores.
class CalibrationScores {
 public:
  CalibrationScores() = default;

  explicit CalibrationScores(std::vector<double> scores) : s_(std::move(scores)) {
    for (double v : s_) require(std::isfinite(v) && v >= 0, Errc::precondition, "scores must be finite and nonnegative");
    std::sort(s_.begin(), s_.end());
  }

  std::size_t size() const { return s_.size(); }
  bool empty() const { return s_.empty(); }
  const std::vector<double>& values() const { return s_; }

 private:
  std::vector<double> s_;
};

// r = ceil((1 - alpha)(m + 1)), the rank of the conformal quantile among m scores.
inline std::size_t conformal_rank(std::size_t m, double alpha) {
  const double r = std::ceil((1.0 - alpha) * static_cast<double>(m + 1) - 1e-9);
  return static_cast<std::size_t>(std::max(r, 1.0));
}

// The r-th smallest score, or +inf when r exceeds the number of scores.
inline double conformal_quantile(const CalibrationScores& scores, double alpha) {
  require(!scores.empty(), Errc::precondition, "conformal_quantile: no calibration scores");
  require(alpha > 0 && alpha < 1, Errc::invalid_config, "alpha must lie in (0, 1)");
  const std::size_t r = conformal_rank(scores.size(), alpha);
  return r > scores.size() ? kInf : scores.values()[r - 1];
}

inline CalibrationScores calibrate(const FittedLearner& learner, const Dataset& calibration) {
  std::vector<double> s(static_cast<std::size_t>(calibration.rows()));
  for (Index i = 0; i < calibration.rows(); ++i) {
    s[static_cast<std::size_t>(i)] = nonconformity_score(learner, calibration.x.row(i).transpose(), calibration.y(i));
  }
  return CalibrationScores(std::move(s));
}

// {y : score(y, f(x_new)) <= q} for an already computed threshold q.
inline Interval invert_score(const PointPrediction& pred, ScoreKind kind, double q) {
  if (!std::isfinite(q)) return Interval::everything();
  const double half = kind == ScoreKind::standardized ? q * pred.scale : q;
  return {pred.center - half, pred.center + half};
}

inline Interval split_conformal_interval(const FittedLearner& learner, const CalibrationScores& cal,
                                         const Eigen::Ref<const Eigen::VectorXd>& x_new, double alpha) {
  return invert_score(learner.predict(x_new), learner.score_kind(), conformal_quantile(cal, alpha));
}

enum class ConformalMode { split, full };

// Which scores the candidate's score is ranked against in full mode.
enum class FullRankRule {
  training,   // the n training scores of the augmented fit
  augmented,  // all n + 1 augmented scores (classical full conformal)
};

struct ConformalConfig {
  double alpha = 0.1;
  ConformalMode mode = ConformalMode::split;
  double split_fraction = 0.5;
  double grid_step = 1e-4;
  double grid_margin = 0.25;
  FullRankRule rank_rule = FullRankRule::training;

  void validate() const {
    require(alpha > 0 && alpha < 1, Errc::invalid_config, "alpha must lie in (0, 1)");
    require(split_fraction > 0 && split_fraction < 1, Errc::invalid_config, "split fraction must lie in (0, 1)");
    require(grid_step > 0 && std::isfinite(grid_step), Errc::invalid_config, "grid step must be positive");
    require(grid_margin >= 0 && std::isfinite(grid_margin), Errc::invalid_config, "grid margin must be nonnegative");
  }
};

struct FullConformalResult {
  Interval interval;
  bool boundary_censored = false;  // accepted set touches the end of the grid
  bool non_contiguous = false;     // raw accepted set had interior gaps
  double grid_lower = 0.0;
  double grid_step = 0.0;
  std::vector<std::uint8_t> accepted;  // per grid candidate

  double candidate(std::size_t j) const { return grid_lower + static_cast<double>(j) * grid_step; }
};

namespace detail {

// Scores of all n + 1 rows of the augmented data set for a candidate
// response, i.e. the learner refitted with (x_new, candidate) appended.
class AugmentedScorer {
 public:
  virtual ~AugmentedScorer() = default;
  virtual void scores(double candidate, Eigen::VectorXd& out) = 0;
};

class RefitScorer final : public AugmentedScorer {
 public:
  RefitScorer(const Dataset& data, const Eigen::VectorXd& x_new, const LearnerSpec& spec, StreamKey key)
      : aug_(data.augmented(x_new, 0.0)), spec_(spec), key_(key) {}

  void scores(double candidate, Eigen::VectorXd& out) override {
    aug_.y(aug_.rows() - 1) = candidate;
    const FittedLearner f = fit(aug_, spec_, key_);
    out.resize(aug_.rows());
    for (Index i = 0; i < aug_.rows(); ++i) out(i) = nonconformity_score(f, aug_.x.row(i).transpose(), aug_.y(i));
  }

 private:
  Dataset aug_;
  LearnerSpec spec_;
  StreamKey key_;
};

// OLS fitted values are linear in the response: fitted(c) = fitted(0) + c * h.
class OlsScorer final : public AugmentedScorer {
 public:
  OlsScorer(const Dataset& data, const Eigen::VectorXd& x_new, const OlsParams& params)
      : aug_(data.augmented(x_new, 0.0)) {
    const Index n1 = aug_.rows();
    const FittedLearner f0 = fit_ols(aug_, params);
    Dataset unit = aug_;
    unit.y.setZero();
    unit.y(n1 - 1) = 1.0;
    const FittedLearner fh = fit_ols(unit, params);
    base_.resize(n1);
    slope_.resize(n1);
    for (Index i = 0; i < n1; ++i) {
      base_(i) = f0.predict(aug_.x.row(i).transpose()).center;
      slope_(i) = fh.predict(aug_.x.row(i).transpose()).center;
    }
  }

  void scores(double candidate, Eigen::VectorXd& out) override {
    const Index n1 = aug_.rows();
    aug_.y(n1 - 1) = candidate;
    out = (aug_.y - base_ - candidate * slope_).cwiseAbs();
  }

 private:
  Dataset aug_;
  Eigen::VectorXd base_;
  Eigen::VectorXd slope_;
};

// Neighbour sets depend on covariates only, so they are computed once.
class KnnScorer final : public AugmentedScorer {
 public:
  KnnScorer(const Dataset& data, const Eigen::VectorXd& x_new, const KnnParams& params)
      : aug_(data.augmented(x_new, 0.0)) {
    const FittedLearner f = fit_knn(aug_, params);
    const auto& m = std::get<KnnModel>(f.model());
    nb_.reserve(static_cast<std::size_t>(aug_.rows()));
    for (Index i = 0; i < aug_.rows(); ++i) nb_.push_back(m.neighbors(aug_.x.row(i).transpose()));
  }

  void scores(double candidate, Eigen::VectorXd& out) override {
    const Index n1 = aug_.rows();
    aug_.y(n1 - 1) = candidate;
    out.resize(n1);
    for (Index i = 0; i < n1; ++i) {
      const auto& nb = nb_[static_cast<std::size_t>(i)];
      const double pred = stable_mean(nb.size(), [&](std::size_t j) { return aug_.y(nb[j]); });
      out(i) = std::abs(aug_.y(i) - pred);
    }
  }

 private:
  Dataset aug_;
  std::vector<std::vector<Index>> nb_;
};

// Trees whose bootstrap sample omits the appended row do not depend on the
// candidate. The others are replayed along the appended row's path and only
// regrown, from the same stream position, when a split decision changes.
class ForestScorer final : public AugmentedScorer {
 public:
  ForestScorer(const Dataset& data, const Eigen::VectorXd& x_new, const ForestParams& params, StreamKey key)
      : aug_(data.augmented(x_new, 0.0)), params_(params),
        grower_(aug_.x, aug_.y, params_, forest_features_per_split(params, aug_.cols())) {
    LearnerSpec{params}.validate();
    const Index n1 = aug_.rows();
    const auto trees = static_cast<std::size_t>(params.trees);
    preds_.resize(static_cast<Index>(trees), n1);
    for (std::size_t t = 0; t < trees; ++t) {
      CounterRng rng(key.child(static_cast<std::uint64_t>(t)));
      auto sample = draw_bootstrap(n1, rng);
      const bool uses_new = std::find(sample.begin(), sample.end(), n1 - 1) != sample.end();
      if (uses_new) {
        live_.push_back({t, std::move(sample), rng, {}, {}, {}});
      } else {
        const RegressionTree tree = grower_.grow(sample, rng);
        for (Index i = 0; i < n1; ++i) preds_(static_cast<Index>(t), i) = tree.predict(aug_.x.row(i).transpose());
      }
    }
  }

  void scores(double candidate, Eigen::VectorXd& out) override {
    const Index n1 = aug_.rows();
    aug_.y(n1 - 1) = candidate;
    for (auto& lt : live_) {
      const auto row = static_cast<Index>(lt.tree);
      std::optional<double> value;
      if (!lt.grown.nodes.empty()) value = replay(lt.path, aug_.x, aug_.y);
      if (value) {
        const int leaf = lt.path.steps.back().node;
        lt.grown.nodes[static_cast<std::size_t>(leaf)].value = *value;
        for (Index i : lt.leaf_members) preds_(row, i) = *value;
        continue;
      }
      CounterRng rng = lt.rng;
      lt.grown = grower_.grow(lt.sample, rng, &lt.path, n1 - 1);
      const int leaf = lt.path.steps.back().node;
      lt.leaf_members.clear();
      for (Index i = 0; i < n1; ++i) {
        const int at = lt.grown.leaf_of(aug_.x.row(i).transpose());
        preds_(row, i) = lt.grown.nodes[static_cast<std::size_t>(at)].value;
        if (at == leaf) lt.leaf_members.push_back(i);
      }
    }
    out.resize(n1);
    const auto trees = static_cast<std::size_t>(preds_.rows());
    for (Index i = 0; i < n1; ++i) {
      const double pred = stable_mean(trees, [&](std::size_t t) { return preds_(static_cast<Index>(t), i); });
      out(i) = std::abs(aug_.y(i) - pred);
    }
  }

 private:
  struct LiveTree {
    std::size_t tree;
    std::vector<Index> sample;
    CounterRng rng;
    RegressionTree grown;             // tree at the last regrown candidate
    TreePath path;                    // nodes holding the appended row
    std::vector<Index> leaf_members;  // points that land in the appended row's leaf
  };
  Dataset aug_;
  ForestParams params_;
  TreeGrower grower_;
  Eigen::MatrixXd preds_;  // trees x (n + 1)
  std::vector<LiveTree> live_;
};

inline std::unique_ptr<AugmentedScorer> make_scorer(const Dataset& data, const Eigen::VectorXd& x_new,
                                                    const LearnerSpec& spec, StreamKey key) {
  switch (spec.kind()) {
    case LearnerKind::ols:
      return std::make_unique<OlsScorer>(data, x_new, std::get<OlsParams>(spec.params));
    case LearnerKind::knn: {
      const auto& p = std::get<KnnParams>(spec.params);
      require(p.k >= 1 && p.k <= data.rows() + 1, Errc::precondition, "knn: k must lie in [1, n]");
      return std::make_unique<KnnScorer>(data, x_new, p);
    }
    case LearnerKind::forest:
      return std::make_unique<ForestScorer>(data, x_new, std::get<ForestParams>(spec.params), key);
    default:
      return std::make_unique<RefitScorer>(data, x_new, spec, key);
  }
}

}  // namespace detail

// Full conformal interval over a response grid. Every candidate y refits
// the learner on the data augmented with (x_new, y), using the same random
// stream for every candidate; y is accepted when its score does not exceed
// the conformal quantile. Returns the hull of the accepted candidates.
inline FullConformalResult full_conformal_interval(const Dataset& data, const LearnerSpec& spec,
                                                   const Eigen::Ref<const Eigen::VectorXd>& x_new,
                                                   const ConformalConfig& config, StreamKey key) {
  data.validate();
  config.validate();
  spec.validate();
  require(x_new.size() == data.cols(), Errc::precondition, "x_new has the wrong dimension");

  const double ymin = data.y.minCoeff();
  const double ymax = data.y.maxCoeff();
  const double range = ymax > ymin ? ymax - ymin : 1.0;
  const double lo = ymin - config.grid_margin * range;
  const double hi = ymax + config.grid_margin * range;
  const double span = (hi - lo) / config.grid_step;
  require(span < 5e7, Errc::invalid_config, "full conformal grid too large; increase grid_step");
  const auto count = static_cast<std::size_t>(std::floor(span + 1e-9)) + 1;

  const Eigen::VectorXd xn = x_new;
  auto scorer = detail::make_scorer(data, xn, spec, key);
  const auto n = static_cast<std::size_t>(data.rows());
  // same rank for both rules; it indexes n or n + 1 scores respectively
  const std::size_t rank = conformal_rank(n, config.alpha);

  FullConformalResult res;
  res.grid_lower = lo;
  res.grid_step = config.grid_step;
  res.accepted.assign(count, 0);

  Eigen::VectorXd s;
  std::vector<double> work;
  std::size_t first = count, last = 0, accepted = 0;
  std::size_t nearest = 0;
  double nearest_gap = kInf;
  for (std::size_t j = 0; j < count; ++j) {
    const double c = res.candidate(j);
    scorer->scores(c, s);
    const double s_new = s(static_cast<Index>(n));
    double q = kInf;
    if (config.rank_rule == FullRankRule::training) {
      if (rank <= n) {
        work.assign(s.data(), s.data() + n);
        std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(rank - 1), work.end());
        q = work[rank - 1];
      }
    } else {
      work.assign(s.data(), s.data() + n + 1);
      std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(rank - 1), work.end());
      q = work[rank - 1];
    }
    if (s_new <= q) {
      res.accepted[j] = 1;
      first = std::min(first, j);
      last = j;
      ++accepted;
    } else if (s_new - q < nearest_gap) {
      nearest_gap = s_new - q;
      nearest = j;
    }
  }

  if (accepted == 0) {
    std::ostringstream msg;
    msg << "full conformal (" << spec.name() << "): no candidate accepted among " << count
        << " grid points; nearest candidate " << res.candidate(nearest) << " exceeded the threshold by "
        << nearest_gap;
    throw Error(Errc::empty_accepted_set, msg.str());
  }
  res.interval = {res.candidate(first), res.candidate(last)};
  res.boundary_censored = first == 0 || last == count - 1;
  res.non_contiguous = accepted != last - first + 1;
  return res;
}

}  // namespace csl
