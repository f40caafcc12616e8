#pragma once

// Regression learners and their non-conformity scores.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "csl/dataset.hpp"
#include "csl/error.hpp"
#include "csl/rng.hpp"

namespace csl {

enum class LearnerKind { ols, lasso, knn, forest, locscale };
enum class ScoreKind { absolute, standardized };

inline const char* to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::ols: return "ols";
    case LearnerKind::lasso: return "lasso";
    case LearnerKind::knn: return "knn";
    case LearnerKind::forest: return "forest";
    case LearnerKind::locscale: return "locscale";
  }
  return "unknown";
}

inline std::optional<LearnerKind> parse_learner_kind(std::string_view s) {
  if (s == "ols") return LearnerKind::ols;
  if (s == "lasso") return LearnerKind::lasso;
  if (s == "knn") return LearnerKind::knn;
  if (s == "forest") return LearnerKind::forest;
  if (s == "locscale") return LearnerKind::locscale;
  return std::nullopt;
}

struct OlsParams {
  bool allow_pseudo_inverse = true;
};

struct LassoParams {
  // Strictly decreasing penalty grid; empty selects the automatic
  // log-spaced path from lambda_max. A single value skips cross-validation.
  std::vector<double> lambdas;
  int grid_size = 50;
  double min_ratio = 1e-3;
  int cv_folds = 10;
  double tolerance = 1e-7;
  int max_sweeps = 10000;
};

struct KnnParams {
  int k = 10;
};

struct ForestParams {
  int trees = 100;
  std::optional<int> max_depth;  // unlimited when empty
  int min_leaf = 5;
  std::optional<int> features_per_split;  // ceil(p / 3) when empty
};

struct LocScaleParams {
  int iterations = 25;
};

using LearnerParams = std::variant<OlsParams, LassoParams, KnnParams, ForestParams, LocScaleParams>;

struct LearnerSpec {
  LearnerParams params;

  LearnerKind kind() const { return static_cast<LearnerKind>(params.index()); }
  std::string name() const { return to_string(kind()); }

  static LearnerSpec defaults(LearnerKind kind) {
    switch (kind) {
      case LearnerKind::ols: return {OlsParams{}};
      case LearnerKind::lasso: return {LassoParams{}};
      case LearnerKind::knn: return {KnnParams{}};
      case LearnerKind::forest: return {ForestParams{}};
      case LearnerKind::locscale: return {LocScaleParams{}};
    }
    return {OlsParams{}};
  }

  void validate() const {
    std::visit(
        [](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, LassoParams>) {
            require(p.cv_folds >= 2, Errc::invalid_config, "lasso: cv_folds must be >= 2");
            require(p.grid_size >= 1, Errc::invalid_config, "lasso: grid_size must be >= 1");
            require(p.min_ratio > 0 && p.min_ratio < 1, Errc::invalid_config, "lasso: min_ratio must lie in (0,1)");
            require(p.tolerance > 0 && p.max_sweeps > 0, Errc::invalid_config, "lasso: tolerance and max_sweeps must be positive");
            for (std::size_t i = 0; i < p.lambdas.size(); ++i) {
              require(std::isfinite(p.lambdas[i]) && p.lambdas[i] >= 0, Errc::invalid_config,
                      "lasso: lambdas must be finite and nonnegative");
              require(i == 0 || p.lambdas[i] < p.lambdas[i - 1], Errc::invalid_config,
                      "lasso: lambda grid must be strictly decreasing");
            }
          } else if constexpr (std::is_same_v<P, KnnParams>) {
            require(p.k >= 1, Errc::invalid_config, "knn: k must be >= 1");
          } else if constexpr (std::is_same_v<P, ForestParams>) {
            require(p.trees >= 1, Errc::invalid_config, "forest: trees must be >= 1");
            require(p.min_leaf >= 1, Errc::invalid_config, "forest: min_leaf must be >= 1");
            require(!p.max_depth || *p.max_depth >= 0, Errc::invalid_config, "forest: max_depth must be >= 0");
            require(!p.features_per_split || *p.features_per_split >= 1, Errc::invalid_config,
                    "forest: features_per_split must be >= 1");
          } else if constexpr (std::is_same_v<P, LocScaleParams>) {
            require(p.iterations >= 1, Errc::invalid_config, "locscale: iterations must be >= 1");
          }
        },
        params);
  }
};

namespace detail {

// Mean computed as y0 + sum(y - y0) / m, exact when all values are equal.
template <class Get>
double stable_mean(std::size_t m, Get&& get) {
  const double base = get(0);
  double acc = 0.0;
  for (std::size_t i = 1; i < m; ++i) acc += get(i) - base;
  return base + acc / static_cast<double>(m);
}

inline Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd d(x.rows(), x.cols() + 1);
  d.col(0).setOnes();
  d.rightCols(x.cols()) = x;
  return d;
}

inline double soft_threshold(double z, double gamma) {
  if (z > gamma) return z - gamma;
  if (z < -gamma) return z + gamma;
  return 0.0;
}

}  // namespace detail

// Point prediction; scale is 1 for mean-only learners.
struct PointPrediction {
  double center = 0.0;
  double scale = 1.0;
};

struct LinearModel {
  double intercept = 0.0;
  Eigen::VectorXd slopes;

  double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const { return intercept + slopes.dot(x); }

  Eigen::VectorXd coefficients() const {
    Eigen::VectorXd c(slopes.size() + 1);
    c(0) = intercept;
    c.tail(slopes.size()) = slopes;
    return c;
  }
};

struct KnnModel {
  ColumnScaling scaling;
  Eigen::MatrixXd x_std;  // standardized training covariates
  Eigen::VectorXd y;
  int k = 1;

  // Indices of the k nearest rows, ordered by (distance, row index).
  std::vector<Index> neighbors(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const Eigen::RowVectorXd q = (x.transpose() - scaling.mean).array() / scaling.scale.array();
    return neighbors_standardized(q);
  }

  std::vector<Index> neighbors_standardized(const Eigen::Ref<const Eigen::RowVectorXd>& q) const {
    const Index n = x_std.rows();
    std::vector<std::pair<double, Index>> d(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = {(x_std.row(i) - q).squaredNorm(), i};
    const auto kk = static_cast<std::size_t>(k);
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(kk), d.end());
    std::vector<Index> out(kk);
    for (std::size_t i = 0; i < kk; ++i) out[i] = d[i].second;
    return out;
  }

  double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const auto nb = neighbors(x);
    return detail::stable_mean(nb.size(), [&](std::size_t i) { return y(nb[i]); });
  }
};

struct RegressionTree {
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };
  std::vector<Node> nodes;

  int leaf_of(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    int at = 0;
    while (nodes[static_cast<std::size_t>(at)].feature >= 0) {
      const auto& nd = nodes[static_cast<std::size_t>(at)];
      at = x(nd.feature) <= nd.threshold ? nd.left : nd.right;
    }
    return at;
  }

  double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    return nodes[static_cast<std::size_t>(leaf_of(x))].value;
  }

  int depth() const { return depth_from(0); }

 private:
  int depth_from(int at) const {
    const auto& nd = nodes[static_cast<std::size_t>(at)];
    if (nd.feature < 0) return 0;
    return 1 + std::max(depth_from(nd.left), depth_from(nd.right));
  }
};

struct ForestModel {
  std::vector<RegressionTree> trees;

  double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    return detail::stable_mean(trees.size(), [&](std::size_t t) { return trees[t].predict(x); });
  }
};

struct LocScaleModel {
  LinearModel mean;
  LinearModel log_scale;
  bool clamped = false;  // some fitted scale fell below the floor

  static constexpr double kScaleFloor = 1e-8;

  double scale(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    return std::max(std::exp(log_scale.predict(x)), kScaleFloor);
  }
};

class FittedLearner {
 public:
  using Model = std::variant<LinearModel, KnnModel, ForestModel, LocScaleModel>;

  FittedLearner(LearnerKind kind, Model model, std::optional<double> lambda = std::nullopt)
      : kind_(kind), model_(std::move(model)), lambda_(lambda) {}

  LearnerKind kind() const { return kind_; }
  ScoreKind score_kind() const {
    return kind_ == LearnerKind::locscale ? ScoreKind::standardized : ScoreKind::absolute;
  }

  PointPrediction predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    return std::visit(
        [&](const auto& m) -> PointPrediction {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, LocScaleModel>) {
            return {m.mean.predict(x), m.scale(x)};
          } else {
            return {m.predict(x), 1.0};
          }
        },
        model_);
  }

  const Model& model() const { return model_; }

  // Coefficients of ols / lasso fits.
  const LinearModel& linear() const { return std::get<LinearModel>(model_); }

  // Penalty chosen by cross-validation (lasso only).
  std::optional<double> lambda() const { return lambda_; }

 private:
  LearnerKind kind_;
  Model model_;
  std::optional<double> lambda_;
};

// ---------------------------------------------------------------------------
// Ordinary least squares

inline FittedLearner fit_ols(const Dataset& data, const OlsParams& params = {}) {
  data.validate();
  const Index n = data.rows();
  const Index p = data.cols();
  require(n > p, Errc::singular_design,
          "ols: need more rows than covariates (n=" + std::to_string(n) + ", p=" + std::to_string(p) + ")");
  const Eigen::MatrixXd design = detail::with_intercept(data.x);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  Eigen::VectorXd coef;
  if (qr.rank() == design.cols()) {
    coef = qr.solve(data.y);
  } else {
    require(params.allow_pseudo_inverse, Errc::singular_design,
            "ols: rank-deficient design (rank " + std::to_string(qr.rank()) + " of " +
                std::to_string(design.cols()) + ")");
    coef = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(design).solve(data.y);
  }
  return FittedLearner(LearnerKind::ols, LinearModel{coef(0), coef.tail(p)});
}

// ---------------------------------------------------------------------------
// LASSO: covariance-mode cyclic coordinate descent on standardized covariates.

namespace detail {

// Sufficient statistics of a standardized least-squares problem.
struct LassoProblem {
  ColumnScaling scaling;
  double y_mean = 0.0;
  Eigen::MatrixXd gram;  // X~' X~ / n
  Eigen::VectorXd corr;  // X~' (y - ybar) / n

  static LassoProblem of(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    LassoProblem pr;
    pr.scaling = ColumnScaling::of(x);
    const Eigen::MatrixXd xs = pr.scaling.apply(x);
    const auto n = static_cast<double>(x.rows());
    pr.y_mean = y.mean();
    pr.gram = xs.transpose() * xs / n;
    pr.corr = xs.transpose() * (y.array() - pr.y_mean).matrix() / n;
    for (Index j = 0; j < xs.cols(); ++j) {
      if (pr.scaling.constant[static_cast<std::size_t>(j)]) pr.corr(j) = 0.0;
    }
    return pr;
  }

  double lambda_max() const { return corr.cwiseAbs().maxCoeff(); }

  // Minimizes (1/2n)||y~ - X~ b||^2 + lambda ||b||_1 starting from beta.
  void solve(double lambda, Eigen::VectorXd& beta, double tol, int max_sweeps) const {
    const Index p = corr.size();
    Eigen::VectorXd gb = gram * beta;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
      double max_delta = 0.0;
      for (Index j = 0; j < p; ++j) {
        if (scaling.constant[static_cast<std::size_t>(j)]) continue;
        const double gjj = gram(j, j);
        const double old = beta(j);
        const double z = corr(j) - gb(j) + gjj * old;
        const double upd = soft_threshold(z, lambda) / gjj;
        if (upd != old) {
          gb.noalias() += gram.col(j) * (upd - old);
          beta(j) = upd;
          max_delta = std::max(max_delta, std::abs(upd - old));
        }
      }
      if (max_delta < tol) return;
    }
  }

  LinearModel to_original(const Eigen::VectorXd& beta) const {
    LinearModel m;
    m.slopes = (beta.array() / scaling.scale.transpose().array()).matrix();
    m.intercept = y_mean - scaling.mean.dot(m.slopes);
    return m;
  }
};

inline std::vector<Index> round_robin_folds(Index n, int folds, StreamKey key) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  CounterRng rng(key);
  shuffle(perm.begin(), perm.end(), rng);
  std::vector<Index> fold(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < perm.size(); ++i) fold[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i % static_cast<std::size_t>(folds));
  return fold;
}

}  // namespace detail

// Default penalty path: grid_size log-spaced values from lambda_max down
// to min_ratio * lambda_max.
inline std::vector<double> lasso_lambda_grid(const Dataset& data, const LassoParams& params) {
  if (!params.lambdas.empty()) return params.lambdas;
  const double lmax = detail::LassoProblem::of(data.x, data.y).lambda_max();
  if (!(lmax > 0)) return {0.0};
  std::vector<double> grid(static_cast<std::size_t>(params.grid_size));
  if (params.grid_size == 1) return {lmax};
  const double step = std::log(params.min_ratio) / static_cast<double>(params.grid_size - 1);
  for (int i = 0; i < params.grid_size; ++i) grid[static_cast<std::size_t>(i)] = lmax * std::exp(step * i);
  return grid;
}

// LASSO with the penalty chosen by K-fold cross-validation over the grid.
// The cv fold partition is drawn from `key`.
inline FittedLearner fit_lasso(const Dataset& data, const LassoParams& params = {}, StreamKey key = StreamKey{0}) {
  data.validate();
  LearnerSpec{params}.validate();
  const Index n = data.rows();
  const Index p = data.cols();
  const std::vector<double> grid = lasso_lambda_grid(data, params);

  std::size_t best = 0;
  if (grid.size() > 1) {
    require(n >= params.cv_folds, Errc::degenerate_fold,
            "lasso: " + std::to_string(params.cv_folds) + "-fold cross-validation needs at least that many rows (n=" +
                std::to_string(n) + ")");
    const auto fold = detail::round_robin_folds(n, params.cv_folds, key);
    std::vector<double> sse(grid.size(), 0.0);
    for (int v = 0; v < params.cv_folds; ++v) {
      std::vector<Index> tr, te;
      for (Index i = 0; i < n; ++i) (fold[static_cast<std::size_t>(i)] == v ? te : tr).push_back(i);
      require(!te.empty() && tr.size() >= 2, Errc::degenerate_fold, "lasso: empty cross-validation fold");
      const Dataset train = data.subset(tr);
      const Dataset test = data.subset(te);
      const auto prob = detail::LassoProblem::of(train.x, train.y);
      Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
      for (std::size_t l = 0; l < grid.size(); ++l) {
        prob.solve(grid[l], beta, params.tolerance, params.max_sweeps);
        const LinearModel m = prob.to_original(beta);
        const Eigen::VectorXd resid = (test.y.array() - m.intercept).matrix() - test.x * m.slopes;
        sse[l] += resid.squaredNorm();
      }
    }
    for (std::size_t l = 1; l < grid.size(); ++l) {
      if (sse[l] < sse[best]) best = l;
    }
  }

  const auto prob = detail::LassoProblem::of(data.x, data.y);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (std::size_t l = 0; l <= best; ++l) prob.solve(grid[l], beta, params.tolerance, params.max_sweeps);
  return FittedLearner(LearnerKind::lasso, prob.to_original(beta), grid[best]);
}

// ---------------------------------------------------------------------------
// k nearest neighbours

inline FittedLearner fit_knn(const Dataset& data, const KnnParams& params = {}) {
  data.validate();
  require(params.k >= 1 && params.k <= data.rows(), Errc::precondition,
          "knn: k must lie in [1, n] (k=" + std::to_string(params.k) + ", n=" + std::to_string(data.rows()) + ")");
  KnnModel m;
  m.scaling = ColumnScaling::of(data.x);
  m.x_std = m.scaling.apply(data.x);
  m.y = data.y;
  m.k = params.k;
  return FittedLearner(LearnerKind::knn, std::move(m));
}

// ---------------------------------------------------------------------------
// Random forest
//
// Stream protocol per tree t (key.child(t)): n bootstrap draws index(n),
// then for every splittable node in preorder a partial Fisher-Yates draw of
// the candidate features (index(p - i) for i < mtry). A node is a leaf when
// the depth limit is reached, it holds fewer than 2 * min_leaf samples, or
// its responses are all equal.

inline int forest_features_per_split(const ForestParams& params, Index p) {
  const int m = params.features_per_split ? *params.features_per_split
                                          : static_cast<int>((p + 2) / 3);
  return std::clamp(m, 1, static_cast<int>(p));
}

inline std::vector<Index> draw_bootstrap(Index n, CounterRng& rng) {
  std::vector<Index> s(static_cast<std::size_t>(n));
  for (auto& i : s) i = static_cast<Index>(rng.index(static_cast<std::uint64_t>(n)));
  return s;
}

namespace detail {

struct SplitChoice {
  int feature = -1;
  std::size_t pos = 0;  // size of the left child
  double gain = -std::numeric_limits<double>::infinity();
  double threshold = 0.0;
};

// Scans one feature's sorted order; `total` is the node's response sum.
// A candidate must beat the incumbent by `tol`, so splits that tie up to
// summation rounding (e.g. two features inducing one partition) resolve to the
// first one seen instead of to whichever rounds up.
inline void scan_feature(std::span<const Index> order, Index feat, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         std::size_t min_leaf, double total, double tol, SplitChoice& best) {
  const std::size_t m = order.size();
  double left = 0.0;
  for (std::size_t i = 0; i + 1 < m; ++i) {
    left += y(order[i]);
    const std::size_t nl = i + 1;
    const std::size_t nr = m - nl;
    if (nl < min_leaf) continue;
    if (nr < min_leaf) break;
    const double xa = x(order[i], feat);
    const double xb = x(order[i + 1], feat);
    if (!(xa < xb)) continue;
    const double right = total - left;
    const double gain = left * left / static_cast<double>(nl) + right * right / static_cast<double>(nr);
    if (gain > best.gain + tol) {
      best.gain = gain;
      best.feature = static_cast<int>(feat);
      best.pos = nl;
      best.threshold = 0.5 * (xa + xb);
      if (!(best.threshold < xb)) best.threshold = xa;
    }
  }
}

inline double order_sum(std::span<const Index> order, const Eigen::VectorXd& y) {
  double total = 0.0;
  for (Index i : order) total += y(i);
  return total;
}

// Rounding allowance for gains at a node: a few ulps of sum(y^2) per row.
inline double gain_tolerance(std::span<const Index> order, const Eigen::VectorXd& y) {
  double ss = 0.0;
  for (Index i : order) ss += y(i) * y(i);
  return 8.0 * static_cast<double>(order.size()) * std::numeric_limits<double>::epsilon() * ss;
}

inline bool all_equal(std::span<const Index> order, const Eigen::VectorXd& y) {
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (y(order[i]) != y(order[0])) return false;
  }
  return true;
}

// Record of the nodes whose sample contains one tracked row, root to leaf.
// Lets a tree be re-evaluated after that row's response changes without
// regrowing it, as long as every recorded decision comes out the same.
struct TreePath {
  struct Step {
    int node = 0;
    std::vector<Index> entry;                // sample in node-entry order
    bool forced_leaf = false;                // depth or size limit, independent of y
    bool constant = false;
    std::vector<Index> features;             // candidates drawn at this node
    std::vector<std::vector<Index>> orders;  // entry sample sorted by each candidate
    SplitChoice split;
  };
  std::vector<Step> steps;
  std::size_t min_leaf = 0;
};

// Re-evaluates the recorded path against new responses. Returns the new
// value of the final leaf, or nothing if any split decision would change.
inline std::optional<double> replay(const TreePath& path, const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  double value = 0.0;
  for (const auto& st : path.steps) {
    value = stable_mean(st.entry.size(), [&](std::size_t i) { return y(st.entry[i]); });
    if (st.forced_leaf) return value;
    if (all_equal(st.entry, y) != st.constant) return std::nullopt;
    if (st.constant) return value;
    const double total = order_sum(st.entry, y);
    const double tol = gain_tolerance(st.entry, y);
    SplitChoice best;
    for (std::size_t f = 0; f < st.features.size(); ++f) {
      scan_feature(st.orders[f], st.features[f], x, y, path.min_leaf, total, tol, best);
    }
    if (best.feature != st.split.feature || best.pos != st.split.pos) return std::nullopt;
    if (best.feature < 0) return value;
  }
  return value;
}

class TreeGrower {
 public:
  TreeGrower(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const ForestParams& params, int mtry)
      : x_(x), y_(y), params_(params), mtry_(mtry), features_(static_cast<std::size_t>(x.cols())) {}

  // When `path` is given, records the nodes containing row `tracked`.
  RegressionTree grow(std::span<const Index> sample, CounterRng& rng, TreePath* path = nullptr, Index tracked = -1) {
    idx_.assign(sample.begin(), sample.end());
    tree_.nodes.clear();
    rng_ = &rng;
    path_ = path;
    tracked_ = tracked;
    if (path_) {
      path_->steps.clear();
      path_->min_leaf = static_cast<std::size_t>(params_.min_leaf);
    }
    build(0, idx_.size(), 0);
    path_ = nullptr;
    return std::move(tree_);
  }

 private:
  std::span<const Index> range(std::size_t begin, std::size_t end) const {
    return std::span<const Index>(idx_.data() + begin, end - begin);
  }

  int build(std::size_t begin, std::size_t end, int depth) {
    const std::size_t m = end - begin;
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.push_back({});
    tree_.nodes.back().value = stable_mean(m, [&](std::size_t i) { return y_(idx_[begin + i]); });

    TreePath::Step* step = nullptr;
    if (path_ && std::find(idx_.begin() + static_cast<std::ptrdiff_t>(begin), idx_.begin() + static_cast<std::ptrdiff_t>(end),
                           tracked_) != idx_.begin() + static_cast<std::ptrdiff_t>(end)) {
      step = &path_->steps.emplace_back();
      step->node = id;
      step->entry.assign(idx_.begin() + static_cast<std::ptrdiff_t>(begin), idx_.begin() + static_cast<std::ptrdiff_t>(end));
    }

    const auto min_leaf = static_cast<std::size_t>(params_.min_leaf);
    if ((params_.max_depth && depth >= *params_.max_depth) || m < 2 * min_leaf) {
      if (step) step->forced_leaf = true;
      return id;
    }
    const bool constant = all_equal(range(begin, end), y_);
    if (step) step->constant = constant;
    if (constant) return id;

    const auto p = static_cast<std::size_t>(x_.cols());
    std::iota(features_.begin(), features_.end(), 0);
    for (std::size_t i = 0; i < static_cast<std::size_t>(mtry_); ++i) {
      const auto j = i + static_cast<std::size_t>(rng_->index(p - i));
      std::swap(features_[i], features_[j]);
    }

    const double total = order_sum(range(begin, end), y_);
    const double tol = gain_tolerance(range(begin, end), y_);
    SplitChoice best;
    for (std::size_t f = 0; f < static_cast<std::size_t>(mtry_); ++f) {
      const Index feat = features_[f];
      sort_range(begin, end, feat);
      scan_feature(range(begin, end), feat, x_, y_, min_leaf, total, tol, best);
      if (step) {
        step->features.push_back(feat);
        step->orders.emplace_back(idx_.begin() + static_cast<std::ptrdiff_t>(begin), idx_.begin() + static_cast<std::ptrdiff_t>(end));
      }
    }
    // Children append to the path and may move `step`; finish it first.
    if (step) step->split = best;
    if (best.feature < 0) return id;

    if (static_cast<Index>(features_[static_cast<std::size_t>(mtry_) - 1]) != best.feature) {
      sort_range(begin, end, best.feature);
    }
    const std::size_t mid = begin + best.pos;
    const int l = build(begin, mid, depth + 1);
    const int r = build(mid, end, depth + 1);
    auto& nd = tree_.nodes[static_cast<std::size_t>(id)];
    nd.feature = best.feature;
    nd.threshold = best.threshold;
    nd.left = l;
    nd.right = r;
    return id;
  }

  void sort_range(std::size_t begin, std::size_t end, Index feat) {
    std::sort(idx_.begin() + static_cast<std::ptrdiff_t>(begin), idx_.begin() + static_cast<std::ptrdiff_t>(end),
              [&](Index a, Index b) {
                const double xa = x_(a, feat);
                const double xb = x_(b, feat);
                return xa < xb || (xa == xb && a < b);
              });
  }

  const Eigen::MatrixXd& x_;
  const Eigen::VectorXd& y_;
  const ForestParams& params_;
  int mtry_;
  std::vector<Index> features_;
  std::vector<Index> idx_;
  RegressionTree tree_;
  CounterRng* rng_ = nullptr;
  TreePath* path_ = nullptr;
  Index tracked_ = -1;
};

}  // namespace detail

// Grows one variance-reduction tree on the given (bootstrap) sample,
// drawing candidate features from rng.
inline RegressionTree grow_tree(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::span<const Index> sample,
                                const ForestParams& params, CounterRng& rng) {
  detail::TreeGrower g(x, y, params, forest_features_per_split(params, x.cols()));
  return g.grow(sample, rng);
}

inline FittedLearner fit_forest(const Dataset& data, const ForestParams& params = {}, StreamKey key = StreamKey{0}) {
  data.validate();
  LearnerSpec{params}.validate();
  detail::TreeGrower grower(data.x, data.y, params, forest_features_per_split(params, data.cols()));
  ForestModel m;
  m.trees.reserve(static_cast<std::size_t>(params.trees));
  for (int t = 0; t < params.trees; ++t) {
    CounterRng rng(key.child(static_cast<std::uint64_t>(t)));
    const auto sample = draw_bootstrap(data.rows(), rng);
    m.trees.push_back(grower.grow(sample, rng));
  }
  return FittedLearner(LearnerKind::forest, std::move(m));
}

// ---------------------------------------------------------------------------
// Gaussian location-scale regression: mu(x) = [1 x]'beta, log sigma(x) = [1 x]'gamma.
// Alternates weighted least squares for beta with Fisher scoring for gamma.

inline FittedLearner fit_locscale(const Dataset& data, const LocScaleParams& params = {}) {
  data.validate();
  LearnerSpec{params}.validate();
  const Index n = data.rows();
  const Index p = data.cols();
  require(n > 2 * p + 2, Errc::precondition,
          "locscale: need n > 2p + 2 (n=" + std::to_string(n) + ", p=" + std::to_string(p) + ")");
  const Eigen::MatrixXd d = detail::with_intercept(data.x);
  const Eigen::VectorXd& y = data.y;
  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> ls(d);
  constexpr double floor = LocScaleModel::kScaleFloor;
  const double log_floor = std::log(floor);
  // -E log|Z| for standard normal Z
  constexpr double kLogAbsNormalBias = 0.635181422730739;

  Eigen::VectorXd beta = ls.solve(y);
  Eigen::VectorXd resid = y - d * beta;
  Eigen::VectorXd gamma = ls.solve(resid.cwiseAbs().cwiseMax(floor).array().log().matrix());
  gamma(0) += kLogAbsNormalBias;

  bool clamped = false;
  auto clamp_eta = [&](Eigen::VectorXd eta) {
    for (Index i = 0; i < n; ++i) {
      if (eta(i) < log_floor) {
        eta(i) = log_floor;
        clamped = true;
      }
    }
    return eta;
  };
  auto loglik = [&](const Eigen::VectorXd& eta) {
    return -(eta.sum() + 0.5 * (resid.array().square() * (-2.0 * eta.array()).exp()).sum());
  };

  Eigen::VectorXd eta = clamp_eta(d * gamma);
  for (int it = 0; it < params.iterations; ++it) {
    const Eigen::VectorXd sw = (-eta.array()).exp();
    const Eigen::VectorXd beta_new =
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(sw.asDiagonal() * d).solve(sw.cwiseProduct(y));
    double change = (beta_new - beta).cwiseAbs().maxCoeff();
    beta = beta_new;
    resid = y - d * beta;

    // Fisher scoring for the log-scale coefficients; the information is 2 D'D.
    const Eigen::VectorXd score = (resid.array().square() * (-2.0 * eta.array()).exp() - 1.0).matrix();
    const Eigen::VectorXd step = ls.solve(score) * 0.5;
    const double base = loglik(eta);
    double t = 1.0;
    Eigen::VectorXd gamma_new = gamma + step;
    Eigen::VectorXd eta_new = d * gamma_new;
    for (int h = 0; h < 30 && !(loglik(eta_new) >= base); ++h) {
      t *= 0.5;
      gamma_new = gamma + t * step;
      eta_new = d * gamma_new;
    }
    change = std::max(change, (gamma_new - gamma).cwiseAbs().maxCoeff());
    gamma = gamma_new;
    eta = clamp_eta(eta_new);
    if (change < 1e-10) break;
  }
  for (Index i = 0; i < n; ++i) clamped = clamped || (d.row(i).dot(gamma) < log_floor);

  LocScaleModel m;
  m.mean = LinearModel{beta(0), beta.tail(p)};
  m.log_scale = LinearModel{gamma(0), gamma.tail(p)};
  m.clamped = clamped;
  return FittedLearner(LearnerKind::locscale, std::move(m));
}

// ---------------------------------------------------------------------------

// Fits any learner; `key` seeds randomized learners (lasso folds, forest).
inline FittedLearner fit(const Dataset& data, const LearnerSpec& spec, StreamKey key) {
  spec.validate();
  return std::visit(
      [&](const auto& p) -> FittedLearner {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, OlsParams>) return fit_ols(data, p);
        else if constexpr (std::is_same_v<P, LassoParams>) return fit_lasso(data, p, key);
        else if constexpr (std::is_same_v<P, KnnParams>) return fit_knn(data, p);
        else if constexpr (std::is_same_v<P, ForestParams>) return fit_forest(data, p, key);
        else return fit_locscale(data, p);
      },
      spec.params);
}

// |y - yhat| for absolute learners, |y - mu| / sigma for location-scale ones.
inline double nonconformity_score(const PointPrediction& pred, ScoreKind kind, double y) {
  const double r = std::abs(y - pred.center);
  return kind == ScoreKind::standardized ? r / pred.scale : r;
}

inline double nonconformity_score(const FittedLearner& learner, const Eigen::Ref<const Eigen::VectorXd>& x, double y) {
  return nonconformity_score(learner.predict(x), learner.score_kind(), y);
}

}  // namespace csl
