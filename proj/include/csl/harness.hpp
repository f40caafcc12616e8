#pragma once

// Experiment orchestration: Monte Carlo coverage studies over simulated
// scenarios and single-split evaluation of CSV data.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "csl/aggregate.hpp"
#include "csl/conformal.hpp"
#include "csl/csv_io.hpp"
#include "csl/ensemble.hpp"
#include "csl/learners.hpp"
#include "csl/report.hpp"
#include "csl/simgen.hpp"

namespace csl {

struct ExperimentConfig {
  std::optional<Scenario> scenario;  // simulate
  std::string csv_path;              // csv
  std::string response = "response";
  bool log_response = false;
  double test_fraction = 0.1;

  Index n = 500;
  int replicates = 1000;
  ConformalConfig conformal;
  std::optional<double> split_fraction;  // 0.5 for simulations, 0.8 for CSV data
  int folds = 5;
  std::uint64_t seed = 1;
  int threads = 1;
  AggregationRule rule = AggregationRule::vote;

  std::vector<LearnerKind> learners;  // empty selects the scenario preset
  OlsParams ols;
  LassoParams lasso;
  KnnParams knn;
  ForestParams forest;
  LocScaleParams locscale;

  std::string out;
  ReportFormat format = ReportFormat::json;

  // Library for S1-S3 and CSV data; S4 drops locscale.
  static std::vector<LearnerKind> preset(std::optional<Scenario> s) {
    using K = LearnerKind;
    if (s == Scenario::s4) return {K::ols, K::lasso, K::knn, K::forest};
    return {K::ols, K::lasso, K::knn, K::forest, K::locscale};
  }

  std::vector<LearnerSpec> library() const {
    std::vector<LearnerSpec> specs;
    for (LearnerKind k : learners.empty() ? preset(scenario) : learners) {
      switch (k) {
        case LearnerKind::ols: specs.push_back({ols}); break;
        case LearnerKind::lasso: specs.push_back({lasso}); break;
        case LearnerKind::knn: specs.push_back({knn}); break;
        case LearnerKind::forest: specs.push_back({forest}); break;
        case LearnerKind::locscale: specs.push_back({locscale}); break;
      }
    }
    return specs;
  }

  ConformalConfig resolved_conformal() const {
    ConformalConfig c = conformal;
    c.split_fraction = split_fraction.value_or(scenario ? 0.5 : 0.8);
    return c;
  }

  void validate() const {
    require(scenario.has_value() != !csv_path.empty(), Errc::invalid_config,
            "exactly one of a scenario or a CSV path is required");
    require(replicates >= 1, Errc::invalid_config, "replicates must be >= 1");
    require(folds >= 2, Errc::invalid_config, "folds must be >= 2");
    require(threads >= 1, Errc::invalid_config, "threads must be >= 1");
    require(test_fraction > 0 && test_fraction < 1, Errc::invalid_config, "test fraction must lie in (0, 1)");
    if (scenario) require(n >= 20, Errc::invalid_config, "n must be >= 20");
    resolved_conformal().validate();
    for (const auto& s : library()) s.validate();
  }
};

// ---------------------------------------------------------------------------
// Config file: one `key = value` per line, '#' starts a comment.

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && ptr == v.data() + v.size(), Errc::invalid_config,
          "config: invalid value '" + v + "' for '" + key + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(Errc::invalid_config, "config: invalid boolean '" + v + "' for '" + key + "'");
}

}  // namespace detail

inline std::vector<LearnerKind> parse_learner_list(const std::string& v) {
  std::vector<LearnerKind> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    const auto k = parse_learner_kind(item);
    require(k.has_value(), Errc::invalid_config, "unknown learner '" + item + "'");
    out.push_back(*k);
  }
  require(!out.empty(), Errc::invalid_config, "learner list is empty");
  return out;
}

// Applies one key/value setting; keys mirror the CLI flag names.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  const std::string& v = value;
  if (key == "scenario") {
    const auto s = parse_scenario(v);
    require(s.has_value(), Errc::invalid_config, "unknown scenario '" + v + "'");
    c.scenario = s;
  } else if (key == "csv") {
    c.csv_path = v;
  } else if (key == "response") {
    c.response = v;
  } else if (key == "log-response") {
    c.log_response = detail::parse_bool(key, v);
  } else if (key == "test-fraction") {
    c.test_fraction = parse_number<double>(key, v);
  } else if (key == "n") {
    c.n = parse_number<Index>(key, v);
  } else if (key == "replicates") {
    c.replicates = parse_number<int>(key, v);
  } else if (key == "alpha") {
    c.conformal.alpha = parse_number<double>(key, v);
  } else if (key == "mode") {
    require(v == "split" || v == "full", Errc::invalid_config, "mode must be split or full");
    c.conformal.mode = v == "split" ? ConformalMode::split : ConformalMode::full;
  } else if (key == "split-fraction") {
    c.split_fraction = parse_number<double>(key, v);
  } else if (key == "grid-step") {
    c.conformal.grid_step = parse_number<double>(key, v);
  } else if (key == "grid-margin") {
    c.conformal.grid_margin = parse_number<double>(key, v);
  } else if (key == "rank-rule") {
    require(v == "training" || v == "augmented", Errc::invalid_config, "rank-rule must be training or augmented");
    c.conformal.rank_rule = v == "training" ? FullRankRule::training : FullRankRule::augmented;
  } else if (key == "folds") {
    c.folds = parse_number<int>(key, v);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "threads") {
    c.threads = parse_number<int>(key, v);
  } else if (key == "learners") {
    c.learners = parse_learner_list(v);
  } else if (key == "rule") {
    const auto r = parse_rule(v);
    require(r.has_value(), Errc::invalid_config, "unknown rule '" + v + "'");
    c.rule = *r;
  } else if (key == "out") {
    c.out = v;
  } else if (key == "format") {
    const auto f = parse_format(v);
    require(f.has_value(), Errc::invalid_config, "unknown format '" + v + "'");
    c.format = *f;
  } else if (key == "knn.k") {
    c.knn.k = parse_number<int>(key, v);
  } else if (key == "forest.trees") {
    c.forest.trees = parse_number<int>(key, v);
  } else if (key == "forest.max-depth") {
    c.forest.max_depth = parse_number<int>(key, v);
  } else if (key == "forest.min-leaf") {
    c.forest.min_leaf = parse_number<int>(key, v);
  } else if (key == "forest.mtry") {
    c.forest.features_per_split = parse_number<int>(key, v);
  } else if (key == "lasso.folds") {
    c.lasso.cv_folds = parse_number<int>(key, v);
  } else if (key == "lasso.grid-size") {
    c.lasso.grid_size = parse_number<int>(key, v);
  } else if (key == "locscale.iterations") {
    c.locscale.iterations = parse_number<int>(key, v);
  } else {
    throw Error(Errc::invalid_config, "unknown config key '" + key + "'");
  }
}

inline void parse_config(std::istream& in, ExperimentConfig& c, const std::string& origin = "<config>") {
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, Errc::invalid_config,
            origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    try {
      apply_setting(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw e.with_context(origin + ":" + std::to_string(line_no));
    }
  }
}

// ---------------------------------------------------------------------------
// CSL construction

// Split CSL state: SL weights and calibrated learners.
struct SplitCsl {
  WeightVector weights;
  std::vector<FittedLearner> learners;
  std::vector<double> thresholds;  // conformal quantile per learner

  std::vector<Interval> intervals(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    std::vector<Interval> out;
    out.reserve(learners.size());
    for (std::size_t k = 0; k < learners.size(); ++k) {
      out.push_back(invert_score(learners[k].predict(x), learners[k].score_kind(), thresholds[k]));
    }
    return out;
  }
};

namespace detail {
constexpr std::uint64_t kSplitTag = 0x5B117;
constexpr std::uint64_t kWeightTag = 0x3E16;
constexpr std::uint64_t kLearnerTag = 0x1EA7;
constexpr std::uint64_t kFullTag = 0xF011;
constexpr std::uint64_t kTestTag = 0x7E57;
}  // namespace detail

// Randomly splits `data` into training/calibration parts, estimates SL
// weights by cross-validation on the training part, fits each learner there
// and calibrates it on the held-out part.
inline SplitCsl fit_split_csl(const Dataset& data, std::span<const LearnerSpec> specs, const ConformalConfig& conf,
                              int folds, StreamKey key) {
  const Index n = data.rows();
  const auto n_train = static_cast<Index>(std::llround(conf.split_fraction * static_cast<double>(n)));
  require(n_train >= 1 && n_train < n, Errc::precondition, "split leaves an empty training or calibration set");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  CounterRng rng(key.child(detail::kSplitTag));
  shuffle(perm.begin(), perm.end(), rng);
  std::vector<Index> tr(perm.begin(), perm.begin() + n_train);
  std::vector<Index> cal(perm.begin() + n_train, perm.end());
  std::sort(tr.begin(), tr.end());
  std::sort(cal.begin(), cal.end());
  const Dataset train = data.subset(tr);
  const Dataset calib = data.subset(cal);

  SplitCsl out;
  const auto cv = cv_predictions(train, specs, folds, key.child(detail::kWeightTag));
  out.weights = solve_simplex_weights(cv, train.y);
  for (std::size_t k = 0; k < specs.size(); ++k) {
    try {
      out.learners.push_back(fit(train, specs[k], key.child({detail::kLearnerTag, k})));
    } catch (const Error& e) {
      throw e.with_context("learner " + specs[k].name());
    }
    out.thresholds.push_back(conformal_quantile(calibrate(out.learners.back(), calib), conf.alpha));
  }
  return out;
}

// Full conformal intervals for every learner at x_new.
inline std::vector<FullConformalResult> full_csl_intervals(const Dataset& data, std::span<const LearnerSpec> specs,
                                                           const Eigen::Ref<const Eigen::VectorXd>& x_new,
                                                           const ConformalConfig& conf, StreamKey key) {
  std::vector<FullConformalResult> out;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    out.push_back(full_conformal_interval(data, specs[k], x_new, conf, key.child({detail::kFullTag, k})));
    out.back().accepted.clear();
    out.back().accepted.shrink_to_fit();
  }
  return out;
}

inline ReplicateRecord make_record(std::uint64_t index, std::span<const Interval> intervals, const WeightVector& w,
                                   AggregationRule rule, double y) {
  const PredictionSet set = aggregate(rule, intervals, w);
  ReplicateRecord r;
  r.index = index;
  r.covered = set.contains(y);
  r.set = set.intervals;
  r.width = set.total_width();
  r.hull_width = set.hull_width();
  r.rule_used = set.rule_used;
  r.weights.assign(w.values().data(), w.values().data() + w.size());
  r.dominant = w.has_dominant();
  r.preferred = static_cast<std::size_t>(w.argmax());
  for (const auto& iv : intervals) {
    r.learner_covered.push_back(iv.contains(y));
    r.learner_width.push_back(iv.width());
  }
  return r;
}

namespace detail {

inline ExperimentReport report_header(const ExperimentConfig& c, std::span<const LearnerSpec> specs) {
  ExperimentReport r;
  r.source = c.scenario ? to_string(*c.scenario) : c.csv_path;
  r.mode = c.conformal.mode == ConformalMode::split ? "split" : "full";
  r.rule = to_string(c.rule);
  r.alpha = c.conformal.alpha;
  r.n = c.n;
  r.replicates = c.replicates;
  r.seed = c.seed;
  r.folds = c.folds;
  for (const auto& s : specs) r.learners.push_back(s.name());
  return r;
}

// One CSL prediction set for (x_new, y_new) built from `data`.
inline ReplicateRecord run_point(const Dataset& data, const Eigen::VectorXd& x_new, double y_new,
                                 std::span<const LearnerSpec> specs, const ExperimentConfig& c,
                                 const ConformalConfig& conf, StreamKey key, std::uint64_t index) {
  if (conf.mode == ConformalMode::split) {
    const SplitCsl csl = fit_split_csl(data, specs, conf, c.folds, key);
    const auto ivs = csl.intervals(x_new);
    return make_record(index, ivs, csl.weights, c.rule, y_new);
  }
  const auto cv = cv_predictions(data, specs, c.folds, key.child(kWeightTag));
  const WeightVector w = solve_simplex_weights(cv, data.y);
  const auto full = full_csl_intervals(data, specs, x_new, conf, key);
  std::vector<Interval> ivs;
  bool censored = false, gaps = false;
  for (const auto& f : full) {
    ivs.push_back(f.interval);
    censored = censored || f.boundary_censored;
    gaps = gaps || f.non_contiguous;
  }
  ReplicateRecord r = make_record(index, ivs, w, c.rule, y_new);
  r.censored = censored;
  r.non_contiguous = gaps;
  return r;
}

// Runs `job(i)` for each slot in parallel; csl::Error marks the slot skipped.
template <class Job>
void collect(std::size_t count, int threads, ExperimentReport& report, Job&& job) {
  std::vector<std::optional<ReplicateRecord>> slots(count);
  std::vector<std::string> errors(count);
  parallel_for(count, threads, [&](std::size_t i) {
    try {
      slots[i] = job(i);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < count; ++i) {
    if (slots[i]) report.records.push_back(std::move(*slots[i]));
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (!slots[i]) report.skipped.push_back({i, errors[i]});
  }
}

}  // namespace detail

// Monte Carlo coverage study: each replicate draws fresh data and a test
// point from the scenario, builds the CSL set and records coverage/width.
inline ExperimentReport run_simulation(const ExperimentConfig& c) {
  c.validate();
  require(c.scenario.has_value(), Errc::invalid_config, "run_simulation needs a scenario");
  const auto start = std::chrono::steady_clock::now();
  const auto specs = c.library();
  const ConformalConfig conf = c.resolved_conformal();
  ExperimentReport report = detail::report_header(c, specs);
  const StreamKey master(c.seed);

  detail::collect(static_cast<std::size_t>(c.replicates), c.threads, report, [&](std::size_t r) {
    const auto sim = generate({*c.scenario, c.n, c.seed, r});
    return detail::run_point(sim.data, sim.x_test, sim.y_test, specs, c, conf, master.child(r), r);
  });
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// Single random split of a CSV table: a test share is held out and every
// test row is predicted from a CSL built on the remaining rows.
inline ExperimentReport run_csv(const ExperimentConfig& c) {
  c.validate();
  require(!c.csv_path.empty(), Errc::invalid_config, "run_csv needs a CSV path");
  const auto start = std::chrono::steady_clock::now();
  LoadedTable table = read_table(c.csv_path, c.response);
  Dataset& data = table.data;
  if (c.log_response) {
    require((data.y.array() > 0).all(), Errc::schema, "log-response requires a strictly positive response");
    data.y = data.y.array().log().matrix();
  }
  const Index n = data.rows();
  const auto specs = c.library();
  const ConformalConfig conf = c.resolved_conformal();
  const auto n_test = static_cast<Index>(std::ceil(c.test_fraction * static_cast<double>(n)));
  require(n - n_test >= c.folds, Errc::degenerate_fold,
          "too few rows (" + std::to_string(n) + ") for " + std::to_string(c.folds) + "-fold cross-validation");

  const StreamKey master(c.seed);
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  CounterRng rng(master.child(detail::kTestTag));
  shuffle(perm.begin(), perm.end(), rng);
  std::vector<Index> test(perm.begin(), perm.begin() + n_test);
  std::vector<Index> rest(perm.begin() + n_test, perm.end());
  std::sort(test.begin(), test.end());
  std::sort(rest.begin(), rest.end());
  const Dataset fit_data = data.subset(rest);

  ExperimentReport report = detail::report_header(c, specs);
  report.n = n;
  report.replicates = n_test;

  auto to_output_scale = [&](std::vector<Interval> ivs) {
    if (c.log_response) {
      for (auto& iv : ivs) iv = {std::exp(iv.lower), std::exp(iv.upper)};
    }
    return ivs;
  };
  auto observed = [&](Index row) { return c.log_response ? std::exp(data.y(row)) : data.y(row); };

  if (conf.mode == ConformalMode::split) {
    const SplitCsl csl = fit_split_csl(fit_data, specs, conf, c.folds, master);
    detail::collect(test.size(), c.threads, report, [&](std::size_t t) {
      const Index row = test[t];
      const auto ivs = to_output_scale(csl.intervals(data.x.row(row).transpose()));
      return make_record(static_cast<std::uint64_t>(row), ivs, csl.weights, c.rule, observed(row));
    });
  } else {
    const auto cv = cv_predictions(fit_data, specs, c.folds, master.child(detail::kWeightTag));
    const WeightVector w = solve_simplex_weights(cv, fit_data.y);
    detail::collect(test.size(), c.threads, report, [&](std::size_t t) {
      const Index row = test[t];
      const auto full = full_csl_intervals(fit_data, specs, data.x.row(row).transpose(), conf, master.child(t));
      std::vector<Interval> ivs;
      bool censored = false, gaps = false;
      for (const auto& f : full) {
        ivs.push_back(f.interval);
        censored = censored || f.boundary_censored;
        gaps = gaps || f.non_contiguous;
      }
      auto rec = make_record(static_cast<std::uint64_t>(row), to_output_scale(ivs), w, c.rule, observed(row));
      rec.censored = censored;
      rec.non_contiguous = gaps;
      return rec;
    });
  }
  // skipped entries carry the test-set position; report the row instead
  for (auto& s : report.skipped) s.index = static_cast<std::uint64_t>(test[s.index]);
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace csl
