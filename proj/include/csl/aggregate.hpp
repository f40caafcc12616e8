#pragma once

// Set-valued aggregation of per-learner conformal intervals.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "csl/conformal.hpp"
#include "csl/ensemble.hpp"
#include "csl/error.hpp"

namespace csl {

enum class AggregationRule { dominant, vote, intersection, union_, wta };

inline const char* to_string(AggregationRule r) {
  switch (r) {
    case AggregationRule::dominant: return "dominant";
    case AggregationRule::vote: return "vote";
    case AggregationRule::intersection: return "intersection";
    case AggregationRule::union_: return "union";
    case AggregationRule::wta: return "wta";
  }
  return "unknown";
}

inline std::optional<AggregationRule> parse_rule(std::string_view s) {
  if (s == "vote") return AggregationRule::vote;
  if (s == "intersection") return AggregationRule::intersection;
  if (s == "union") return AggregationRule::union_;
  if (s == "wta") return AggregationRule::wta;
  return std::nullopt;
}

// Finite union of sorted, disjoint, non-touching closed intervals.
struct PredictionSet {
  std::vector<Interval> intervals;
  AggregationRule rule_used = AggregationRule::vote;

  bool empty() const { return intervals.empty(); }

  double total_width() const {
    double w = 0.0;
    for (const auto& iv : intervals) w += iv.width();
    return w;
  }

  // Width of the smallest interval covering the set (0 when empty).
  double hull_width() const { return empty() ? 0.0 : intervals.back().upper - intervals.front().lower; }

  bool bounded() const { return empty() || (std::isfinite(intervals.front().lower) && std::isfinite(intervals.back().upper)); }

  bool contains(double y) const {
    for (const auto& iv : intervals) {
      if (iv.contains(y)) return true;
    }
    return false;
  }
};

namespace detail {

inline void check_inputs(std::span<const Interval> intervals, const WeightVector& w) {
  require(static_cast<Index>(intervals.size()) == w.size(), Errc::precondition,
          "aggregation: one interval per weight required");
  bool any = false;
  for (std::size_t k = 0; k < intervals.size(); ++k) {
    require(!(intervals[k].lower > intervals[k].upper), Errc::precondition, "aggregation: interval with lower > upper");
    any = any || w[static_cast<Index>(k)] > 0;
  }
  require(any, Errc::precondition, "aggregation: all weights are zero");
}

// Sorts and merges overlapping or touching closed intervals.
inline std::vector<Interval> merge(std::vector<Interval> ivs) {
  std::sort(ivs.begin(), ivs.end(), [](const Interval& a, const Interval& b) {
    return a.lower < b.lower || (a.lower == b.lower && a.upper < b.upper);
  });
  std::vector<Interval> out;
  for (const auto& iv : ivs) {
    if (!out.empty() && iv.lower <= out.back().upper) {
      out.back().upper = std::max(out.back().upper, iv.upper);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

}  // namespace detail

// {y : sum_k w_k 1{y in C_k} > 1/2}. A learner with weight above 1/2
// decides alone; otherwise the vote is swept exactly over the endpoints.
inline PredictionSet weighted_majority_vote(std::span<const Interval> intervals, const WeightVector& w) {
  detail::check_inputs(intervals, w);
  const Index top = w.argmax();
  if (w[top] > 0.5) return {{intervals[static_cast<std::size_t>(top)]}, AggregationRule::dominant};

  std::vector<std::size_t> active;
  std::vector<double> pts;
  for (std::size_t k = 0; k < intervals.size(); ++k) {
    if (!(w[static_cast<Index>(k)] > 0)) continue;
    active.push_back(k);
    for (double e : {intervals[k].lower, intervals[k].upper}) {
      if (std::isfinite(e)) pts.push_back(e);
    }
  }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());

  auto vote = [&](double y) {
    double v = 0.0;
    for (std::size_t k : active) {
      if (intervals[k].contains(y)) v += w[static_cast<Index>(k)];
    }
    return v > 0.5;
  };

  // Regions in order: (-inf, p0), {p0}, (p0, p1), {p1}, ..., {p_last}, (p_last, inf).
  // V on an open gap never exceeds V at either end (intervals are closed),
  // so every included run starts and ends at a breakpoint or at infinity.
  PredictionSet out{{}, AggregationRule::vote};
  if (pts.empty()) {
    // every active interval is (-inf, inf)
    if (vote(0.0)) out.intervals.push_back(Interval::everything());
    return out;
  }
  bool open = false;
  double open_at = 0.0;
  auto include = [&](double start) {
    if (!open) open_at = start;
    open = true;
  };
  auto exclude = [&](double end) {
    if (open) out.intervals.push_back({open_at, end});
    open = false;
  };
  if (vote(pts.front() - 1.0 - std::abs(pts.front()))) include(-kInf);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (vote(pts[i])) include(pts[i]);
    else exclude(pts[i]);
    const bool last = i + 1 == pts.size();
    const double probe = last ? pts[i] + 1.0 + std::abs(pts[i]) : pts[i] + 0.5 * (pts[i + 1] - pts[i]);
    if (!vote(probe)) exclude(pts[i]);
  }
  if (open) exclude(kInf);
  return out;
}

// Intersection of the intervals of positive-weight learners (may be empty).
inline PredictionSet aggregate_intersection(std::span<const Interval> intervals, const WeightVector& w) {
  detail::check_inputs(intervals, w);
  double lo = -kInf, hi = kInf;
  for (std::size_t k = 0; k < intervals.size(); ++k) {
    if (!(w[static_cast<Index>(k)] > 0)) continue;
    lo = std::max(lo, intervals[k].lower);
    hi = std::min(hi, intervals[k].upper);
  }
  PredictionSet out{{}, AggregationRule::intersection};
  if (lo <= hi) out.intervals.push_back({lo, hi});
  return out;
}

inline PredictionSet aggregate_union(std::span<const Interval> intervals, const WeightVector& w) {
  detail::check_inputs(intervals, w);
  std::vector<Interval> act;
  for (std::size_t k = 0; k < intervals.size(); ++k) {
    if (w[static_cast<Index>(k)] > 0) act.push_back(intervals[k]);
  }
  return {detail::merge(std::move(act)), AggregationRule::union_};
}

// Interval of the largest-weight learner; lowest index wins ties.
inline PredictionSet aggregate_wta(std::span<const Interval> intervals, const WeightVector& w) {
  detail::check_inputs(intervals, w);
  return {{intervals[static_cast<std::size_t>(w.argmax())]}, AggregationRule::wta};
}

inline PredictionSet aggregate(AggregationRule rule, std::span<const Interval> intervals, const WeightVector& w) {
  switch (rule) {
    case AggregationRule::intersection: return aggregate_intersection(intervals, w);
    case AggregationRule::union_: return aggregate_union(intervals, w);
    case AggregationRule::wta: return aggregate_wta(intervals, w);
    case AggregationRule::dominant:
    case AggregationRule::vote: break;
  }
  return weighted_majority_vote(intervals, w);
}

}  // namespace csl
