#pragma once

// Experiment reports: per-replicate records, summaries and serialization.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csl/aggregate.hpp"
#include "csl/error.hpp"

namespace csl {

enum class ReportFormat { json, csv, table };

inline std::optional<ReportFormat> parse_format(std::string_view s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  if (s == "table") return ReportFormat::table;
  return std::nullopt;
}

struct ReplicateRecord {
  std::uint64_t index = 0;
  bool covered = false;
  double width = 0.0;       // total measure of the set
  double hull_width = 0.0;  // width of its convex hull
  std::vector<Interval> set;
  AggregationRule rule_used = AggregationRule::vote;
  std::vector<double> weights;
  bool dominant = false;
  std::size_t preferred = 0;
  std::vector<bool> learner_covered;
  std::vector<double> learner_width;
  bool censored = false;        // a full-conformal grid edge was reached
  bool non_contiguous = false;  // a full-conformal accepted set had gaps

  bool bounded() const { return std::isfinite(width); }

  bool operator==(const ReplicateRecord&) const = default;
};

struct SkippedReplicate {
  std::uint64_t index = 0;
  std::string error;

  bool operator==(const SkippedReplicate&) const = default;
};

struct ExperimentReport {
  std::string source;  // scenario tag or CSV path
  std::string mode;
  std::string rule;
  double alpha = 0.1;
  std::int64_t n = 0;
  std::int64_t replicates = 0;
  std::uint64_t seed = 0;
  int folds = 5;
  std::vector<std::string> learners;
  std::vector<ReplicateRecord> records;
  std::vector<SkippedReplicate> skipped;
  double runtime_seconds = 0.0;  // not serialized unless requested

  bool operator==(const ExperimentReport& o) const {
    return source == o.source && mode == o.mode && rule == o.rule && alpha == o.alpha && n == o.n &&
           replicates == o.replicates && seed == o.seed && folds == o.folds && learners == o.learners &&
           records == o.records && skipped == o.skipped;
  }
};

struct LearnerSummary {
  std::string name;
  double mean_weight = 0.0;
  double dominant = 0.0;   // fraction with weight > 1/2
  double preferred = 0.0;  // fraction attaining the largest weight
  double coverage = 0.0;
  double mean_width = 0.0;  // over bounded intervals
};

struct ReportSummary {
  std::size_t completed = 0;
  std::size_t skipped = 0;
  std::optional<double> coverage;
  std::optional<double> coverage_se;
  std::optional<double> mean_width;
  std::optional<double> mean_hull_width;
  std::size_t unbounded = 0;
  std::size_t censored = 0;
  std::size_t non_contiguous = 0;
  std::size_t multi_component = 0;
  double dominant_rate = 0.0;  // replicates with some weight > 1/2
  std::optional<std::size_t> modal_learner;
  double modal_dominant = 0.0;
  double modal_preferred = 0.0;
  std::vector<LearnerSummary> learners;
};

inline ReportSummary summarize(const ExperimentReport& r) {
  ReportSummary s;
  s.completed = r.records.size();
  s.skipped = r.skipped.size();
  const std::size_t k = r.learners.size();
  s.learners.resize(k);
  for (std::size_t j = 0; j < k; ++j) s.learners[j].name = r.learners[j];
  if (s.completed == 0) return s;

  const auto total = static_cast<double>(s.completed);
  double cov = 0.0, width = 0.0, hull = 0.0, dom = 0.0;
  std::size_t bounded = 0;
  std::vector<std::size_t> learner_bounded(k, 0);
  for (const auto& rec : r.records) {
    cov += rec.covered ? 1.0 : 0.0;
    dom += rec.dominant ? 1.0 : 0.0;
    if (rec.bounded()) {
      width += rec.width;
      hull += rec.hull_width;
      ++bounded;
    } else {
      ++s.unbounded;
    }
    s.censored += rec.censored ? 1 : 0;
    s.non_contiguous += rec.non_contiguous ? 1 : 0;
    s.multi_component += rec.set.size() > 1 ? 1 : 0;
    for (std::size_t j = 0; j < k && j < rec.weights.size(); ++j) {
      auto& ls = s.learners[j];
      ls.mean_weight += rec.weights[j];
      ls.dominant += rec.weights[j] > 0.5 ? 1.0 : 0.0;
      ls.preferred += rec.preferred == j ? 1.0 : 0.0;
      ls.coverage += rec.learner_covered[j] ? 1.0 : 0.0;
      if (std::isfinite(rec.learner_width[j])) {
        ls.mean_width += rec.learner_width[j];
        ++learner_bounded[j];
      }
    }
  }
  s.coverage = cov / total;
  s.coverage_se = std::sqrt(*s.coverage * (1.0 - *s.coverage) / total);
  if (bounded > 0) {
    s.mean_width = width / static_cast<double>(bounded);
    s.mean_hull_width = hull / static_cast<double>(bounded);
  }
  s.dominant_rate = dom / total;
  for (std::size_t j = 0; j < k; ++j) {
    auto& ls = s.learners[j];
    ls.mean_weight /= total;
    ls.dominant /= total;
    ls.preferred /= total;
    ls.coverage /= total;
    ls.mean_width = learner_bounded[j] > 0 ? ls.mean_width / static_cast<double>(learner_bounded[j]) : kInf;
  }
  if (k > 0) {
    std::size_t modal = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (s.learners[j].preferred > s.learners[modal].preferred) modal = j;
    }
    s.modal_learner = modal;
    s.modal_dominant = s.learners[modal].dominant;
    s.modal_preferred = s.learners[modal].preferred;
  }
  return s;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

using nlohmann::json;

// Non-finite values have no JSON literal: +-inf become the strings "inf" / "-inf".
inline json num(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double from_num(const json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (j.is_string()) return j.get<std::string>() == "inf" ? kInf : -kInf;
  return j.get<double>();
}

inline json opt(const std::optional<double>& v) { return v ? num(*v) : json(nullptr); }

inline AggregationRule rule_from(const std::string& s) {
  if (s == "dominant") return AggregationRule::dominant;
  if (auto r = parse_rule(s)) return *r;
  throw Error(Errc::schema, "unknown aggregation rule '" + s + "' in report");
}

}  // namespace detail

inline nlohmann::json summary_to_json(const ReportSummary& s) {
  using detail::json;
  json learners = json::array();
  for (const auto& l : s.learners) {
    learners.push_back({{"name", l.name},
                        {"mean_weight", detail::num(l.mean_weight)},
                        {"dominant", detail::num(l.dominant)},
                        {"preferred", detail::num(l.preferred)},
                        {"coverage", detail::num(l.coverage)},
                        {"mean_width", detail::num(l.mean_width)}});
  }
  return {{"completed", s.completed},
          {"skipped", s.skipped},
          {"coverage", detail::opt(s.coverage)},
          {"coverage_se", detail::opt(s.coverage_se)},
          {"mean_width", detail::opt(s.mean_width)},
          {"mean_hull_width", detail::opt(s.mean_hull_width)},
          {"unbounded", s.unbounded},
          {"censored", s.censored},
          {"non_contiguous", s.non_contiguous},
          {"multi_component", s.multi_component},
          {"dominant_rate", detail::num(s.dominant_rate)},
          {"modal_learner", s.modal_learner ? json(s.learners[*s.modal_learner].name) : json(nullptr)},
          {"modal_dominant", detail::num(s.modal_dominant)},
          {"modal_preferred", detail::num(s.modal_preferred)},
          {"learners", learners}};
}

inline nlohmann::json report_to_json(const ExperimentReport& r, bool timing = false) {
  using detail::json;
  json records = json::array();
  for (const auto& rec : r.records) {
    json set = json::array();
    for (const auto& iv : rec.set) set.push_back({detail::num(iv.lower), detail::num(iv.upper)});
    json widths = json::array();
    for (double w : rec.learner_width) widths.push_back(detail::num(w));
    records.push_back({{"replicate", rec.index},
                       {"covered", rec.covered},
                       {"width", detail::num(rec.width)},
                       {"hull_width", detail::num(rec.hull_width)},
                       {"set", set},
                       {"rule", to_string(rec.rule_used)},
                       {"weights", rec.weights},
                       {"dominant", rec.dominant},
                       {"preferred", r.learners.empty() ? json(rec.preferred) : json(r.learners[rec.preferred])},
                       {"learner_covered", rec.learner_covered},
                       {"learner_width", widths},
                       {"censored", rec.censored},
                       {"non_contiguous", rec.non_contiguous}});
  }
  json skipped = json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"replicate", s.index}, {"error", s.error}});
  json out = {{"config",
               {{"source", r.source},
                {"mode", r.mode},
                {"rule", r.rule},
                {"alpha", r.alpha},
                {"n", r.n},
                {"replicates", r.replicates},
                {"seed", r.seed},
                {"folds", r.folds},
                {"learners", r.learners}}},
              {"summary", summary_to_json(summarize(r))},
              {"records", records},
              {"skipped", skipped}};
  if (timing) out["runtime_seconds"] = r.runtime_seconds;
  return out;
}

inline ExperimentReport report_from_json(const nlohmann::json& j) {
  try {
    ExperimentReport r;
    const auto& c = j.at("config");
    r.source = c.at("source").get<std::string>();
    r.mode = c.at("mode").get<std::string>();
    r.rule = c.at("rule").get<std::string>();
    r.alpha = c.at("alpha").get<double>();
    r.n = c.at("n").get<std::int64_t>();
    r.replicates = c.at("replicates").get<std::int64_t>();
    r.seed = c.at("seed").get<std::uint64_t>();
    r.folds = c.at("folds").get<int>();
    r.learners = c.at("learners").get<std::vector<std::string>>();
    for (const auto& jr : j.at("records")) {
      ReplicateRecord rec;
      rec.index = jr.at("replicate").get<std::uint64_t>();
      rec.covered = jr.at("covered").get<bool>();
      rec.width = detail::from_num(jr.at("width"));
      rec.hull_width = detail::from_num(jr.at("hull_width"));
      for (const auto& iv : jr.at("set")) rec.set.push_back({detail::from_num(iv.at(0)), detail::from_num(iv.at(1))});
      rec.rule_used = detail::rule_from(jr.at("rule").get<std::string>());
      rec.weights = jr.at("weights").get<std::vector<double>>();
      rec.dominant = jr.at("dominant").get<bool>();
      const auto& pref = jr.at("preferred");
      if (pref.is_string()) {
        const auto name = pref.get<std::string>();
        const auto it = std::find(r.learners.begin(), r.learners.end(), name);
        require(it != r.learners.end(), Errc::schema, "unknown preferred learner '" + name + "'");
        rec.preferred = static_cast<std::size_t>(it - r.learners.begin());
      } else {
        rec.preferred = pref.get<std::size_t>();
      }
      rec.learner_covered = jr.at("learner_covered").get<std::vector<bool>>();
      for (const auto& w : jr.at("learner_width")) rec.learner_width.push_back(detail::from_num(w));
      rec.censored = jr.at("censored").get<bool>();
      rec.non_contiguous = jr.at("non_contiguous").get<bool>();
      r.records.push_back(std::move(rec));
    }
    for (const auto& js : j.at("skipped")) {
      r.skipped.push_back({js.at("replicate").get<std::uint64_t>(), js.at("error").get<std::string>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::schema, std::string("malformed report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV and table

namespace detail {

inline std::string full_precision(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline std::string sig6(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

inline std::string sig6(const std::optional<double>& v) { return v ? sig6(*v) : "NA"; }

}  // namespace detail

inline void write_report_csv(const ExperimentReport& r, std::ostream& os) {
  os << "replicate,covered,width,hull_width,components,rule,dominant,preferred,censored,non_contiguous";
  for (const auto& l : r.learners) os << ",w_" << l;
  for (const auto& l : r.learners) os << ",covered_" << l;
  for (const auto& l : r.learners) os << ",width_" << l;
  os << '\n';
  for (const auto& rec : r.records) {
    os << rec.index << ',' << (rec.covered ? 1 : 0) << ',' << detail::full_precision(rec.width) << ','
       << detail::full_precision(rec.hull_width) << ',' << rec.set.size() << ',' << to_string(rec.rule_used) << ','
       << (rec.dominant ? 1 : 0) << ','
       << (rec.preferred < r.learners.size() ? r.learners[rec.preferred] : std::to_string(rec.preferred)) << ','
       << (rec.censored ? 1 : 0) << ',' << (rec.non_contiguous ? 1 : 0);
    for (double w : rec.weights) os << ',' << detail::full_precision(w);
    for (bool c : rec.learner_covered) os << ',' << (c ? 1 : 0);
    for (double w : rec.learner_width) os << ',' << detail::full_precision(w);
    os << '\n';
  }
}

inline void write_report_table(const ExperimentReport& r, std::ostream& os) {
  const auto s = summarize(r);
  os << "source      " << r.source << '\n'
     << "mode        " << r.mode << '\n'
     << "rule        " << r.rule << '\n'
     << "alpha       " << detail::sig6(r.alpha) << '\n'
     << "n           " << r.n << '\n'
     << "replicates  " << s.completed << " completed, " << s.skipped << " skipped\n"
     << "coverage    " << detail::sig6(s.coverage) << " (se " << detail::sig6(s.coverage_se) << ")\n"
     << "mean width  " << detail::sig6(s.mean_width) << " (hull " << detail::sig6(s.mean_hull_width) << ")\n"
     << "unbounded   " << s.unbounded << '\n'
     << "dominant    " << detail::sig6(s.dominant_rate) << '\n';
  if (s.modal_learner) {
    os << "modal       " << s.learners[*s.modal_learner].name << " (dominant " << detail::sig6(s.modal_dominant)
       << ", preferred " << detail::sig6(s.modal_preferred) << ")\n";
  }
  os << '\n' << std::left << std::setw(10) << "learner" << std::right << std::setw(12) << "weight" << std::setw(12)
     << "dominant" << std::setw(12) << "preferred" << std::setw(12) << "coverage" << std::setw(12) << "width" << '\n';
  for (const auto& l : s.learners) {
    os << std::left << std::setw(10) << l.name << std::right << std::setw(12) << detail::sig6(l.mean_weight)
       << std::setw(12) << detail::sig6(l.dominant) << std::setw(12) << detail::sig6(l.preferred) << std::setw(12)
       << detail::sig6(l.coverage) << std::setw(12) << detail::sig6(l.mean_width) << '\n';
  }
  if (!r.records.empty()) {
    os << '\n' << std::setw(10) << "replicate" << std::setw(9) << "covered" << std::setw(12) << "width"
       << std::setw(10) << "rule" << "  set\n";
    for (const auto& rec : r.records) {
      os << std::setw(10) << rec.index << std::setw(9) << (rec.covered ? "yes" : "no") << std::setw(12)
         << detail::sig6(rec.width) << std::setw(10) << to_string(rec.rule_used) << "  ";
      for (std::size_t i = 0; i < rec.set.size(); ++i) {
        os << (i ? " u " : "") << '[' << detail::sig6(rec.set[i].lower) << ", " << detail::sig6(rec.set[i].upper) << ']';
      }
      if (rec.set.empty()) os << "{}";
      os << '\n';
    }
  }
  for (const auto& sk : r.skipped) os << "skipped replicate " << sk.index << ": " << sk.error << '\n';
}

inline void emit_report(const ExperimentReport& r, ReportFormat format, std::ostream& os, bool timing = false) {
  switch (format) {
    case ReportFormat::json: os << report_to_json(r, timing).dump(2) << '\n'; break;
    case ReportFormat::csv: write_report_csv(r, os); break;
    case ReportFormat::table: write_report_table(r, os); break;
  }
}

// Writes to `path`, or to `fallback` when path is empty.
inline void emit_report(const ExperimentReport& r, ReportFormat format, const std::string& path, std::ostream& fallback,
                        bool timing = false) {
  if (path.empty()) {
    emit_report(r, format, fallback, timing);
    return;
  }
  std::ofstream f(path);
  require(static_cast<bool>(f), Errc::io, "cannot open report file '" + path + "' for writing");
  emit_report(r, format, f, timing);
  f.flush();
  require(static_cast<bool>(f), Errc::io, "failed writing report file '" + path + "'");
}

}  // namespace csl
