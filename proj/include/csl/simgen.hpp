#pragma once

// Simulation scenarios S1-S4: linear, cubic, heteroscedastic and sparse
// regression with compound-symmetric Gaussian covariates.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <boost/math/distributions/normal.hpp>
#include <Eigen/Dense>

#include "csl/conformal.hpp"
#include "csl/dataset.hpp"
#include "csl/error.hpp"
#include "csl/rng.hpp"

namespace csl {

enum class Scenario { s1, s2, s3, s4 };

inline const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::s1: return "S1";
    case Scenario::s2: return "S2";
    case Scenario::s3: return "S3";
    case Scenario::s4: return "S4";
  }
  return "unknown";
}

inline std::optional<Scenario> parse_scenario(std::string_view s) {
  if (s == "S1" || s == "s1") return Scenario::s1;
  if (s == "S2" || s == "s2") return Scenario::s2;
  if (s == "S3" || s == "s3") return Scenario::s3;
  if (s == "S4" || s == "s4") return Scenario::s4;
  return std::nullopt;
}

struct ScenarioConfig {
  Scenario scenario = Scenario::s1;
  Index n = 100;
  std::uint64_t seed = 1;
  std::uint64_t replicate = 0;
};

struct SimulatedData {
  Dataset data;
  Eigen::VectorXd x_test;
  double y_test = 0.0;
};

inline Index covariate_count(Scenario s) {
  switch (s) {
    case Scenario::s1:
    case Scenario::s2: return 3;
    case Scenario::s3: return 4;
    case Scenario::s4: return 13;
  }
  return 3;
}

namespace detail {

inline constexpr double kRho = 0.5;
inline constexpr double kNoiseSd = 0.75;

// Lower Cholesky factor of the 3x3 compound-symmetric correlation matrix.
inline const std::array<std::array<double, 3>, 3>& compound_symmetric_cholesky() {
  static const auto factor = [] {
    std::array<std::array<double, 3>, 3> l{};
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j <= i; ++j) {
        double s = i == j ? 1.0 : kRho;
        for (int k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
        l[i][j] = i == j ? std::sqrt(s) : s / l[j][j];
      }
    }
    return l;
  }();
  return factor;
}

inline double linear_signal(const Eigen::Ref<const Eigen::VectorXd>& x) {
  return 1.0 + 0.5 * x(0) - 0.4 * x(1) + 0.6 * x(2);
}

// Independent draw columns per row; normals and uniforms use separate streams.
inline constexpr std::uint64_t kDrawsPerRow = 16;

}  // namespace detail

// Conditional mean of the response.
inline double scenario_mean(Scenario s, const Eigen::Ref<const Eigen::VectorXd>& x) {
  switch (s) {
    case Scenario::s1:
    case Scenario::s4: return detail::linear_signal(x);
    case Scenario::s2: return 1.0 + 0.5 * x(0) - 0.4 * x(1) + 0.5 * (0.6 * x(2) * x(2) * x(2));
    case Scenario::s3: return 3.0 * detail::linear_signal(x);
  }
  return 0.0;
}

// Conditional standard deviation of the response.
inline double scenario_sd(Scenario s, const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (s != Scenario::s3) return detail::kNoiseSd;
  return std::exp(std::log(0.75) + 0.25 * x(0) + 0.08 * x(1) + 0.18 * x(2) + 0.9 * x(3));
}

// Draws n training rows and one test point; row n of the stream is the test point.
inline SimulatedData generate(const ScenarioConfig& cfg) {
  require(cfg.n >= 20, Errc::invalid_config, "scenario sample size must be >= 20");
  const StreamKey key = StreamKey(cfg.seed).child(cfg.replicate);
  const StreamKey normals = key.child(0);
  const StreamKey uniforms = key.child(1);
  const Index p = covariate_count(cfg.scenario);
  const auto& l = detail::compound_symmetric_cholesky();

  Eigen::MatrixXd x(cfg.n + 1, p);
  Eigen::VectorXd y(cfg.n + 1);
  for (Index i = 0; i <= cfg.n; ++i) {
    const auto base = static_cast<std::uint64_t>(i) * detail::kDrawsPerRow;
    std::array<double, 3> z{};
    for (int j = 0; j < 3; ++j) z[static_cast<std::size_t>(j)] = standard_normal(normals, base + static_cast<std::uint64_t>(j));
    for (int r = 0; r < 3; ++r) {
      double v = 0.0;
      for (int c = 0; c <= r; ++c) v += l[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] * z[static_cast<std::size_t>(c)];
      x(i, r) = v;
    }
    if (cfg.scenario == Scenario::s3) x(i, 3) = uniform01(uniforms, base + 3) < 0.5 ? 1.0 : 0.0;
    if (cfg.scenario == Scenario::s4) {
      for (int j = 0; j < 5; ++j) x(i, 3 + j) = standard_normal(normals, base + 5 + static_cast<std::uint64_t>(j));
      for (int j = 0; j < 5; ++j) x(i, 8 + j) = uniform01(uniforms, base + 10 + static_cast<std::uint64_t>(j)) < 0.5 ? 1.0 : 0.0;
    }
    const Eigen::VectorXd xi = x.row(i).transpose();
    y(i) = scenario_mean(cfg.scenario, xi) + scenario_sd(cfg.scenario, xi) * standard_normal(normals, base + 4);
  }

  SimulatedData out;
  out.data.x = x.topRows(cfg.n);
  out.data.y = y.head(cfg.n);
  out.x_test = x.row(cfg.n).transpose();
  out.y_test = y(cfg.n);
  return out;
}

// Central (1 - alpha) Gaussian predictive interval under the true model.
inline Interval true_interval(Scenario s, const Eigen::Ref<const Eigen::VectorXd>& x, double alpha) {
  require(alpha > 0 && alpha <= 1, Errc::invalid_config, "alpha must lie in (0, 1]");
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - alpha / 2.0);
  const double mu = scenario_mean(s, x);
  const double half = z * scenario_sd(s, x);
  return {mu - half, mu + half};
}

}  // namespace csl
