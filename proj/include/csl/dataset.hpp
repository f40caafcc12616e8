#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "csl/error.hpp"

namespace csl {

using Index = Eigen::Index;

// Covariate matrix (rows are observations) paired with the response.
struct Dataset {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;

  Index rows() const { return x.rows(); }
  Index cols() const { return x.cols(); }

  void validate() const {
    require(x.rows() >= 1 && x.cols() >= 1, Errc::schema, "dataset needs at least one row and one column");
    require(x.rows() == y.size(), Errc::schema,
            "covariate rows (" + std::to_string(x.rows()) + ") != response length (" +
                std::to_string(y.size()) + ")");
    require(x.allFinite() && y.allFinite(), Errc::schema, "dataset contains non-finite entries");
  }

  Dataset subset(std::span<const Index> idx) const {
    Dataset out{Eigen::MatrixXd(static_cast<Index>(idx.size()), x.cols()),
                Eigen::VectorXd(static_cast<Index>(idx.size()))};
    for (Index r = 0; r < static_cast<Index>(idx.size()); ++r) {
      out.x.row(r) = x.row(idx[r]);
      out.y(r) = y(idx[r]);
    }
    return out;
  }

  // Copy with one extra row (x_new, y_new) appended at index rows().
  Dataset augmented(const Eigen::Ref<const Eigen::VectorXd>& x_new, double y_new) const {
    Dataset out{Eigen::MatrixXd(x.rows() + 1, x.cols()), Eigen::VectorXd(y.size() + 1)};
    out.x.topRows(x.rows()) = x;
    out.x.row(x.rows()) = x_new.transpose();
    out.y.head(y.size()) = y;
    out.y(y.size()) = y_new;
    return out;
  }
};

// Column means and population standard deviations; zero-variance
// columns get scale 1 so they contribute nothing after centering.
struct ColumnScaling {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;
  std::vector<bool> constant;

  static ColumnScaling of(const Eigen::MatrixXd& x) {
    ColumnScaling s;
    const auto n = static_cast<double>(x.rows());
    s.mean = x.colwise().mean();
    s.scale.resize(x.cols());
    s.constant.assign(static_cast<std::size_t>(x.cols()), false);
    for (Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - s.mean(j)).square().sum() / n;
      const double sd = std::sqrt(var);
      if (!(sd > 1e-12 * (1.0 + std::abs(s.mean(j))))) {
        s.scale(j) = 1.0;
        s.constant[static_cast<std::size_t>(j)] = true;
      } else {
        s.scale(j) = sd;
      }
    }
    return s;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean).array().rowwise() / scale.array();
  }
};

}  // namespace csl
