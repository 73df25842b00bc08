#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace atmle {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using IndexVector = std::vector<int>;

// Input that violates a documented precondition (bad CSV, bad flag, bad config).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A stage of estimation could not produce a usable result.
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double expit(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double clip(double x, double lo, double hi) {
  return std::min(std::max(x, lo), hi);
}

inline double mean(const Vector& v) {
  return v.size() == 0 ? 0.0 : v.sum() / static_cast<double>(v.size());
}

// Two-sided normal quantile used for Wald intervals.
inline constexpr double kZ975 = 1.96;

}  // namespace atmle
