#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace auvform {

using Vec3 = Eigen::Vector3d;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat5 = Eigen::Matrix<double, 5, 5>;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// Raised when an angle or parameter leaves the region where the model is
// defined (|theta| >= pi/2, singular mass sub-block, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Raised for malformed configuration (scenario / parameter files, overrides).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kPi = 3.14159265358979323846;

// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

// asin with the argument clamped to [-1, 1] when it overshoots by at most
// 1e-12 (rounding); larger excursions are a domain error.
inline double safe_asin(double x) {
  constexpr double kTol = 1e-12;
  if (x > 1.0 + kTol || x < -1.0 - kTol || !std::isfinite(x)) {
    throw DomainError("asin argument out of range: " + std::to_string(x));
  }
  return std::asin(std::clamp(x, -1.0, 1.0));
}

}  // namespace auvform
