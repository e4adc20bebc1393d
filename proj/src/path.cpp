#include "auvform/path.hpp"

#include <cmath>
#include <tuple>

namespace auvform {

namespace {

class SpiralPath final : public PathSpec {
 public:
  SpiralPath(double a, double b, double omega) : a_(a), b_(b), w_(omega) {}

  PathDerivatives derivatives(double xi) const override {
    const double c = std::cos(w_ * xi), s = std::sin(w_ * xi);
    PathDerivatives d;
    d.p = Vec3(xi, a_ * c, b_ * s);
    d.dp = Vec3(1.0, -a_ * w_ * s, b_ * w_ * c);
    d.ddp = Vec3(0.0, -a_ * w_ * w_ * c, -b_ * w_ * w_ * s);
    return d;
  }

  // max|kappa| here is the value where the tangent is level (sin(w xi) = +-1);
  // sampled_bounds() gives the true maximum, which is larger.
  std::optional<CurvatureBounds> closed_form_bounds() const override {
    CurvatureBounds cb;
    cb.max_kappa = b_ * w_ * w_ / std::sqrt(a_ * a_ * w_ * w_ + 1.0);
    cb.max_iota = a_ * w_ * w_;
    cb.max_theta_p = std::atan(b_ * w_);
    return cb;
  }

  std::pair<double, double> sample_range() const override {
    return {0.0, 2.0 * kPi / w_};
  }

  std::string kind() const override { return "spiral"; }

 private:
  double a_, b_, w_;
};

class LinePath final : public PathSpec {
 public:
  LinePath(const Vec3& origin, const Vec3& direction)
      : origin_(origin), dir_(direction) {}

  PathDerivatives derivatives(double xi) const override {
    return {origin_ + xi * dir_, dir_, Vec3::Zero()};
  }

  std::optional<CurvatureBounds> closed_form_bounds() const override {
    CurvatureBounds cb;
    cb.max_theta_p =
        std::abs(std::atan2(-dir_.z(), std::hypot(dir_.x(), dir_.y())));
    return cb;
  }

  std::pair<double, double> sample_range() const override { return {0.0, 1.0}; }

  std::string kind() const override { return "line"; }

 private:
  Vec3 origin_, dir_;
};

class SplinePath final : public PathSpec {
 public:
  explicit SplinePath(const std::vector<Vec3>& pts) : y_(pts) {
    const std::size_t n = pts.size();
    if (n < 2) throw ConfigError("spline path needs at least two waypoints");
    s_.resize(n, 0.0);
    for (std::size_t i = 1; i < n; ++i) {
      const double h = (pts[i] - pts[i - 1]).norm();
      if (!(h > 0.0)) throw ConfigError("spline waypoints must be distinct");
      s_[i] = s_[i - 1] + h;
    }
    d0_ = (pts[1] - pts[0]).normalized();
    dn_ = (pts[n - 1] - pts[n - 2]).normalized();

    // Clamped end conditions; tridiagonal solve for the knot second
    // derivatives (Thomas algorithm, vector right-hand side).
    std::vector<double> lo(n, 0.0), di(n, 0.0), up(n, 0.0);
    std::vector<Vec3> rhs(n, Vec3::Zero());
    auto h = [&](std::size_t i) { return s_[i + 1] - s_[i]; };
    di[0] = 2.0 * h(0);
    up[0] = h(0);
    rhs[0] = 6.0 * ((y_[1] - y_[0]) / h(0) - d0_);
    for (std::size_t i = 1; i + 1 < n; ++i) {
      lo[i] = h(i - 1);
      di[i] = 2.0 * (h(i - 1) + h(i));
      up[i] = h(i);
      rhs[i] = 6.0 * ((y_[i + 1] - y_[i]) / h(i) - (y_[i] - y_[i - 1]) / h(i - 1));
    }
    lo[n - 1] = h(n - 2);
    di[n - 1] = 2.0 * h(n - 2);
    rhs[n - 1] = 6.0 * (dn_ - (y_[n - 1] - y_[n - 2]) / h(n - 2));
    for (std::size_t i = 1; i < n; ++i) {
      const double m = lo[i] / di[i - 1];
      di[i] -= m * up[i - 1];
      rhs[i] -= m * rhs[i - 1];
    }
    M_.assign(n, Vec3::Zero());
    M_[n - 1] = rhs[n - 1] / di[n - 1];
    for (std::size_t i = n - 1; i-- > 0;) {
      M_[i] = (rhs[i] - up[i] * M_[i + 1]) / di[i];
    }
  }

  PathDerivatives derivatives(double xi) const override {
    const std::size_t n = y_.size();
    if (xi <= 0.0) return {y_[0] + xi * d0_, d0_, Vec3::Zero()};
    if (xi >= s_[n - 1]) {
      return {y_[n - 1] + (xi - s_[n - 1]) * dn_, dn_, Vec3::Zero()};
    }
    const auto it = std::upper_bound(s_.begin(), s_.end(), xi);
    const std::size_t i = static_cast<std::size_t>(it - s_.begin()) - 1;
    const double h = s_[i + 1] - s_[i];
    const double t = xi - s_[i];
    const Vec3 b = (y_[i + 1] - y_[i]) / h - h * (2.0 * M_[i] + M_[i + 1]) / 6.0;
    const Vec3 c3 = (M_[i + 1] - M_[i]) / (6.0 * h);
    PathDerivatives d;
    d.p = y_[i] + b * t + 0.5 * M_[i] * t * t + c3 * t * t * t;
    d.dp = b + M_[i] * t + 3.0 * c3 * t * t;
    d.ddp = M_[i] + 6.0 * c3 * t;
    return d;
  }

  std::pair<double, double> sample_range() const override {
    return {0.0, s_.back()};
  }

  std::string kind() const override { return "polyline-spline"; }

 private:
  std::vector<Vec3> y_;
  std::vector<double> s_;
  std::vector<Vec3> M_;
  Vec3 d0_, dn_;
};

std::pair<double, double> tangent_angles(const Vec3& dp) {
  const double horiz = std::hypot(dp.x(), dp.y());
  return {std::atan2(-dp.z(), horiz), std::atan2(dp.y(), dp.x())};
}

}  // namespace

PathPtr spiral_path(double a, double b, double omega) {
  if (!(a > 0.0) || !(b > 0.0) || !(omega > 0.0)) {
    throw ConfigError("spiral parameters must be positive");
  }
  return std::make_shared<SpiralPath>(a, b, omega);
}

PathPtr line_path(const Vec3& origin, const Vec3& direction) {
  if (!(direction.norm() > 0.0)) throw ConfigError("line direction is zero");
  return std::make_shared<LinePath>(origin, direction);
}

PathPtr spline_path(const std::vector<Vec3>& waypoints) {
  return std::make_shared<SplinePath>(waypoints);
}

std::pair<double, double> curvatures_fd(const PathSpec& spec, double xi,
                                        double step) {
  const auto [th_p, ps_p] = tangent_angles(spec.derivatives(xi + step).dp);
  const auto [th_m, ps_m] = tangent_angles(spec.derivatives(xi - step).dp);
  return {(th_p - th_m) / (2.0 * step), wrap_angle(ps_p - ps_m) / (2.0 * step)};
}

PathPoint eval_path(const PathSpec& spec, double xi) {
  const PathDerivatives d = spec.derivatives(xi);
  PathPoint pt;
  pt.p = d.p;
  pt.speed = d.dp.norm();
  if (!(pt.speed > 0.0) || !std::isfinite(pt.speed)) {
    throw DomainError("degenerate path tangent at xi=" + std::to_string(xi));
  }
  pt.tangent = d.dp / pt.speed;
  std::tie(pt.theta_p, pt.psi_p) = tangent_angles(d.dp);
  const double h2 = d.dp.x() * d.dp.x() + d.dp.y() * d.dp.y();
  if (spec.has_second_derivative() && h2 > 0.0) {
    const double h = std::sqrt(h2);
    const double h_dot = (d.dp.x() * d.ddp.x() + d.dp.y() * d.ddp.y()) / h;
    pt.kappa = (-h * d.ddp.z() + d.dp.z() * h_dot) / (pt.speed * pt.speed);
    pt.iota = (d.dp.x() * d.ddp.y() - d.dp.y() * d.ddp.x()) / h2;
  } else {
    std::tie(pt.kappa, pt.iota) = curvatures_fd(spec, xi);
  }
  return pt;
}

CurvatureBounds sampled_bounds(const PathSpec& spec, int samples) {
  const auto [lo, hi] = spec.sample_range();
  CurvatureBounds cb;
  const int n = std::max(samples, 2);
  for (int k = 0; k < n; ++k) {
    const double xi = lo + (hi - lo) * k / (n - 1);
    const PathPoint pt = eval_path(spec, xi);
    cb.max_kappa = std::max(cb.max_kappa, std::abs(pt.kappa));
    cb.max_iota = std::max(cb.max_iota, std::abs(pt.iota));
    cb.max_theta_p = std::max(cb.max_theta_p, std::abs(pt.theta_p));
  }
  return cb;
}

Mat3 path_rotation(double theta, double psi) {
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cp = std::cos(psi), sp = std::sin(psi);
  Mat3 R;
  R << cp * ct, -sp, cp * st,
       sp * ct, cp, sp * st,
       -st, 0.0, ct;
  return R;
}

Vec3 path_error(const Vec3& p_b, const PathPoint& pt) {
  return path_rotation(pt.theta_p, pt.psi_p).transpose() * (p_b - pt.p);
}

Vec3 path_error(const Vec3& p_b, const PathSpec& spec, double xi) {
  return path_error(p_b, eval_path(spec, xi));
}

Vec3 path_frame_rate(const PathPoint& pt, double xi_dot) {
  return Vec3(-pt.iota * xi_dot * std::sin(pt.theta_p), pt.kappa * xi_dot,
              pt.iota * xi_dot * std::cos(pt.theta_p));
}

VehicleMotion motion_from_velocity(const Vec3& p_dot) {
  VehicleMotion m;
  m.U = p_dot.norm();
  if (m.U > 0.0) {
    m.gamma = safe_asin(-p_dot.z() / m.U);
    m.chi = std::atan2(p_dot.y(), p_dot.x());
  }
  return m;
}

double omega_x(const VehicleMotion& m, double theta_p, double psi_p) {
  return std::sin(theta_p) * std::sin(m.gamma) +
         std::cos(theta_p) * std::cos(m.gamma) * std::cos(psi_p - m.chi);
}

double omega_y(const VehicleMotion& m, double /*theta_p*/, double psi_p) {
  return -std::cos(m.gamma) * std::sin(psi_p - m.chi);
}

double omega_z(const VehicleMotion& m, double theta_p, double psi_p) {
  return -std::cos(theta_p) * std::sin(m.gamma) +
         std::cos(m.gamma) * std::sin(theta_p) * std::cos(psi_p - m.chi);
}

double xi_update(std::span<const VehicleMotion> vehicles, const PathPoint& pt,
                 double x_b_p, double k_xi) {
  double mean = 0.0;
  for (const VehicleMotion& m : vehicles) {
    mean += m.U * omega_x(m, pt.theta_p, pt.psi_p);
  }
  if (!vehicles.empty()) mean /= static_cast<double>(vehicles.size());
  return (mean + k_xi * x_b_p / std::sqrt(1.0 + x_b_p * x_b_p)) / pt.speed;
}

Vec3 barycenter_kinematics(std::span<const VehicleMotion> vehicles,
                           const PathPoint& pt, const Vec3& e, double xi_dot) {
  Vec3 mean = Vec3::Zero();
  for (const VehicleMotion& m : vehicles) {
    mean += m.U * Vec3(omega_x(m, pt.theta_p, pt.psi_p),
                       omega_y(m, pt.theta_p, pt.psi_p),
                       omega_z(m, pt.theta_p, pt.psi_p));
  }
  if (!vehicles.empty()) mean /= static_cast<double>(vehicles.size());
  const Vec3 w = path_frame_rate(pt, xi_dot);
  return Vec3(mean.x() - pt.speed * xi_dot + w.z() * e.y() - w.y() * e.z(),
              mean.y() + w.x() * e.z() - w.z() * e.x(),
              mean.z() + w.y() * e.x() - w.x() * e.y());
}

}  // namespace auvform
