#pragma once

// Parametric C^2 paths, the path-tangential frame, path-following error of the
// fleet barycenter and the path-parameter update law.

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "auvform/types.hpp"

namespace auvform {

struct PathDerivatives {
  Vec3 p = Vec3::Zero();    // p_p(xi)
  Vec3 dp = Vec3::Zero();   // d p_p / d xi
  Vec3 ddp = Vec3::Zero();  // d^2 p_p / d xi^2
};

// Curvature bounds a path can state about itself in closed form.
struct CurvatureBounds {
  double max_kappa = 0;
  double max_iota = 0;
  double max_theta_p = 0;
};

class PathSpec {
 public:
  virtual ~PathSpec() = default;
  virtual PathDerivatives derivatives(double xi) const = 0;
  // False when ddp is not available; curvatures then fall back to central
  // differences of the tangent angles.
  virtual bool has_second_derivative() const { return true; }
  virtual std::optional<CurvatureBounds> closed_form_bounds() const {
    return std::nullopt;
  }
  // Parameter range used when curvature bounds are found by sampling.
  virtual std::pair<double, double> sample_range() const { return {0.0, 200.0}; }
  virtual std::string kind() const = 0;
};

using PathPtr = std::shared_ptr<const PathSpec>;

// p_p(xi) = [xi, a cos(w xi), b sin(w xi)].
PathPtr spiral_path(double a, double b, double omega);
// p_p(xi) = origin + xi * direction (direction need not be unit length).
PathPtr line_path(const Vec3& origin, const Vec3& direction);
// Clamped cubic spline through waypoints, parameterised by chord length.
// Extrapolates linearly past either end.
PathPtr spline_path(const std::vector<Vec3>& waypoints);

struct PathPoint {
  Vec3 p = Vec3::Zero();
  Vec3 tangent = Vec3::Zero();  // unit tangent
  double theta_p = 0;           // positive for an upward (z decreasing) tangent
  double psi_p = 0;
  double kappa = 0;  // d theta_p / d xi
  double iota = 0;   // d psi_p / d xi
  double speed = 0;  // ||d p_p / d xi||
};

PathPoint eval_path(const PathSpec& spec, double xi);

// Central-difference curvatures of the tangent angles.
std::pair<double, double> curvatures_fd(const PathSpec& spec, double xi,
                                        double step = 1e-5);

// Largest |kappa|, |iota|, |theta_p| over `samples` evenly spaced points of the
// sample range.
CurvatureBounds sampled_bounds(const PathSpec& spec, int samples = 20001);

// Path-tangential to inertial rotation. Unlike rotation_matrix() this accepts
// vertical tangents.
Mat3 path_rotation(double theta_p, double psi_p);

// R(theta_p, psi_p)^T (p_b - p_p(xi)).
Vec3 path_error(const Vec3& p_b, const PathSpec& spec, double xi);
Vec3 path_error(const Vec3& p_b, const PathPoint& pt);

// Angular velocity of the path-tangential frame, expressed in that frame.
Vec3 path_frame_rate(const PathPoint& pt, double xi_dot);

// Speed, flight-path angle and course of one vehicle.
struct VehicleMotion {
  double U = 0;
  double gamma = 0;
  double chi = 0;
};

// From an inertial velocity, so that p_dot = U [c chi c gamma, c gamma s chi, -s gamma].
VehicleMotion motion_from_velocity(const Vec3& p_dot);

double omega_x(const VehicleMotion& m, double theta_p, double psi_p);
double omega_y(const VehicleMotion& m, double theta_p, double psi_p);
double omega_z(const VehicleMotion& m, double theta_p, double psi_p);

// Path-parameter rate with the along-track saturation term.
double xi_update(std::span<const VehicleMotion> vehicles, const PathPoint& pt,
                 double x_b_p, double k_xi);

// Time derivative of the path-following error.
Vec3 barycenter_kinematics(std::span<const VehicleMotion> vehicles,
                           const PathPoint& pt, const Vec3& p_b_p, double xi_dot);

}  // namespace auvform
