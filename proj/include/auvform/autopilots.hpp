#pragma once

// Surge, pitch and yaw sliding-mode autopilots with adaptive current
// observers, plus the second-order reference filter that supplies the
// derivatives of the guidance references.

#include <vector>

#include "auvform/types.hpp"
#include "auvform/vehicle_model.hpp"

namespace auvform {

struct AutopilotGains {
  double k_u = 0.05, k_c = 0.1, c_u = 5.0;
  double k_theta = 0.0625, k_q = 0.25, k_d = 0.1, lambda_q = 0.75, c_q = 1.0;
  double k_psi = 0.0625, k_r = 0.25, lambda_r = 0.75, c_r = 1.0;

  // Throws ConfigError unless every gain is strictly positive.
  void validate() const;
};

// How sign(.) in the sliding-mode terms is evaluated.
struct SignSmoothing {
  bool exact = false;     // true: ideal sign, false: tanh(x / epsilon)
  double epsilon = 0.01;

  double operator()(double x) const {
    if (exact) return static_cast<double>((x > 0) - (x < 0));
    return std::tanh(x / epsilon);
  }
};

struct ObserverState {
  Vec3 V_hat_c = Vec3::Zero();
  Vec9 theta_hat_q = Vec9::Zero();
  Vec9 theta_hat_r = Vec9::Zero();
};

struct References {
  double u_d = 0, u_d_dot = 0;
  double theta_d = 0, theta_d_dot = 0, theta_d_ddot = 0;
  double psi_d = 0, psi_d_dot = 0, psi_d_ddot = 0;
};

struct SurgeOutput {
  double f_u = 0;
  Vec3 V_hat_c_dot = Vec3::Zero();
};

struct PitchOutput {
  double t_q = 0;
  Vec9 theta_hat_q_dot = Vec9::Zero();
  double s_q = 0;
};

struct YawOutput {
  double t_r = 0;
  Vec9 theta_hat_r_dot = Vec9::Zero();
  double s_r = 0;
};

SurgeOutput surge_control(const VehicleState& s, const References& ref,
                          const AutopilotGains& g, const ObserverState& obs,
                          const ComponentTerms& terms, SignSmoothing sgn = {});

PitchOutput pitch_control(const VehicleState& s, const References& ref,
                          const AutopilotGains& g, const ObserverState& obs,
                          const ComponentTerms& terms, SignSmoothing sgn = {});

// The yaw error is wrapped to (-pi, pi].
YawOutput yaw_control(const VehicleState& s, const References& ref,
                      const AutopilotGains& g, const ObserverState& obs,
                      const ComponentTerms& terms, SignSmoothing sgn = {});

struct AutopilotOutput {
  GeneralizedForces forces;
  ObserverState observer_rates;
  double s_q = 0, s_r = 0;
};

AutopilotOutput autopilot(const VehicleState& s, const References& ref,
                          const AutopilotGains& g, const ObserverState& obs,
                          const ComponentTerms& terms, SignSmoothing sgn = {});

// Zeroes the outward component of an observer rate once the estimate norm
// reaches `cap`. cap <= 0 disables the projection.
template <typename Vec>
Vec cap_observer_rate(const Vec& estimate, const Vec& rate, double cap) {
  if (cap <= 0.0 || estimate.norm() < cap) return rate;
  const double outward = estimate.dot(rate);
  if (outward <= 0.0) return rate;
  return rate - estimate * (outward / estimate.squaredNorm());
}

// Critically damped second-order filter x'' = w^2 (r - x) - 2 w x' with unit
// DC gain. Produces (value, rate, acceleration) of a smoothed reference.
class ReferenceFilter {
 public:
  explicit ReferenceFilter(double omega = 2.0) : omega_(omega) {}

  double omega() const { return omega_; }

  double acceleration(double value, double rate, double input) const {
    return omega_ * omega_ * (input - value) - 2.0 * omega_ * rate;
  }

 private:
  double omega_;
};

struct FilteredSample {
  double value = 0, rate = 0, acceleration = 0;
};

// Filters a reference stream sampled at a fixed dt (input linearly
// interpolated between samples, RK4 per interval). The filter starts at rest
// on the first sample.
std::vector<FilteredSample> reference_derivatives(const std::vector<double>& raw,
                                                  double dt, double omega = 2.0);

}  // namespace auvform
