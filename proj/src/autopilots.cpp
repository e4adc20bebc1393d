#include "auvform/autopilots.hpp"

#include <cmath>

namespace auvform {

void AutopilotGains::validate() const {
  const double all[] = {k_u,      k_c, c_u,   k_theta,  k_q, k_d,
                        lambda_q, c_q, k_psi, k_r, lambda_r, c_r};
  for (double g : all) {
    if (!(g > 0.0) || !std::isfinite(g)) {
      throw ConfigError("autopilot gains must be strictly positive");
    }
  }
}

SurgeOutput surge_control(const VehicleState& s, const References& ref,
                          const AutopilotGains& g, const ObserverState& obs,
                          const ComponentTerms& terms, SignSmoothing sgn) {
  const double u_err = s.nu[0] - ref.u_d;
  SurgeOutput out;
  out.f_u = ref.u_d_dot - terms.F_u - terms.phi_u.dot(obs.V_hat_c) -
            g.k_u * u_err - g.k_c * sgn(u_err);
  out.V_hat_c_dot = g.c_u * terms.phi_u * u_err;
  return out;
}

PitchOutput pitch_control(const VehicleState& s, const References& ref,
                          const AutopilotGains& g, const ObserverState& obs,
                          const ComponentTerms& terms, SignSmoothing sgn) {
  const double theta_err = s.theta() - ref.theta_d;
  const double q_err = s.nu[3] - ref.theta_d_dot;
  PitchOutput out;
  out.s_q = q_err + g.lambda_q * theta_err;
  out.t_q = ref.theta_d_ddot - terms.F_q - terms.phi_q.dot(obs.theta_hat_q) -
            g.lambda_q * q_err - g.k_theta * theta_err - g.k_q * out.s_q -
            g.k_d * sgn(out.s_q);
  out.theta_hat_q_dot = g.c_q * terms.phi_q * out.s_q;
  return out;
}

YawOutput yaw_control(const VehicleState& s, const References& ref,
                      const AutopilotGains& g, const ObserverState& obs,
                      const ComponentTerms& terms, SignSmoothing sgn) {
  const double theta = s.theta();
  if (!(std::abs(theta) < kPi / 2)) {
    throw DomainError("yaw control requires |theta| < pi/2");
  }
  const double ct = std::cos(theta);
  const double q = s.nu[3], r = s.nu[4];
  const double psi_err = wrap_angle(s.psi() - ref.psi_d);
  const double psi_err_dot = r / ct - ref.psi_d_dot;
  YawOutput out;
  out.s_r = psi_err_dot + g.lambda_r * psi_err;
  out.t_r = -terms.F_r - terms.phi_r.dot(obs.theta_hat_r) - r * std::tan(theta) * q +
            ct * (ref.psi_d_ddot - g.lambda_r * psi_err_dot - g.k_psi * psi_err -
                  g.k_r * out.s_r - g.k_d * sgn(out.s_r));
  out.theta_hat_r_dot = g.c_r * terms.phi_r * out.s_r;
  return out;
}

AutopilotOutput autopilot(const VehicleState& s, const References& ref,
                          const AutopilotGains& g, const ObserverState& obs,
                          const ComponentTerms& terms, SignSmoothing sgn) {
  const SurgeOutput su = surge_control(s, ref, g, obs, terms, sgn);
  const PitchOutput pi = pitch_control(s, ref, g, obs, terms, sgn);
  const YawOutput ya = yaw_control(s, ref, g, obs, terms, sgn);
  AutopilotOutput out;
  out.forces = {su.f_u, pi.t_q, ya.t_r};
  out.observer_rates.V_hat_c = su.V_hat_c_dot;
  out.observer_rates.theta_hat_q = pi.theta_hat_q_dot;
  out.observer_rates.theta_hat_r = ya.theta_hat_r_dot;
  out.s_q = pi.s_q;
  out.s_r = ya.s_r;
  return out;
}

std::vector<FilteredSample> reference_derivatives(const std::vector<double>& raw,
                                                  double dt, double omega) {
  std::vector<FilteredSample> out;
  if (raw.empty()) return out;
  const ReferenceFilter filter(omega);
  double x = raw.front(), v = 0.0;
  out.reserve(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const double in = raw[k];
    out.push_back({x, v, filter.acceleration(x, v, in)});
    if (k + 1 == raw.size()) break;
    const double in_mid = 0.5 * (in + raw[k + 1]), in_end = raw[k + 1];
    const double a1 = filter.acceleration(x, v, in);
    const double x2 = x + 0.5 * dt * v, v2 = v + 0.5 * dt * a1;
    const double a2 = filter.acceleration(x2, v2, in_mid);
    const double x3 = x + 0.5 * dt * v2, v3 = v + 0.5 * dt * a2;
    const double a3 = filter.acceleration(x3, v3, in_mid);
    const double x4 = x + dt * v3, v4 = v + dt * a3;
    const double a4 = filter.acceleration(x4, v4, in_end);
    x += dt / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4);
    v += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
  }
  return out;
}

}  // namespace auvform
