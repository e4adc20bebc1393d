#include <complex>
#include <random>

#include <gtest/gtest.h>

#include "auvform/autopilots.hpp"

using namespace auvform;

namespace {

VehicleState sample_state() {
  VehicleState s;
  s.eta << 4, -3, 10, 0.2, 0.7;
  s.nu << 1.1, 0.15, -0.05, 0.03, -0.02;
  return s;
}

OceanCurrent table_current() {
  OceanCurrent c;
  c.V << 0, 0.25, 0.05;
  return c;
}

ObserverState exact_observer(const OceanCurrent& c) {
  ObserverState o;
  o.V_hat_c = c.V;
  o.theta_hat_q = current_regressor(c.V);
  o.theta_hat_r = current_regressor(c.V);
  return o;
}

}  // namespace

TEST(AutopilotGains, DefaultsPositiveAndValidated) {
  AutopilotGains g;
  EXPECT_NO_THROW(g.validate());
  g.k_d = 0.0;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(SignSmoothing, SmoothAndExact) {
  SignSmoothing smooth;
  EXPECT_NEAR(smooth(0.01), std::tanh(1.0), 1e-15);
  EXPECT_EQ(smooth(0.0), 0.0);
  SignSmoothing exact{true};
  EXPECT_EQ(exact(-3.0), -1.0);
  EXPECT_EQ(exact(0.0), 0.0);
  EXPECT_EQ(exact(1e-9), 1.0);
}

TEST(SurgeControl, ZeroErrorIsPureFeedforward) {
  const VehicleParams p = VehicleParams::surrogate();
  const VehicleState s = sample_state();
  const OceanCurrent c = table_current();
  const ComponentTerms t = component_terms(p, s, c);
  References ref;
  ref.u_d = s.nu[0];
  ref.u_d_dot = 0.3;
  const SurgeOutput out = surge_control(s, ref, {}, exact_observer(c), t);
  EXPECT_NEAR(out.f_u, 0.3 - t.F_u - t.phi_u.dot(c.V), 1e-15);
  EXPECT_EQ(out.V_hat_c_dot, Vec3::Zero());
  const Vec5 nu_dot = dynamics(p, s, c, {out.f_u, 0, 0}, t);
  EXPECT_NEAR(nu_dot[0], ref.u_d_dot, 1e-14);
}

TEST(SurgeControl, PassivityBookkeeping) {
  const VehicleParams p = VehicleParams::surrogate();
  const OceanCurrent c = table_current();
  const AutopilotGains g;
  const SignSmoothing sgn{true};
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> d(-1, 1);
  for (int k = 0; k < 500; ++k) {
    VehicleState s = sample_state();
    s.eta[3] = 0.6 * d(rng);
    s.eta[4] = 3 * d(rng);
    s.nu << 1 + d(rng), 0.3 * d(rng), 0.3 * d(rng), 0.1 * d(rng), 0.1 * d(rng);
    ObserverState obs;
    obs.V_hat_c << d(rng), d(rng), d(rng);
    References ref;
    ref.u_d = 1 + d(rng);
    ref.u_d_dot = 0.2 * d(rng);
    const ComponentTerms t = component_terms(p, s, c);
    const SurgeOutput out = surge_control(s, ref, g, obs, t, sgn);
    const double u_dot = dynamics(p, s, c, {out.f_u, 0, 0}, t)[0];
    const double u_err = s.nu[0] - ref.u_d;
    const Vec3 V_err = c.V - obs.V_hat_c;
    const double dV = u_err * (u_dot - ref.u_d_dot) - V_err.dot(out.V_hat_c_dot) / g.c_u;
    const double expected = -g.k_u * u_err * u_err - g.k_c * std::abs(u_err);
    EXPECT_NEAR(dV, expected, 1e-8);
  }
}

TEST(PitchControl, ZeroErrorIsPureFeedforward) {
  const VehicleParams p = VehicleParams::surrogate();
  const VehicleState s = sample_state();
  const OceanCurrent c = table_current();
  const ComponentTerms t = component_terms(p, s, c);
  References ref;
  ref.theta_d = s.theta();
  ref.theta_d_dot = s.nu[3];
  ref.theta_d_ddot = -0.01;
  const PitchOutput out = pitch_control(s, ref, {}, exact_observer(c), t);
  EXPECT_NEAR(out.t_q, -0.01 - t.F_q - t.phi_q.dot(current_regressor(c.V)), 1e-15);
  EXPECT_EQ(out.s_q, 0.0);
  EXPECT_EQ(out.theta_hat_q_dot, Vec9::Zero());
}

TEST(PitchControl, SlidingVariableDynamics) {
  const VehicleParams p = VehicleParams::surrogate();
  VehicleState s = sample_state();
  const OceanCurrent c = table_current();
  const AutopilotGains g;
  const SignSmoothing sgn{true};
  const ComponentTerms t = component_terms(p, s, c);
  References ref;
  ref.theta_d = 0.1;
  ref.theta_d_dot = 0.01;
  ref.theta_d_ddot = 0.002;
  const PitchOutput out = pitch_control(s, ref, g, exact_observer(c), t, sgn);
  const double q_dot = dynamics(p, s, c, {0, out.t_q, 0}, t)[3];
  const double theta_err = s.theta() - ref.theta_d;
  const double q_err = s.nu[3] - ref.theta_d_dot;
  const double s_dot = q_dot - ref.theta_d_ddot + g.lambda_q * q_err;
  EXPECT_NEAR(s_dot, -g.k_theta * theta_err - g.k_q * out.s_q - g.k_d * sgn(out.s_q),
              1e-13);
}

TEST(YawControl, ZeroErrorLevelIsPureFeedforward) {
  const VehicleParams p = VehicleParams::surrogate();
  VehicleState s = sample_state();
  s.eta[3] = 0.0;
  const OceanCurrent c = table_current();
  const ComponentTerms t = component_terms(p, s, c);
  References ref;
  ref.psi_d = s.psi();
  ref.psi_d_dot = s.nu[4];
  ref.psi_d_ddot = 0.004;
  const YawOutput out = yaw_control(s, ref, {}, exact_observer(c), t);
  EXPECT_NEAR(out.t_r, 0.004 - t.F_r - t.phi_r.dot(current_regressor(c.V)), 1e-15);
  EXPECT_EQ(out.s_r, 0.0);
  EXPECT_EQ(out.theta_hat_r_dot, Vec9::Zero());
}

TEST(YawControl, LevelFlightMatchesPitchStructure) {
  const VehicleParams p = VehicleParams::surrogate();
  VehicleState s = sample_state();
  s.eta[3] = 0.0;
  const OceanCurrent c = table_current();
  const ComponentTerms t = component_terms(p, s, c);
  const ObserverState obs = exact_observer(c);
  References ref;
  ref.psi_d = 0.5;
  ref.psi_d_dot = 0.02;
  ref.psi_d_ddot = 0.001;
  const AutopilotGains g;
  const YawOutput out = yaw_control(s, ref, g, obs, t);
  const double e = s.psi() - ref.psi_d, ed = s.nu[4] - ref.psi_d_dot;
  const double sr = ed + g.lambda_r * e;
  SignSmoothing sgn;
  const double expected = ref.psi_d_ddot - t.F_r - t.phi_r.dot(obs.theta_hat_r) -
                          g.lambda_r * ed - g.k_psi * e - g.k_r * sr - g.k_d * sgn(sr);
  EXPECT_NEAR(out.t_r, expected, 1e-14);
}

TEST(YawControl, SlidingVariableDynamicsWhenPitched) {
  const VehicleParams p = VehicleParams::surrogate();
  VehicleState s = sample_state();
  s.eta[3] = 0.5;
  const OceanCurrent c = table_current();
  const AutopilotGains g;
  const SignSmoothing sgn{true};
  const ComponentTerms t = component_terms(p, s, c);
  References ref;
  ref.psi_d = 1.0;
  ref.psi_d_dot = -0.01;
  ref.psi_d_ddot = 0.003;
  const YawOutput out = yaw_control(s, ref, g, exact_observer(c), t, sgn);
  const Vec5 nu_dot = dynamics(p, s, c, {0, 0, out.t_r}, t);
  const double th = s.theta(), q = s.nu[3], r = s.nu[4];
  // d/dt (r / cos theta) = r_dot / cos theta + r tan(theta) q / cos theta
  const double psi_ddot = nu_dot[4] / std::cos(th) + r * std::tan(th) * q / std::cos(th);
  const double psi_err = wrap_angle(s.psi() - ref.psi_d);
  const double psi_err_dot = r / std::cos(th) - ref.psi_d_dot;
  const double s_dot = psi_ddot - ref.psi_d_ddot + g.lambda_r * psi_err_dot;
  EXPECT_NEAR(s_dot, -g.k_psi * psi_err - g.k_r * out.s_r - g.k_d * sgn(out.s_r),
              1e-13);
}

TEST(YawControl, RejectsVerticalPitch) {
  VehicleState s;
  s.eta[3] = kPi / 2;
  EXPECT_THROW(yaw_control(s, {}, {}, {}, ComponentTerms{}), DomainError);
}

TEST(YawControl, WrapsHeadingError) {
  const VehicleParams p = VehicleParams::surrogate();
  VehicleState s;
  s.eta[4] = kPi - 0.05;
  References ref;
  ref.psi_d = -kPi + 0.05;
  const ComponentTerms t = component_terms(p, s, {});
  EXPECT_NEAR(yaw_control(s, ref, {}, {}, t).s_r, 0.75 * (-0.1), 1e-12);
}

TEST(ObserverCap, BlocksOutwardGrowthOnly) {
  const Vec3 est(2, 0, 0);
  EXPECT_EQ(cap_observer_rate(est, Vec3(1, 1, 0), 0.0), Vec3(1, 1, 0));
  EXPECT_EQ(cap_observer_rate(est, Vec3(1, 1, 0), 2.0), Vec3(0, 1, 0));
  EXPECT_EQ(cap_observer_rate(est, Vec3(-1, 1, 0), 2.0), Vec3(-1, 1, 0));
  EXPECT_EQ(cap_observer_rate(est, Vec3(1, 1, 0), 3.0), Vec3(1, 1, 0));
}

TEST(ReferenceFilter, ConstantInputConverges) {
  const std::vector<double> raw(3000, 1.7);
  std::vector<double> stream = raw;
  stream[0] = 0.0;
  const auto out = reference_derivatives(stream, 0.01);
  EXPECT_NEAR(out.back().value, 1.7, 1e-12);
  EXPECT_NEAR(out.back().rate, 0.0, 1e-12);
  EXPECT_NEAR(out.back().acceleration, 0.0, 1e-11);
}

TEST(ReferenceFilter, RampRateConverges) {
  const double dt = 0.01, a = 0.3;
  std::vector<double> raw;
  for (int k = 0; k < 3000; ++k) raw.push_back(a * k * dt);
  const auto out = reference_derivatives(raw, dt);
  EXPECT_NEAR(out.back().rate, a, 1e-3 * a);
}

TEST(ReferenceFilter, SineAccelerationMatchesAnalyticResponse) {
  const double dt = 0.01, wf = 2.0;
  for (double w : {0.01, 0.2}) {
    std::vector<double> raw;
    for (int k = 0; k <= 100000; ++k) raw.push_back(std::sin(w * k * dt));
    const auto out = reference_derivatives(raw, dt, wf);
    const std::complex<double> H = wf * wf / std::complex<double>(wf * wf - w * w, 2 * wf * w);
    double worst_analytic = 0, worst_plain = 0;
    for (std::size_t k = 5000; k < raw.size(); ++k) {
      const double t = k * dt;
      const double analytic = -w * w * std::abs(H) * std::sin(w * t + std::arg(H));
      worst_analytic = std::max(worst_analytic, std::abs(out[k].acceleration - analytic));
      worst_plain = std::max(worst_plain, std::abs(out[k].acceleration + w * w * std::sin(w * t)));
    }
    EXPECT_LT(worst_analytic, 0.02 * w * w) << w;
    if (w < 0.05 * wf) {
      EXPECT_LT(worst_plain, 0.02 * w * w) << w;
    }
  }
}

TEST(ReferenceFilter, UnitDcGain) {
  const ReferenceFilter f(2.0);
  EXPECT_EQ(f.acceleration(3.0, 0.0, 3.0), 0.0);
}
