#pragma once

// 5-DOF underactuated AUV model (surge, sway, heave, pitch, yaw) in matrix-vector
// form and in the per-state component form used by the controllers. Roll is
// not modelled. Positions are NED, angles in radians.

#include <string>

#include <nlohmann/json_fwd.hpp>

#include "auvform/types.hpp"

namespace auvform {

struct VehicleParams {
  // Mass and inertia including added mass.
  double m11 = 0, m22 = 0, m25 = 0, m33 = 0, m34 = 0, m44 = 0, m55 = 0;
  // Linear damping.
  double d11 = 0, d22 = 0, d25 = 0, d33 = 0, d34 = 0, d43 = 0, d44 = 0, d52 = 0,
         d55 = 0;
  // Restoring moment coefficient m*g*z_g [N m].
  double W = 0;
  // Hull length [m]; informational.
  double length = 0;

  Mat5 mass_matrix() const;
  Mat5 damping_matrix() const;

  // Determinants of the coupled sway/yaw and heave/pitch mass sub-blocks.
  double det_sway_yaw() const { return m22 * m55 - m25 * m25; }
  double det_heave_pitch() const { return m33 * m44 - m34 * m34; }

  // Throws DomainError unless every coefficient is finite, the mass matrix is
  // symmetric positive definite and both sub-blocks are invertible.
  void validate() const;

  // Surrogate torpedo AUV shipped as the default (LAUV-class, 2.4 m hull).
  // Tuned so that min |Y/X| over the default operating envelope is ~0.26.
  static VehicleParams surrogate();
};

// Operating envelope over which the sway/heave certificates are evaluated.
struct OperatingEnvelope {
  double u_max = 2.5;       // surge speed range [0, u_max]
  double current_max = 0;   // |u_c| <= current_max
  int grid = 100;           // points per axis
};

struct EnvelopeCertificate {
  double max_Yv = 0;     // largest Y_v over the grid (must be < 0)
  double max_Yw = 0;
  double min_ratio_v = 0;  // min |Y_v / X_v|
  double min_ratio_w = 0;
  bool Xv_vanishes = false;  // X_v crossed zero somewhere: ratio is unbounded
  bool Xw_vanishes = false;
  bool ok() const { return max_Yv < 0 && max_Yw < 0; }
};

EnvelopeCertificate scan_envelope(const VehicleParams& p,
                                  const OperatingEnvelope& env);

// Reads a parameter file whose keys match the VehicleParams field names.
// Validates positive definiteness and the envelope certificate.
VehicleParams vehicle_params_from_json(const nlohmann::json& j,
                                       const OperatingEnvelope& env);
VehicleParams load_vehicle_params(const std::string& path,
                                  const OperatingEnvelope& env);
nlohmann::json to_json(const VehicleParams& p);

struct VehicleState {
  Vec5 eta = Vec5::Zero();  // x, y, z, theta, psi
  Vec5 nu = Vec5::Zero();   // u, v, w, q, r

  Vec3 position() const { return eta.head<3>(); }
  double theta() const { return eta[3]; }
  double psi() const { return eta[4]; }
};

struct OceanCurrent {
  Vec3 V = Vec3::Zero();  // inertial (NED) current, constant
};

struct GeneralizedForces {
  double f_u = 0;  // surge specific force [m/s^2]
  double t_q = 0;  // pitch specific torque [rad/s^2]
  double t_r = 0;  // yaw specific torque [rad/s^2]
};

// Body-to-NED rotation for zero roll. Columns are the body axes r_u, r_v, r_w.
Mat3 rotation_matrix(double theta, double psi);

// [x_dot, y_dot, z_dot, theta_dot, psi_dot] written out per state.
Vec5 kinematics(const VehicleState& s);
// J(eta) = blockdiag(R, diag(1, 1/cos theta)).
Mat5 kinematics_matrix(double theta, double psi);

// Skew-symmetric Coriolis-centripetal matrix C(nu_r).
Mat5 coriolis(const VehicleParams& p, const Vec5& nu_r);

// [R^T V_c, 0, 0].
Vec5 current_in_body(const VehicleState& s, const OceanCurrent& c);

// [Vx, Vy, Vz, Vx^2, Vy^2, Vz^2, VxVy, VxVz, VyVz].
Vec9 current_regressor(const Vec3& V);

struct ComponentTerms {
  double F_u = 0;
  Vec3 phi_u = Vec3::Zero();
  double X_v = 0, Y_v = 0, X_w = 0, Y_w = 0;
  double G = 0;
  double F_q = 0;
  Vec9 phi_q = Vec9::Zero();
  double F_r = 0;
  Vec9 phi_r = Vec9::Zero();
  // Body-frame current components used by the sway/heave rows.
  double u_c = 0, v_c = 0, w_c = 0;
};

ComponentTerms component_terms(const VehicleParams& p, const VehicleState& s,
                               const OceanCurrent& c);

// Sway/heave coefficient pairs as functions of (u, u_c) only.
double sway_X(const VehicleParams& p, double u, double u_c);
double sway_Y(const VehicleParams& p, double u, double u_c);
double heave_X(const VehicleParams& p, double u, double u_c);
double heave_Y(const VehicleParams& p, double u, double u_c);

// nu_dot from the component form.
Vec5 dynamics(const VehicleParams& p, const VehicleState& s,
              const OceanCurrent& c, const GeneralizedForces& f);
// Same quantity from M nu_r_dot + C nu_r + D nu_r + g = M [f_u,0,0,t_q,t_r],
// with nu_c_dot = -omega x (R^T V_c) and omega = [0, q, r].
Vec5 dynamics_matrix_form(const VehicleParams& p, const VehicleState& s,
                          const OceanCurrent& c, const GeneralizedForces& f);
Vec5 dynamics(const VehicleParams& p, const VehicleState& s,
              const OceanCurrent& c, const GeneralizedForces& f,
              const ComponentTerms& terms);

// Kinetic plus restoring energy; non-increasing without forces and current.
double mechanical_energy(const VehicleParams& p, const VehicleState& s);

}  // namespace auvform
