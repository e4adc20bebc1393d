#include "auvform/vehicle_model.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

namespace auvform {

namespace {

// Regressor for a single body velocity component: phi_i^T theta(V) = -i_c.
Vec9 regressor_single(const Vec3& r_i) {
  Vec9 out = Vec9::Zero();
  out.head<3>() = -r_i;
  return out;
}

// Regressor for a product of two body velocities i, j:
// phi_ij^T theta(V) = -j i_c - i j_c + i_c j_c.
Vec9 regressor_pair(double i, double j, const Vec3& r_i, const Vec3& r_j) {
  Vec9 out;
  out.head<3>() = -j * r_i - i * r_j;
  out[3] = r_i[0] * r_j[0];
  out[4] = r_i[1] * r_j[1];
  out[5] = r_i[2] * r_j[2];
  out[6] = r_i[0] * r_j[1] + r_i[1] * r_j[0];
  out[7] = r_i[0] * r_j[2] + r_i[2] * r_j[0];
  out[8] = r_i[1] * r_j[2] + r_i[2] * r_j[1];
  return out;
}

void check_pitch(double theta) {
  if (!(std::abs(theta) < kPi / 2)) {
    throw DomainError("pitch angle outside (-pi/2, pi/2): " +
                      std::to_string(theta));
  }
}

}  // namespace

Mat5 VehicleParams::mass_matrix() const {
  Mat5 M = Mat5::Zero();
  M(0, 0) = m11;
  M(1, 1) = m22;
  M(1, 4) = M(4, 1) = m25;
  M(2, 2) = m33;
  M(2, 3) = M(3, 2) = m34;
  M(3, 3) = m44;
  M(4, 4) = m55;
  return M;
}

Mat5 VehicleParams::damping_matrix() const {
  Mat5 D = Mat5::Zero();
  D(0, 0) = d11;
  D(1, 1) = d22;
  D(1, 4) = d25;
  D(2, 2) = d33;
  D(2, 3) = d34;
  D(3, 2) = d43;
  D(3, 3) = d44;
  D(4, 1) = d52;
  D(4, 4) = d55;
  return D;
}

void VehicleParams::validate() const {
  const double all[] = {m11, m22, m25, m33, m34, m44, m55, d11, d22, d25,
                        d33, d34, d43, d44, d52, d55, W,   length};
  for (double v : all) {
    if (!std::isfinite(v)) throw DomainError("non-finite vehicle parameter");
  }
  if (det_sway_yaw() == 0.0 || det_heave_pitch() == 0.0) {
    throw DomainError("singular sway/yaw or heave/pitch mass sub-block");
  }
  Eigen::LLT<Mat5> llt(mass_matrix());
  if (llt.info() != Eigen::Success) {
    throw DomainError("mass matrix is not positive definite");
  }
}

VehicleParams VehicleParams::surrogate() {
  VehicleParams p;
  p.m11 = 19.1;
  p.m22 = 34.0;
  p.m25 = 1.0;
  p.m33 = 34.0;
  p.m34 = -1.0;
  p.m44 = 6.0;
  p.m55 = 6.0;
  p.d11 = 2.4;
  p.d22 = 19.4;
  p.d25 = 2.0;
  p.d33 = 19.4;
  p.d34 = -2.0;
  p.d43 = -2.0;
  p.d44 = 8.0;
  p.d52 = 2.0;
  p.d55 = 8.0;
  p.W = 3.5;
  p.length = 2.4;
  return p;
}

double sway_X(const VehicleParams& p, double u, double u_c) {
  const double u_r = u - u_c;
  return -u_c - (p.m55 * (p.d25 + p.m11 * u_r) - p.m25 * (p.d55 + p.m25 * u_r)) /
                    p.det_sway_yaw();
}

double sway_Y(const VehicleParams& p, double u, double u_c) {
  const double u_r = u - u_c;
  return -(p.d22 * p.m55 - p.m25 * (p.d52 - u_r * (p.m11 - p.m22))) /
         p.det_sway_yaw();
}

double heave_X(const VehicleParams& p, double u, double u_c) {
  const double u_r = u - u_c;
  return u_c - (p.m44 * (p.d34 - p.m11 * u_r) - p.m34 * (p.d44 - p.m34 * u_r)) /
                   p.det_heave_pitch();
}

double heave_Y(const VehicleParams& p, double u, double u_c) {
  const double u_r = u - u_c;
  return -(p.d33 * p.m44 - p.m34 * (p.d43 + u_r * (p.m11 - p.m33))) /
         p.det_heave_pitch();
}

EnvelopeCertificate scan_envelope(const VehicleParams& p,
                                  const OperatingEnvelope& env) {
  EnvelopeCertificate cert;
  cert.max_Yv = -std::numeric_limits<double>::infinity();
  cert.max_Yw = -std::numeric_limits<double>::infinity();
  cert.min_ratio_v = std::numeric_limits<double>::infinity();
  cert.min_ratio_w = std::numeric_limits<double>::infinity();
  const int n = std::max(env.grid, 2);
  for (int a = 0; a < n; ++a) {
    const double u = env.u_max * a / (n - 1);
    for (int b = 0; b < n; ++b) {
      const double u_c = -env.current_max + 2.0 * env.current_max * b / (n - 1);
      const double Xv = sway_X(p, u, u_c), Yv = sway_Y(p, u, u_c);
      const double Xw = heave_X(p, u, u_c), Yw = heave_Y(p, u, u_c);
      cert.max_Yv = std::max(cert.max_Yv, Yv);
      cert.max_Yw = std::max(cert.max_Yw, Yw);
      if (Xv == 0.0) {
        cert.Xv_vanishes = true;
      } else {
        cert.min_ratio_v = std::min(cert.min_ratio_v, std::abs(Yv / Xv));
      }
      if (Xw == 0.0) {
        cert.Xw_vanishes = true;
      } else {
        cert.min_ratio_w = std::min(cert.min_ratio_w, std::abs(Yw / Xw));
      }
    }
  }
  return cert;
}

nlohmann::json to_json(const VehicleParams& p) {
  return nlohmann::json{{"m11", p.m11}, {"m22", p.m22}, {"m25", p.m25},
                        {"m33", p.m33}, {"m34", p.m34}, {"m44", p.m44},
                        {"m55", p.m55}, {"d11", p.d11}, {"d22", p.d22},
                        {"d25", p.d25}, {"d33", p.d33}, {"d34", p.d34},
                        {"d43", p.d43}, {"d44", p.d44}, {"d52", p.d52},
                        {"d55", p.d55}, {"W", p.W},     {"length", p.length}};
}

VehicleParams vehicle_params_from_json(const nlohmann::json& j,
                                       const OperatingEnvelope& env) {
  if (!j.is_object()) throw ConfigError("vehicle parameters must be an object");
  VehicleParams p;
  const nlohmann::json ref = to_json(p);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ref.contains(it.key())) {
      throw ConfigError("unknown vehicle parameter '" + it.key() + "'");
    }
    if (!it.value().is_number()) {
      throw ConfigError("vehicle parameter '" + it.key() + "' must be a number");
    }
  }
  for (auto it = ref.begin(); it != ref.end(); ++it) {
    if (!j.contains(it.key())) {
      throw ConfigError("missing vehicle parameter '" + it.key() + "'");
    }
  }
  p.m11 = j.at("m11");
  p.m22 = j.at("m22");
  p.m25 = j.at("m25");
  p.m33 = j.at("m33");
  p.m34 = j.at("m34");
  p.m44 = j.at("m44");
  p.m55 = j.at("m55");
  p.d11 = j.at("d11");
  p.d22 = j.at("d22");
  p.d25 = j.at("d25");
  p.d33 = j.at("d33");
  p.d34 = j.at("d34");
  p.d43 = j.at("d43");
  p.d44 = j.at("d44");
  p.d52 = j.at("d52");
  p.d55 = j.at("d55");
  p.W = j.at("W");
  p.length = j.at("length");
  p.validate();
  const EnvelopeCertificate cert = scan_envelope(p, env);
  if (!cert.ok()) {
    std::ostringstream msg;
    msg << "sway/heave damping not negative over the operating envelope (max Y_v="
        << cert.max_Yv << ", max Y_w=" << cert.max_Yw << ")";
    throw DomainError(msg.str());
  }
  return p;
}

VehicleParams load_vehicle_params(const std::string& path,
                                  const OperatingEnvelope& env) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open vehicle parameter file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return vehicle_params_from_json(j, env);
}

Mat3 rotation_matrix(double theta, double psi) {
  check_pitch(theta);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cp = std::cos(psi), sp = std::sin(psi);
  Mat3 R;
  R << cp * ct, -sp, cp * st,
       sp * ct, cp, sp * st,
       -st, 0.0, ct;
  return R;
}

Vec5 kinematics(const VehicleState& s) {
  const double th = s.theta(), ps = s.psi();
  check_pitch(th);
  const double u = s.nu[0], v = s.nu[1], w = s.nu[2], q = s.nu[3], r = s.nu[4];
  const double ct = std::cos(th), st = std::sin(th);
  const double cp = std::cos(ps), sp = std::sin(ps);
  Vec5 out;
  out << u * cp * ct - v * sp + w * cp * st,
         u * ct * sp + v * cp + w * sp * st,
         -u * st + w * ct,
         q,
         r / ct;
  return out;
}

Mat5 kinematics_matrix(double theta, double psi) {
  Mat5 J = Mat5::Zero();
  J.topLeftCorner<3, 3>() = rotation_matrix(theta, psi);
  J(3, 3) = 1.0;
  J(4, 4) = 1.0 / std::cos(theta);
  return J;
}

Mat5 coriolis(const VehicleParams& p, const Vec5& nu_r) {
  const double u_r = nu_r[0], v_r = nu_r[1], w_r = nu_r[2], q = nu_r[3],
               r = nu_r[4];
  const double c1 = p.m34 * q + p.m33 * w_r;
  const double c2 = p.m25 * r + p.m22 * v_r;
  const double c3 = p.m11 * u_r;
  Mat5 C;
  C << 0, 0, 0, c1, -c2,
       0, 0, 0, 0, c3,
       0, 0, 0, -c3, 0,
       -c1, 0, c3, 0, 0,
       c2, -c3, 0, 0, 0;
  return C;
}

Vec5 current_in_body(const VehicleState& s, const OceanCurrent& c) {
  Vec5 out = Vec5::Zero();
  out.head<3>() = rotation_matrix(s.theta(), s.psi()).transpose() * c.V;
  return out;
}

Vec9 current_regressor(const Vec3& V) {
  Vec9 t;
  t << V[0], V[1], V[2], V[0] * V[0], V[1] * V[1], V[2] * V[2], V[0] * V[1],
      V[0] * V[2], V[1] * V[2];
  return t;
}

ComponentTerms component_terms(const VehicleParams& p, const VehicleState& s,
                               const OceanCurrent& c) {
  const Mat3 R = rotation_matrix(s.theta(), s.psi());
  const Vec3 r_u = R.col(0), r_v = R.col(1), r_w = R.col(2);
  const double u = s.nu[0], v = s.nu[1], w = s.nu[2], q = s.nu[3], r = s.nu[4];
  const double st = std::sin(s.theta());
  const double det_vr = p.det_sway_yaw();
  const double det_wq = p.det_heave_pitch();

  ComponentTerms t;
  t.u_c = r_u.dot(c.V);
  t.v_c = r_v.dot(c.V);
  t.w_c = r_w.dot(c.V);

  t.F_u = -(p.d11 * u + q * (p.m34 * q + p.m33 * w) - r * (p.m25 * r + p.m22 * v)) /
          p.m11;
  t.phi_u = q * (p.m33 / p.m11 - 1.0) * r_w + r * (1.0 - p.m22 / p.m11) * r_v +
            (p.d11 / p.m11) * r_u;

  t.X_v = sway_X(p, u, t.u_c);
  t.Y_v = sway_Y(p, u, t.u_c);
  t.X_w = heave_X(p, u, t.u_c);
  t.Y_w = heave_Y(p, u, t.u_c);
  t.G = p.m34 * p.W * st / det_wq;

  const double dm13 = p.m11 - p.m33;
  t.F_q = (p.m34 * (p.d34 * q + p.d33 * w - q * u * dm13) -
           p.m33 * (p.d44 * q + p.d43 * w + p.W * st + u * w * dm13)) /
          det_wq;
  const Vec9 phi_w = regressor_single(r_w);
  const Vec9 phi_uq = regressor_single(r_u);
  const Vec9 phi_uw = regressor_pair(u, w, r_u, r_w);
  t.phi_q = (p.m34 * (p.d33 * phi_w - phi_uq * q * dm13) -
             p.m33 * (p.d43 * phi_w + phi_uw * dm13)) /
            det_wq;

  const double dm12 = p.m11 - p.m22;
  t.F_r = (p.m25 * (p.d25 * r + p.d22 * v + r * u * dm12) -
           p.m22 * (p.d55 * r + p.d52 * v - u * v * dm12)) /
          det_vr;
  const Vec9 phi_v = regressor_single(r_v);
  const Vec9 phi_uv = regressor_pair(u, v, r_u, r_v);
  t.phi_r = (p.m25 * (p.d22 * phi_v + phi_uq * r * dm12) -
             p.m22 * (p.d52 * phi_v - phi_uv * dm12)) /
            det_vr;
  return t;
}

Vec5 dynamics(const VehicleParams& /*p*/, const VehicleState& s,
              const OceanCurrent& c, const GeneralizedForces& f,
              const ComponentTerms& t) {
  if (!std::isfinite(f.f_u) || !std::isfinite(f.t_q) || !std::isfinite(f.t_r)) {
    throw DomainError("non-finite generalized force");
  }
  const Vec9 vartheta = current_regressor(c.V);
  const double v = s.nu[1], w = s.nu[2], q = s.nu[3], r = s.nu[4];
  Vec5 nu_dot;
  nu_dot[0] = f.f_u + t.F_u + t.phi_u.dot(c.V);
  nu_dot[1] = t.X_v * r + t.Y_v * (v - t.v_c);
  nu_dot[2] = t.X_w * q + t.Y_w * (w - t.w_c) + t.G;
  nu_dot[3] = f.t_q + t.F_q + t.phi_q.dot(vartheta);
  nu_dot[4] = f.t_r + t.F_r + t.phi_r.dot(vartheta);
  return nu_dot;
}

Vec5 dynamics(const VehicleParams& p, const VehicleState& s,
              const OceanCurrent& c, const GeneralizedForces& f) {
  return dynamics(p, s, c, f, component_terms(p, s, c));
}

Vec5 dynamics_matrix_form(const VehicleParams& p, const VehicleState& s,
                          const OceanCurrent& c, const GeneralizedForces& f) {
  if (!std::isfinite(f.f_u) || !std::isfinite(f.t_q) || !std::isfinite(f.t_r)) {
    throw DomainError("non-finite generalized force");
  }
  const Mat5 M = p.mass_matrix();
  const Vec5 nu_c = current_in_body(s, c);
  const Vec5 nu_r = s.nu - nu_c;
  Vec5 g = Vec5::Zero();
  g[3] = p.W * std::sin(s.theta());
  Vec5 tau_over_m;
  tau_over_m << f.f_u, 0.0, 0.0, f.t_q, f.t_r;
  const Vec5 rhs = M * tau_over_m - coriolis(p, nu_r) * nu_r -
                   p.damping_matrix() * nu_r - g;
  const Vec5 nu_r_dot = M.ldlt().solve(rhs);

  const Vec3 omega(0.0, s.nu[3], s.nu[4]);
  Vec5 nu_c_dot = Vec5::Zero();
  nu_c_dot.head<3>() = -omega.cross(Vec3(nu_c.head<3>()));
  return nu_r_dot + nu_c_dot;
}

double mechanical_energy(const VehicleParams& p, const VehicleState& s) {
  return 0.5 * s.nu.dot(p.mass_matrix() * s.nu) +
         p.W * (1.0 - std::cos(s.theta()));
}

}  // namespace auvform
