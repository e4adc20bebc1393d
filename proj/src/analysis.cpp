#include "auvform/analysis.hpp"

#include <cstdio>
#include <limits>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace auvform {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double bound_term(double ratio, double curvature, int n) {
  if (std::isinf(ratio)) return 0.0;
  const double den = n * ratio - 2.0 * std::abs(curvature);
  return den > 0.0 ? 3.0 / den : kInf;
}

}  // namespace

double lookahead_lower_bound(double ratio_v, double ratio_w, double max_kappa,
                             double max_iota, int n) {
  return std::max(bound_term(ratio_v, max_iota, n), bound_term(ratio_w, max_kappa, n));
}

StabilityReport evaluate_conditions(double ratio_v, double ratio_w, double max_kappa,
                                    double max_iota, double theta_p_max, int n,
                                    double delta0) {
  StabilityReport r;
  r.max_kappa = std::abs(max_kappa);
  r.max_iota = std::abs(max_iota);
  r.sampled_kappa = r.max_kappa;
  r.sampled_iota = r.max_iota;
  r.ratio_v = ratio_v;
  r.ratio_w = ratio_w;
  r.ratio_v_unbounded = std::isinf(ratio_v);
  r.ratio_w_unbounded = std::isinf(ratio_w);
  r.kappa_ok = r.max_kappa < 0.5 * n * ratio_w;
  r.iota_ok = r.max_iota < 0.5 * n * ratio_v;
  r.delta0 = delta0;
  r.delta0_lower_bound = lookahead_lower_bound(ratio_v, ratio_w, r.max_kappa, r.max_iota, n);
  r.delta0_ok = delta0 > r.delta0_lower_bound;
  r.theta_p_max = std::abs(theta_p_max);
  r.theta_ok = r.theta_p_max < kPi / 4;
  r.overall_ok = r.kappa_ok && r.iota_ok && r.theta_ok && r.delta0_ok;
  return r;
}

StabilityReport check_conditions(const PathSpec& path, const VehicleParams& params, int n,
                                 double V_c_max, double delta0, OperatingEnvelope env) {
  if (n < 1) throw ConfigError("fleet size must be positive");
  if (!(env.u_max > 0.0) || env.grid < 2) throw ConfigError("empty operating envelope");
  env.current_max = V_c_max;
  const EnvelopeCertificate cert = scan_envelope(params, env);
  const double rv = cert.Xv_vanishes ? kInf : cert.min_ratio_v;
  const double rw = cert.Xw_vanishes ? kInf : cert.min_ratio_w;

  const CurvatureBounds sampled = sampled_bounds(path);
  CurvatureBounds b = sampled;
  if (const auto cf = path.closed_form_bounds()) {
    b.max_kappa = std::max(b.max_kappa, cf->max_kappa);
    b.max_iota = std::max(b.max_iota, cf->max_iota);
    b.max_theta_p = std::max(b.max_theta_p, cf->max_theta_p);
  }
  StabilityReport r = evaluate_conditions(rv, rw, b.max_kappa, b.max_iota, b.max_theta_p, n,
                                          delta0);
  r.sampled_kappa = sampled.max_kappa;
  r.sampled_iota = sampled.max_iota;
  return r;
}

std::string format_report(const StabilityReport& r) {
  auto flag = [](bool ok) { return ok ? "ok" : "VIOLATED"; };
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "ratio |Y_v/X_v| min     %.6g%s\n"
                "ratio |Y_w/X_w| min     %.6g%s\n"
                "max |kappa|             %.6g (sampled %.6g)  %s\n"
                "max |iota|              %.6g (sampled %.6g)  %s\n"
                "max |theta_p|           %.6g rad  %s\n"
                "lookahead lower bound   %.6g\n"
                "lookahead delta0        %.6g  %s\n"
                "overall                 %s\n",
                r.ratio_v, r.ratio_v_unbounded ? " (X_v vanishes)" : "", r.ratio_w,
                r.ratio_w_unbounded ? " (X_w vanishes)" : "", r.max_kappa, r.sampled_kappa,
                flag(r.kappa_ok), r.max_iota, r.sampled_iota, flag(r.iota_ok), r.theta_p_max,
                flag(r.theta_ok), r.delta0_lower_bound, r.delta0, flag(r.delta0_ok),
                r.overall_ok ? "ok" : "FAILED");
  return buf;
}

// --- vehicle model ---------------------------------------------------------

ModelOracleResult model_oracle(const VehicleParams& p, int samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelOracleResult res;
  for (int k = 0; k < samples; ++k) {
    VehicleState s;
    s.eta << uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, -50, 50),
        uniform(rng, -1.4, 1.4), uniform(rng, -kPi, kPi);
    s.nu << uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2),
        uniform(rng, -1, 1), uniform(rng, -1, 1);
    OceanCurrent c;
    c.V << uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5);
    const GeneralizedForces f{uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -3, 3)};
    const Vec5 a = dynamics(p, s, c, f);
    const Vec5 b = dynamics_matrix_form(p, s, c, f);
    res.max_relative = std::max(res.max_relative, (a - b).norm() / std::max(1.0, b.norm()));
    const Mat5 C = coriolis(p, s.nu - current_in_body(s, c));
    res.max_skew = std::max(res.max_skew, (C + C.transpose()).cwiseAbs().maxCoeff());
    const Mat3 R = rotation_matrix(s.theta(), s.psi());
    res.max_orthonormality = std::max(
        res.max_orthonormality, (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff());
  }
  return res;
}

// --- closed-loop barycenter error dynamics ---------------------------------

namespace {

struct LosGeometry {
  double lookahead, root_y, root_z, gamma_los, chi_los;
};

LosGeometry los_geometry(const OracleSample& s) {
  LosGeometry g;
  const Vec3& e = s.p_b_p;
  g.lookahead = std::sqrt(s.delta0 * s.delta0 + e.squaredNorm());
  g.root_y = std::hypot(g.lookahead, e.y());
  g.root_z = std::hypot(g.lookahead, e.z());
  g.gamma_los = s.theta_p + std::atan(e.z() / g.lookahead);
  g.chi_los = s.psi_p - std::atan(e.y() / g.lookahead);
  return g;
}

VehicleMotion flight_path_motion(const OracleVehicle& v) {
  VehicleMotion m;
  m.U = std::sqrt(v.u * v.u + v.v * v.v + v.w * v.w);
  m.gamma = v.theta - std::atan(v.w / v.u);
  m.chi = v.psi + std::asin(v.v / m.U);
  return m;
}

PathPoint oracle_point(const OracleSample& s) {
  PathPoint pt;
  pt.theta_p = s.theta_p;
  pt.psi_p = s.psi_p;
  pt.kappa = s.kappa;
  pt.iota = s.iota;
  pt.speed = s.speed;
  return pt;
}

}  // namespace

OracleTerms oracle_terms(const OracleSample& s, std::size_t i, bool printed_form) {
  const OracleVehicle& v = s.vehicles.at(i);
  const LosGeometry g = los_geometry(s);
  const VehicleMotion m = flight_path_motion(v);
  const double y = s.p_b_p.y(), z = s.p_b_p.z(), D = g.lookahead;

  OracleTerms t;
  t.U_d = std::sqrt(v.u_d * v.u_d + v.v * v.v + v.w * v.w);
  const double alpha_d = std::atan(v.w / v.u_d);
  const double alpha = std::atan(v.w / v.u);
  t.theta_d = g.gamma_los + alpha_d;
  t.psi_d = g.chi_los - std::asin(v.v / t.U_d);
  const double th_e = v.theta - t.theta_d;
  const double ps_e = v.psi - t.psi_d;
  const double u_e = v.u - v.u_d;
  const double W = std::hypot(v.u, v.w), W_d = std::hypot(v.u_d, v.w);
  const double cg = std::cos(m.gamma);

  if (!printed_form) {
    t.G_y = cg * std::sin(v.psi - s.psi_p) * (W - W_d) +
            t.U_d * cg * std::sin(ps_e) * D / g.root_y -
            t.U_d * (cg * std::cos(ps_e) - std::cos(g.gamma_los)) * y / g.root_y;
    t.G_z = -m.U * (1.0 - std::cos(m.chi - s.psi_p)) * cg * std::sin(s.theta_p) +
            t.U_d * z / g.root_z -
            m.U * W_d / W * (std::sin(th_e) * D + std::cos(th_e) * z) / g.root_z -
            m.U / W * u_e * std::sin(v.theta - s.theta_p);
  } else {
    const double da = alpha_d - alpha;
    t.G_y = cg * std::sin(v.psi - s.psi_p) * (W - W_d) -
            t.U_d * cg * std::sin(ps_e) * D / g.root_y +
            t.U_d *
                (std::sin(g.gamma_los) *
                     (std::cos(th_e) * std::sin(da) + std::sin(th_e) * std::cos(da)) -
                 std::cos(g.gamma_los) * (std::cos(th_e) * std::cos(da) - 1.0)) *
                y / g.root_y;
    t.G_z = -m.U * (1.0 - std::cos(m.chi - s.psi_p)) * cg * std::sin(s.theta_p) -
            u_e * std::sin(v.theta - s.theta_p) - (1.0 - std::cos(th_e)) * z / g.root_z -
            t.U_d * std::sin(th_e) * D / g.root_z;
  }
  return t;
}

BarycenterRates barycenter_rates(const OracleSample& s, bool printed_form) {
  const std::size_t n = s.vehicles.size();
  std::vector<VehicleMotion> motions;
  for (const OracleVehicle& v : s.vehicles) motions.push_back(flight_path_motion(v));
  const PathPoint pt = oracle_point(s);
  const Vec3& e = s.p_b_p;
  const double xi_dot = xi_update(motions, pt, e.x(), s.k_xi);

  BarycenterRates r;
  r.direct = barycenter_kinematics(motions, pt, e, xi_dot);

  const LosGeometry g = los_geometry(s);
  const Vec3 w = path_frame_rate(pt, xi_dot);
  double ny = 0, nz = 0, gy = 0, gz = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const OracleTerms t = oracle_terms(s, i, printed_form);
    ny += t.U_d * std::cos(g.gamma_los) * e.y() / g.root_y;
    nz += t.U_d * e.z() / g.root_z;
    gy += t.G_y;
    gz += t.G_z;
  }
  const double inv = 1.0 / static_cast<double>(n);
  const double z_sign = printed_form ? 1.0 : -1.0;
  r.closed_loop.x() = -s.k_xi * e.x() / std::sqrt(1.0 + e.x() * e.x()) + w.z() * e.y() -
                      w.y() * e.z();
  r.closed_loop.y() = -inv * ny + w.x() * e.z() - w.z() * e.x() + inv * gy;
  r.closed_loop.z() = z_sign * inv * nz + w.y() * e.x() - w.x() * e.y() + inv * gz;
  return r;
}

OracleSample random_oracle_sample(std::mt19937_64& rng, int n) {
  OracleSample s;
  for (int k = 0; k < 3; ++k) s.p_b_p[k] = uniform(rng, -20.0, 20.0);
  s.theta_p = uniform(rng, -0.7, 0.7);
  s.psi_p = uniform(rng, -kPi, kPi);
  s.kappa = uniform(rng, -0.05, 0.05);
  s.iota = uniform(rng, -0.05, 0.05);
  s.speed = uniform(rng, 0.5, 2.0);
  s.k_xi = uniform(rng, 0.5, 2.0);
  s.delta0 = uniform(rng, 2.0, 10.0);
  for (int i = 0; i < n; ++i) {
    OracleVehicle v;
    v.u = uniform(rng, 0.3, 2.5);
    v.v = uniform(rng, -0.3, 0.3);
    v.w = uniform(rng, -0.3, 0.3);
    v.u_d = uniform(rng, 0.3, 2.5);
    s.vehicles.push_back(v);
  }
  for (int i = 0; i < n; ++i) {
    const OracleTerms t = oracle_terms(s, static_cast<std::size_t>(i));
    s.vehicles[static_cast<std::size_t>(i)].theta = t.theta_d + uniform(rng, -0.5, 0.5);
    s.vehicles[static_cast<std::size_t>(i)].psi = t.psi_d + uniform(rng, -kPi, kPi);
  }
  return s;
}

namespace {

bool admissible(const OracleSample& s) {
  for (const OracleVehicle& v : s.vehicles) {
    if (!(std::abs(v.theta) < kPi / 2 - 1e-3)) return false;
  }
  return std::abs(los_geometry(s).gamma_los) < kPi / 2;
}

// Puts every vehicle on its reference: u = u_d, theta = theta_d, psi = psi_d.
void zero_x2(OracleSample& s) {
  for (std::size_t i = 0; i < s.vehicles.size(); ++i) {
    s.vehicles[i].u = s.vehicles[i].u_d;
    const OracleTerms t = oracle_terms(s, i);
    s.vehicles[i].theta = t.theta_d;
    s.vehicles[i].psi = t.psi_d;
  }
}

}  // namespace

OracleResult barycenter_closed_loop_oracle(int samples, std::uint64_t seed, int n,
                                           bool printed_form) {
  OracleResult res;
  std::mt19937_64 rng(seed);
  while (res.accepted < static_cast<std::size_t>(samples)) {
    OracleSample s = random_oracle_sample(rng, n);
    if (!admissible(s)) {
      ++res.rejected;
      continue;
    }
    ++res.accepted;
    const BarycenterRates r = barycenter_rates(s, printed_form);
    const Vec3 diff = (r.direct - r.closed_loop).cwiseAbs();
    res.max_residual = res.max_residual.cwiseMax(diff);
    double x2 = 0.0;
    for (std::size_t i = 0; i < s.vehicles.size(); ++i) {
      const OracleVehicle& v = s.vehicles[i];
      const OracleTerms t = oracle_terms(s, i);
      x2 += std::pow(v.u - v.u_d, 2) + std::pow(wrap_angle(v.theta - t.theta_d), 2) +
            std::pow(wrap_angle(v.psi - t.psi_d), 2);
    }
    const double scale = 1.0 + s.p_b_p.norm() + std::sqrt(x2);
    res.max_relative = std::max(res.max_relative, diff.maxCoeff() / scale);

    OracleSample nominal = s;
    zero_x2(nominal);
    for (std::size_t i = 0; i < nominal.vehicles.size(); ++i) {
      const OracleTerms t = oracle_terms(nominal, i, printed_form);
      res.max_Gy_nominal = std::max(res.max_Gy_nominal, std::abs(t.G_y));
      res.max_Gz_nominal = std::max(res.max_Gz_nominal, std::abs(t.G_z));
    }
    nominal.p_b_p.setZero();
    zero_x2(nominal);
    for (std::size_t i = 0; i < nominal.vehicles.size(); ++i) {
      const OracleTerms t = oracle_terms(nominal, i, printed_form);
      res.max_G_at_origin =
          std::max({res.max_G_at_origin, std::abs(t.G_y), std::abs(t.G_z)});
    }
  }
  return res;
}

// --- desired pitch and yaw rates -------------------------------------------

DesiredRates desired_rates(const DesiredRateInput& in) {
  const VehicleState& s = in.state;
  const double u = s.nu[0], v = s.nu[1], w = s.nu[2], q = s.nu[3], r = s.nu[4];
  const double u_dot = in.nu_dot[0], v_dot = in.nu_dot[1], w_dot = in.nu_dot[2];
  const double theta = s.theta(), psi = s.psi();
  if (!(std::abs(theta) < kPi / 2)) throw DomainError("pitch outside (-pi/2, pi/2)");
  const PathPoint& pt = in.point;
  const Vec3& e = in.error;

  const Vec3 nu_lin(u, v, w);
  const Mat3 R = rotation_matrix(theta, psi);
  const Vec3 p_dot = R * nu_lin;
  const VehicleMotion m = motion_from_velocity(p_dot);
  const VehicleMotion motions[1] = {m};
  const double xi_dot = xi_update(motions, pt, e.x(), in.k_xi);
  const Vec3 e_dot = barycenter_kinematics(motions, pt, e, xi_dot);

  const double D = std::sqrt(in.delta0 * in.delta0 + e.squaredNorm());
  const double D_dot = e.dot(e_dot) / D;
  const double gamma_los = pt.theta_p + std::atan(e.z() / D);
  const double chi_los = pt.psi_p - std::atan(e.y() / D);
  const double gamma_los_dot =
      pt.kappa * xi_dot + (D * e_dot.z() - e.z() * D_dot) / (D * D + e.z() * e.z());
  const double chi_los_dot =
      pt.iota * xi_dot - (D * e_dot.y() - e.y() * D_dot) / (D * D + e.y() * e.y());

  // inertial acceleration from d/dt (R nu)
  const double theta_dot = q, psi_dot = r / std::cos(theta);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cp = std::cos(psi), sp = std::sin(psi);
  Mat3 Rz, Ry, dRz, dRy;
  Rz << cp, -sp, 0, sp, cp, 0, 0, 0, 1;
  Ry << ct, 0, st, 0, 1, 0, -st, 0, ct;
  dRz << -sp, -cp, 0, cp, -sp, 0, 0, 0, 0;
  dRy << -st, 0, ct, 0, 0, 0, -ct, 0, -st;
  const Mat3 R_dot = dRz * Ry * psi_dot + Rz * dRy * theta_dot;
  const Vec3 p_ddot = R_dot * nu_lin + R * Vec3(u_dot, v_dot, w_dot);

  const double h2 = p_dot.x() * p_dot.x() + p_dot.y() * p_dot.y();
  const double h = std::sqrt(h2);
  const double h_dot = (p_dot.x() * p_ddot.x() + p_dot.y() * p_ddot.y()) / h;
  const double gamma_dot = (-p_ddot.z() * h + p_dot.z() * h_dot) / (h2 + p_dot.z() * p_dot.z());
  const double chi_dot = (p_dot.x() * p_ddot.y() - p_dot.y() * p_ddot.x()) / h2;

  DesiredRates out;
  const double a = gamma_los - m.gamma, b = chi_los - m.chi;
  const double blend = 0.5 * (1.0 + std::cos(a) * std::cos(b));
  if (blend > in.u_floor_fraction) {
    out.u_d = in.U_los * blend;
    out.u_d_dot = 0.5 * in.U_los *
                  (-std::sin(a) * std::cos(b) * (gamma_los_dot - gamma_dot) -
                   std::cos(a) * std::sin(b) * (chi_los_dot - chi_dot));
  } else {
    out.u_d = in.U_los * in.u_floor_fraction;
  }
  const double u_d = out.u_d, u_d_dot = out.u_d_dot;
  out.theta_d = gamma_los + std::atan(w / u_d);
  out.q_d = gamma_los_dot + (u_d * w_dot - w * u_d_dot) / (u_d * u_d + w * w);

  const double U_d = std::sqrt(u_d * u_d + v * v + w * w);
  const double U_d_dot = (u_d * u_d_dot + v * v_dot + w * w_dot) / U_d;
  const double beta_d = safe_asin(v / U_d);
  const double beta_d_dot = (v_dot * U_d - v * U_d_dot) / (U_d * std::sqrt(U_d * U_d - v * v));
  out.psi_d = chi_los - beta_d;
  out.psi_d_dot = chi_los_dot - beta_d_dot;
  out.r_d = out.psi_d_dot * std::cos(out.theta_d);
  return out;
}

RateOracleResult desired_rate_oracle(Scenario sc, double h, double t_end, double t_skip,
                                     int stride) {
  if (sc.size() != 1) throw ConfigError("desired-rate oracle needs a single vehicle");
  sc.dt = h;
  sc.t_end = t_end;
  sc.force_limit = 0.0;
  const Simulator sim(sc);
  VecX x = sim.initial_state();
  Mode mode = sim.initial_mode(x);
  const auto steps = static_cast<std::size_t>(std::floor(t_end / h + 1e-9));
  std::vector<Evaluation> evals;
  evals.reserve(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) {
    evals.push_back(sim.evaluate(x, mode));
    if (k < steps) sim.step(x, mode, static_cast<double>(k) * h);
  }
  RateOracleResult res;
  const auto first = static_cast<std::size_t>(std::ceil(t_skip / h));
  for (std::size_t k = std::max<std::size_t>(first, 1); k + 1 <= steps;
       k += static_cast<std::size_t>(stride)) {
    const Evaluation& ev = evals[k];
    const VehicleEvaluation& ve = ev.vehicles[0];
    if (ve.decomposition.clamped || ve.decomposition.degenerate) continue;
    DesiredRateInput in;
    in.state = ve.state;
    in.nu_dot = ve.nu_dot;
    in.point = ev.point;
    in.error = ev.error;
    in.delta0 = sc.los.delta0;
    in.U_los = sc.los.U_los;
    in.k_xi = sc.k_xi;
    in.u_floor_fraction = sc.decompose.u_floor_fraction;
    const DesiredRates d = desired_rates(in);
    const GuidanceCommand& prev = evals[k - 1].vehicles[0].decomposition.command;
    const GuidanceCommand& next = evals[k + 1].vehicles[0].decomposition.command;
    const double dtheta = (next.theta_d - prev.theta_d) / (2 * h);
    const double dpsi = wrap_angle(next.psi_d - prev.psi_d) / (2 * h);
    res.max_q_error = std::max(res.max_q_error, std::abs(d.q_d - dtheta));
    res.max_psi_error = std::max(res.max_psi_error, std::abs(d.psi_d_dot - dpsi));
    ++res.samples;
  }
  return res;
}

// --- convergence probes ----------------------------------------------------

std::vector<ProbeRow> usges_probe(const nlohmann::json& base, const Vec3& offset,
                                  const std::vector<double>& scales, double t0,
                                  double floor) {
  std::vector<ProbeRow> rows;
  for (double s : scales) {
    nlohmann::json doc = base;
    const Vec3 p0 = s * offset;
    doc["initial"]["p0"] = {p0.x(), p0.y(), p0.z()};
    const Scenario sc = scenario_from_json(doc);
    const SimLog log = run(sc);
    ProbeRow row;
    row.scale = s;
    row.initial_error = log.records.front().p_b_p.norm();
    if (log.abort) {
      row.abort = log.abort->message;
      rows.push_back(row);
      continue;
    }
    const std::vector<double> t = times(log);
    const std::vector<double> e = path_error_norm(log);
    double t1 = t.back();
    for (std::size_t k = 0; k < t.size(); ++k) {
      if (t[k] >= t0 && e[k] < floor) {
        t1 = t[k];
        break;
      }
    }
    row.fit = fit_envelope(t, e, t0, t1);
    row.converged = row.fit.applicable && row.fit.rate > 0.0 && e.back() < e.front();
    rows.push_back(row);
  }
  return rows;
}

ExponentialFit cross_track_rate(const SimLog& log, double small, double floor) {
  std::vector<double> t, e;
  for (const SimRecord& r : log.records) {
    t.push_back(r.t);
    e.push_back(std::hypot(r.p_b_p.y(), r.p_b_p.z()));
  }
  double t0 = kInf, t1 = t.empty() ? 0.0 : t.back();
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (std::isinf(t0) && e[k] < small) t0 = t[k];
    if (!std::isinf(t0) && e[k] < floor) {
      t1 = t[k];
      break;
    }
  }
  if (std::isinf(t0)) {
    ExponentialFit f;
    f.reason = "cross-track error never enters the small-error window";
    return f;
  }
  return fit_envelope(t, e, t0, t1);
}

// --- autopilot step response -----------------------------------------------

ExponentialFit fit_decay(const std::vector<double>& t, const std::vector<double>& e,
                         double upper, double lower) {
  if (e.empty()) return {};
  std::vector<double> env(e.size());
  double running = 0.0;
  for (std::size_t k = e.size(); k-- > 0;) {
    running = std::max(running, std::abs(e[k]));
    env[k] = running;
  }
  const double e0 = std::abs(e.front());
  double t0 = kInf, t1 = t.back();
  for (std::size_t k = 0; k < e.size(); ++k) {
    if (std::isinf(t0) && env[k] < upper * e0) t0 = t[k];
    if (env[k] < lower * e0) {
      t1 = t[k];
      break;
    }
  }
  if (std::isinf(t0)) {
    ExponentialFit f;
    f.reason = "error never drops below the upper fraction";
    return f;
  }
  return fit_envelope(t, e, t0, t1);
}

StepResponse autopilot_step_response(const VehicleParams& p, const AutopilotGains& g,
                                     const SignSmoothing& sign, const OceanCurrent& c,
                                     double filter_omega, const Vec3& start,
                                     const Vec3& target, double t_end, double dt) {
  g.validate();
  const ReferenceFilter filter(filter_omega > 0.0 ? filter_omega : 1.0);
  // eta(5), nu(5), V_hat(3), theta_hat_q(9), theta_hat_r(9), filters(6)
  constexpr int kDim = 37;
  using State = Eigen::Matrix<double, kDim, 1>;
  State x = State::Zero();
  x[3] = start[1];
  x[4] = start[2];
  x[5] = start[0];
  x[31] = start[0];
  x[33] = start[1];
  x[35] = start[2];
  const double target_u = target[0], target_theta = target[1], target_psi = target[2];
  const bool raw = !(filter_omega > 0.0);
  if (raw) {
    x[31] = target_u;
    x[33] = target_theta;
    x[35] = target_psi;
  }

  auto deriv = [&](const State& s) {
    VehicleState vs;
    vs.eta = s.segment<5>(0);
    vs.nu = s.segment<5>(5);
    ObserverState obs;
    obs.V_hat_c = s.segment<3>(10);
    obs.theta_hat_q = s.segment<9>(13);
    obs.theta_hat_r = s.segment<9>(22);
    References ref;
    ref.u_d = s[31];
    ref.u_d_dot = s[32];
    ref.theta_d = s[33];
    ref.theta_d_dot = s[34];
    ref.theta_d_ddot = raw ? 0.0 : filter.acceleration(s[33], s[34], target_theta);
    ref.psi_d = s[35];
    ref.psi_d_dot = s[36];
    ref.psi_d_ddot = raw ? 0.0 : filter.acceleration(s[35], s[36], target_psi);
    const ComponentTerms terms = component_terms(p, vs, c);
    const AutopilotOutput out = autopilot(vs, ref, g, obs, terms, sign);
    State d;
    d.segment<5>(0) = kinematics(vs);
    d.segment<5>(5) = dynamics(p, vs, c, out.forces, terms);
    d.segment<3>(10) = out.observer_rates.V_hat_c;
    d.segment<9>(13) = out.observer_rates.theta_hat_q;
    d.segment<9>(22) = out.observer_rates.theta_hat_r;
    d[31] = s[32];
    d[32] = filter.acceleration(s[31], s[32], target_u);
    d[33] = s[34];
    d[34] = ref.theta_d_ddot;
    d[35] = s[36];
    d[36] = ref.psi_d_ddot;
    if (raw) d.segment<6>(31).setZero();
    return d;
  };

  StepResponse res;
  const auto steps = static_cast<std::size_t>(std::floor(t_end / dt + 1e-9));
  std::vector<double> obs_norm;
  for (std::size_t k = 0; k <= steps; ++k) {
    res.t.push_back(static_cast<double>(k) * dt);
    res.u_error.push_back(x[5] - target_u);
    res.theta_error.push_back(x[3] - target_theta);
    res.psi_error.push_back(wrap_angle(x[4] - target_psi));
    obs_norm.push_back(x.segment<21>(10).norm());
    if (k == steps) break;
    const State k1 = deriv(x);
    const State k2 = deriv(x + 0.5 * dt * k1);
    const State k3 = deriv(x + 0.5 * dt * k2);
    const State k4 = deriv(x + dt * k3);
    x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!x.allFinite()) throw DomainError("step response diverged");
  }
  const std::size_t half = obs_norm.size() / 2, quarter = obs_norm.size() * 3 / 4;
  for (std::size_t k = 0; k < obs_norm.size(); ++k) {
    res.max_observer_norm = std::max(res.max_observer_norm, obs_norm[k]);
    if (k < half) res.observer_norm_first_half = std::max(res.observer_norm_first_half, obs_norm[k]);
    if (k >= quarter) {
      res.observer_norm_last_quarter = std::max(res.observer_norm_last_quarter, obs_norm[k]);
    }
  }
  return res;
}

}  // namespace auvform
