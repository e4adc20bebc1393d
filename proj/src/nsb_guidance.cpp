#include "auvform/nsb_guidance.hpp"

#include <algorithm>
#include <cmath>

namespace auvform {

void FormationSpec::validate() const {
  if (offsets.empty()) throw ConfigError("formation needs at least one vehicle");
  Vec3 sum = Vec3::Zero();
  double scale = 1.0;
  for (const Vec3& p : offsets) {
    sum += p;
    scale = std::max(scale, p.cwiseAbs().maxCoeff());
  }
  if (sum.cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ConfigError("formation offsets must sum to zero");
  }
}

TaskOutput colav_task(std::span<const Vec3> positions, double d_colav,
                      std::span<const VehiclePair> pairs) {
  if (!(d_colav > 0.0)) throw ConfigError("d_colav must be positive");
  const auto n = static_cast<Eigen::Index>(positions.size());
  const auto m = static_cast<Eigen::Index>(pairs.size());
  TaskOutput t;
  t.sigma.resize(m);
  t.sigma_d = VecX::Constant(m, d_colav);
  t.sigma_d_dot = VecX::Zero(m);
  t.jacobian = MatX::Zero(m, 3 * n);
  t.pairs.assign(pairs.begin(), pairs.end());
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto [i, j] = pairs[static_cast<std::size_t>(k)];
    const Vec3 diff = positions[i] - positions[j];
    const double dist = diff.norm();
    if (!(dist > 0.0)) {
      throw DomainError("coincident vehicles " + std::to_string(i) + " and " +
                        std::to_string(j) + " in an active COLAV pair");
    }
    t.sigma[k] = dist;
    const Vec3 grad = diff / dist;
    t.jacobian.block<1, 3>(k, 3 * i) = grad.transpose();
    t.jacobian.block<1, 3>(k, 3 * j) = -grad.transpose();
  }
  t.active = m > 0;
  return t;
}

TaskOutput colav_task(std::span<const Vec3> positions, double d_colav) {
  std::vector<VehiclePair> pairs;
  const int n = static_cast<int>(positions.size());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if ((positions[i] - positions[j]).norm() < d_colav) pairs.emplace_back(i, j);
    }
  }
  return colav_task(positions, d_colav, pairs);
}

std::vector<VehiclePair> update_colav_pairs(std::span<const Vec3> positions,
                                            std::span<const VehiclePair> previous,
                                            double d_colav, double hysteresis) {
  std::vector<VehiclePair> out;
  const int n = static_cast<int>(positions.size());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double dist = (positions[i] - positions[j]).norm();
      const bool was_active =
          std::find(previous.begin(), previous.end(), VehiclePair{i, j}) !=
          previous.end();
      if (dist < d_colav || (was_active && dist <= d_colav + hysteresis)) {
        out.emplace_back(i, j);
      }
    }
  }
  return out;
}

TaskOutput formation_task(std::span<const Vec3> positions, double theta_p,
                          double psi_p, const FormationSpec& spec,
                          const Vec3& frame_rate) {
  const auto n = static_cast<Eigen::Index>(positions.size());
  if (n < 2) throw ConfigError("formation task needs at least two vehicles");
  if (static_cast<Eigen::Index>(spec.size()) != n) {
    throw ConfigError("formation size does not match the number of vehicles");
  }
  Vec3 p_b = Vec3::Zero();
  for (const Vec3& p : positions) p_b += p;
  p_b /= static_cast<double>(n);

  const Mat3 R = path_rotation(theta_p, psi_p);
  const Eigen::Index rows = 3 * (n - 1);
  TaskOutput t;
  t.sigma.resize(rows);
  t.sigma_d.resize(rows);
  t.sigma_d_dot.resize(rows);
  t.jacobian = MatX::Zero(rows, 3 * n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    const Vec3& offset = spec.offsets[static_cast<std::size_t>(i)];
    t.sigma.segment<3>(3 * i) = positions[static_cast<std::size_t>(i)] - p_b;
    t.sigma_d.segment<3>(3 * i) = R * offset;
    t.sigma_d_dot.segment<3>(3 * i) = R * frame_rate.cross(offset);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double c = (i == j ? 1.0 : 0.0) - inv_n;
      t.jacobian.block<3, 3>(3 * i, 3 * j) = c * Mat3::Identity();
    }
  }
  t.active = true;
  return t;
}

MatX pseudo_inverse(const MatX& J, double rel_tol) {
  if (J.size() == 0) return MatX::Zero(J.cols(), J.rows());
  Eigen::JacobiSVD<MatX> svd(J, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VecX& s = svd.singularValues();
  const double cutoff = rel_tol * (s.size() > 0 ? s[0] : 0.0);
  VecX inv = VecX::Zero(s.size());
  for (Eigen::Index k = 0; k < s.size(); ++k) {
    if (s[k] > cutoff && s[k] > 0.0) inv[k] = 1.0 / s[k];
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

VecX clik_velocity(const TaskOutput& task, const MatX& gain) {
  if (gain.rows() != task.sigma.size() || gain.cols() != task.sigma.size()) {
    throw ConfigError("CLIK gain dimension mismatch");
  }
  if (task.sigma.size() == 0) return VecX::Zero(task.jacobian.cols());
  return pseudo_inverse(task.jacobian) * (task.sigma_d_dot - gain * task.error());
}

VecX clik_velocity(const TaskOutput& task, double gain) {
  if (task.sigma.size() == 0) return VecX::Zero(task.jacobian.cols());
  return pseudo_inverse(task.jacobian) * (task.sigma_d_dot - gain * task.error());
}

LosOutput los_velocity(const Vec3& e, double theta_p, double psi_p, double U_los,
                       double delta0) {
  if (!(delta0 > 0.0) || !(U_los > 0.0)) {
    throw ConfigError("LOS requires delta0 > 0 and U_los > 0");
  }
  LosOutput out;
  out.lookahead = std::sqrt(delta0 * delta0 + e.squaredNorm());
  out.gamma = theta_p + std::atan(e.z() / out.lookahead);
  out.chi = psi_p - std::atan(e.y() / out.lookahead);
  out.velocity = U_los * Vec3(std::cos(out.chi) * std::cos(out.gamma),
                              std::cos(out.gamma) * std::sin(out.chi),
                              -std::sin(out.gamma));
  return out;
}

VecX stack_velocity(const Vec3& v, std::size_t n) {
  VecX out(3 * static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    out.segment<3>(3 * i) = v;
  }
  return out;
}

MatX null_space_projector(const MatX& J) {
  const MatX I = MatX::Identity(J.cols(), J.cols());
  if (J.rows() == 0) return I;
  return I - pseudo_inverse(J) * J;
}

VecX nsb_combine(const VecX& v_d1, const VecX& v_d2, const VecX& v_d3,
                 const MatX& J1, const MatX& J2, bool colav_active) {
  const Eigen::Index dim = v_d3.size();
  if (v_d2.size() != dim || J2.cols() != dim ||
      (colav_active && (v_d1.size() != dim || J1.cols() != dim))) {
    throw ConfigError("NSB dimension mismatch");
  }
  const VecX lower = v_d2 + null_space_projector(J2) * v_d3;
  if (!colav_active) return lower;
  return v_d1 + null_space_projector(J1) * lower;
}

Decomposition decompose_references(const Vec3& v_nsb, double sway, double heave,
                                   double gamma, double chi,
                                   const GuidanceCommand& previous,
                                   const DecomposeOptions& opts) {
  Decomposition d;
  d.U_nsb = v_nsb.norm();
  if (!(d.U_nsb > 0.0)) {
    d.degenerate = true;
    d.command = previous;
    return d;
  }
  d.gamma_nsb = -safe_asin(v_nsb.z() / d.U_nsb);
  d.chi_nsb = std::atan2(v_nsb.y(), v_nsb.x());

  const double blend = 0.5 * (1.0 + std::cos(d.gamma_nsb - gamma) *
                                        std::cos(d.chi_nsb - chi));
  const double u_d = d.U_nsb * std::max(blend, opts.u_floor_fraction);
  d.alpha_d = std::atan(heave / u_d);
  d.beta_d = safe_asin(sway / std::sqrt(u_d * u_d + sway * sway + heave * heave));

  double theta_d = d.gamma_nsb + d.alpha_d;
  if (std::abs(theta_d) > opts.theta_max) {
    theta_d = std::copysign(opts.theta_max, theta_d);
    d.clamped = true;
  }
  d.command = {u_d, theta_d, d.chi_nsb - d.beta_d};
  return d;
}

}  // namespace auvform
