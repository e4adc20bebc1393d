#pragma once

// Null-space-based task composition for the fleet: collision avoidance,
// formation keeping and line-of-sight path following, each producing a
// stacked velocity in R^{3n}, plus the per-vehicle decomposition of the
// composed velocity into surge / pitch / yaw references.

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "auvform/path.hpp"
#include "auvform/types.hpp"

namespace auvform {

struct FormationSpec {
  std::vector<Vec3> offsets;  // desired positions in the formation frame

  std::size_t size() const { return offsets.size(); }
  // Throws ConfigError if empty or the offsets do not sum to zero.
  void validate() const;
};

struct TaskOutput {
  VecX sigma;
  VecX sigma_d;
  VecX sigma_d_dot;
  MatX jacobian;  // rows = dim(sigma), cols = 3n
  bool active = false;
  // Vehicle index pairs (i < j), one per COLAV row. Empty for other tasks.
  std::vector<std::pair<int, int>> pairs;

  VecX error() const { return sigma - sigma_d; }
};

using VehiclePair = std::pair<int, int>;

// Pairs whose distance is below d_colav.
TaskOutput colav_task(std::span<const Vec3> positions, double d_colav);
// COLAV task over an explicit pair set (used with hysteresis).
TaskOutput colav_task(std::span<const Vec3> positions, double d_colav,
                      std::span<const VehiclePair> pairs);

// Pair-wise activation with hysteresis: a pair turns on below d_colav and
// off above d_colav + hysteresis.
std::vector<VehiclePair> update_colav_pairs(std::span<const Vec3> positions,
                                            std::span<const VehiclePair> previous,
                                            double d_colav, double hysteresis);

// sigma_i = p_i - p_b, desired R(theta_p, psi_p) p_f_i, i = 1..n-1.
// `frame_rate` is the path frame's angular velocity (path frame coordinates).
TaskOutput formation_task(std::span<const Vec3> positions, double theta_p,
                          double psi_p, const FormationSpec& spec,
                          const Vec3& frame_rate = Vec3::Zero());

// Moore-Penrose pseudoinverse from the SVD; singular values below
// rel_tol * sigma_max are treated as zero.
MatX pseudo_inverse(const MatX& J, double rel_tol = 1e-8);

// J^+ (sigma_d_dot - Lambda sigma_tilde).
VecX clik_velocity(const TaskOutput& task, const MatX& gain);
VecX clik_velocity(const TaskOutput& task, double gain);

struct LosOutput {
  Vec3 velocity = Vec3::Zero();
  double gamma = 0;
  double chi = 0;
  double lookahead = 0;
};

LosOutput los_velocity(const Vec3& p_b_p, double theta_p, double psi_p,
                       double U_los, double delta0);

// Kronecker 1_n (x) v.
VecX stack_velocity(const Vec3& v, std::size_t n);

// Projector I - J^+ J; identity when J has no rows.
MatX null_space_projector(const MatX& J);

VecX nsb_combine(const VecX& v_d1, const VecX& v_d2, const VecX& v_d3,
                 const MatX& J1, const MatX& J2, bool colav_active);

struct DecomposeOptions {
  double theta_max = 80.0 * kPi / 180.0;  // |theta_d| clamp
  double u_floor_fraction = 0.05;         // u_d >= fraction * U_NSB
};

struct GuidanceCommand {
  double u_d = 0;
  double theta_d = 0;
  double psi_d = 0;
};

struct Decomposition {
  GuidanceCommand command;
  double U_nsb = 0;
  double gamma_nsb = 0;
  double chi_nsb = 0;
  double alpha_d = 0;
  double beta_d = 0;
  bool degenerate = false;  // U_NSB == 0, previous command held
  bool clamped = false;     // theta_d hit the pitch clamp
};

// Surge/pitch/yaw references for one vehicle from its NSB velocity, with
// angle-of-attack and sideslip compensation. `sway`, `heave` are the body
// velocities v, w; gamma/chi are the vehicle's flight-path angle and course.
Decomposition decompose_references(const Vec3& v_nsb, double sway, double heave,
                                   double gamma, double chi,
                                   const GuidanceCommand& previous = {},
                                   const DecomposeOptions& opts = {});

}  // namespace auvform
