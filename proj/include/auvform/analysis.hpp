#pragma once

// Numerical checks of the closed-loop stability analysis: lookahead and
// curvature conditions, the closed-loop barycenter error dynamics, desired
// pitch/yaw rates and exponential-convergence probes.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "auvform/path.hpp"
#include "auvform/sim_engine.hpp"
#include "auvform/vehicle_model.hpp"

namespace auvform {

struct StabilityReport {
  double max_kappa = 0, max_iota = 0;
  double sampled_kappa = 0, sampled_iota = 0;  // from sampling alone
  double ratio_v = 0, ratio_w = 0;             // min |Y/X|, +inf if X vanishes
  bool ratio_v_unbounded = false, ratio_w_unbounded = false;
  bool kappa_ok = false, iota_ok = false;
  double delta0 = 0;
  double delta0_lower_bound = 0;
  bool delta0_ok = false;
  double theta_p_max = 0;
  bool theta_ok = false;
  bool overall_ok = false;
};

// max{3 / (n r_v - 2|iota|), 3 / (n r_w - 2|kappa|)}; +inf when a denominator
// is not positive.
double lookahead_lower_bound(double ratio_v, double ratio_w, double max_kappa,
                             double max_iota, int n);

StabilityReport evaluate_conditions(double ratio_v, double ratio_w, double max_kappa,
                                    double max_iota, double theta_p_max, int n,
                                    double delta0);

// Curvatures are the larger of the sampled maxima and the path's closed-form
// metadata. The envelope covers u in [0, u_max] and |u_c| <= V_c_max.
StabilityReport check_conditions(const PathSpec& path, const VehicleParams& params, int n,
                                 double V_c_max, double delta0, OperatingEnvelope env);

std::string format_report(const StabilityReport& r);

// --- vehicle model ---------------------------------------------------------

struct ModelOracleResult {
  double max_relative = 0;         // component vs matrix form of nu_dot
  double max_skew = 0;             // |C + C^T|
  double max_orthonormality = 0;   // |R^T R - I|
};

ModelOracleResult model_oracle(const VehicleParams& p, int samples, std::uint64_t seed);

// --- closed-loop barycenter error dynamics ---------------------------------

// One vehicle in pure path-following mode. Angles and speeds follow the
// (U, gamma, chi) convention of the error analysis: U = |(u, v, w)|,
// gamma = theta - atan(w/u), chi = psi + asin(v/U).
struct OracleVehicle {
  double u = 1, v = 0, w = 0;
  double theta = 0, psi = 0;
  double u_d = 1;  // surge reference
};

struct OracleSample {
  Vec3 p_b_p = Vec3::Zero();
  double theta_p = 0, psi_p = 0;
  double kappa = 0, iota = 0;
  double speed = 1;  // |d p_p / d xi|
  double k_xi = 1;
  double delta0 = 5;
  std::vector<OracleVehicle> vehicles;
};

struct OracleTerms {
  double theta_d = 0, psi_d = 0;  // LOS references of one vehicle
  double U_d = 0;
  double G_y = 0, G_z = 0;
};

// LOS attitude references of vehicle i and its perturbation terms.
OracleTerms oracle_terms(const OracleSample& s, std::size_t i, bool printed_form = false);

struct BarycenterRates {
  Vec3 direct = Vec3::Zero();       // straight from the vehicle velocities
  Vec3 closed_loop = Vec3::Zero();  // nominal LOS terms plus G_y, G_z
};

BarycenterRates barycenter_rates(const OracleSample& s, bool printed_form = false);

struct OracleResult {
  std::size_t accepted = 0, rejected = 0;
  Vec3 max_residual = Vec3::Zero();
  double max_relative = 0;  // residual / (1 + |state|)
  double max_G_at_origin = 0;  // X1 = X2 = 0
  // X2 = 0 with X1 random: G_y vanishes, G_z keeps a term quadratic in y
  // proportional to sin(theta_p)
  double max_Gy_nominal = 0, max_Gz_nominal = 0;
};

OracleSample random_oracle_sample(std::mt19937_64& rng, int n);

OracleResult barycenter_closed_loop_oracle(int samples, std::uint64_t seed, int n = 3,
                                           bool printed_form = false);

// --- desired pitch and yaw rates -------------------------------------------

// A single vehicle following the LOS reference, with its true motion.
struct DesiredRateInput {
  VehicleState state;
  Vec5 nu_dot = Vec5::Zero();
  PathPoint point;
  Vec3 error = Vec3::Zero();  // p - p_p in the path frame
  double delta0 = 5, U_los = 1, k_xi = 1;
  double u_floor_fraction = 0.05;
};

struct DesiredRates {
  double u_d = 0, theta_d = 0, psi_d = 0;
  double u_d_dot = 0;
  double q_d = 0;        // theta_d rate
  double psi_d_dot = 0;  // psi_d rate
  double r_d = 0;        // psi_d_dot * cos(theta_d)
};

DesiredRates desired_rates(const DesiredRateInput& in);

struct RateOracleResult {
  std::size_t samples = 0;
  double max_q_error = 0;    // |q_d - central difference of theta_d|
  double max_psi_error = 0;  // |psi_d_dot - central difference of psi_d|
};

// Runs a single-vehicle LOS scenario with step h and compares the closed forms
// with differenced raw references every `stride` steps after t_skip.
RateOracleResult desired_rate_oracle(Scenario sc, double h = 1e-3, double t_end = 40,
                                     double t_skip = 1, int stride = 50);

// --- convergence probes ----------------------------------------------------

struct ProbeRow {
  double scale = 1;
  double initial_error = 0;
  bool converged = false;
  ExponentialFit fit;  // envelope of |p_b^p|
  std::string abort;
};

// Runs the scenario document with initial.p0 = scale * offset and fits the
// envelope of |p_b^p| over [t0, t_end].
std::vector<ProbeRow> usges_probe(const nlohmann::json& base, const Vec3& offset,
                                  const std::vector<double>& scales, double t0,
                                  double floor = 1e-4);

// Fits the envelope of the cross-track error |(y, z)| from the first time it
// drops below `small` until it reaches `floor`.
ExponentialFit cross_track_rate(const SimLog& log, double small, double floor = 1e-5);

// --- autopilot step response -----------------------------------------------

struct StepResponse {
  std::vector<double> t;
  std::vector<double> u_error, theta_error, psi_error;  // against the step target
  double max_observer_norm = 0;
  double observer_norm_first_half = 0, observer_norm_last_quarter = 0;
};

// Envelope fit over the part of a step error between upper*|e0| and
// lower*|e0| (first crossings of the envelope), e0 the initial error.
ExponentialFit fit_decay(const std::vector<double>& t, const std::vector<double>& e,
                         double upper = 0.1, double lower = 1e-4);

// One vehicle starting at speed start[0] and attitude (start[1], start[2]) with
// zero rates; the raw references jump to target = (u, theta, psi) at t = 0 and
// pass through the reference filter. filter_omega <= 0 applies the step
// directly, with zero reference derivatives.
StepResponse autopilot_step_response(const VehicleParams& p, const AutopilotGains& g,
                                     const SignSmoothing& sign, const OceanCurrent& c,
                                     double filter_omega, const Vec3& start,
                                     const Vec3& target, double t_end, double dt = 0.01);

}  // namespace auvform
