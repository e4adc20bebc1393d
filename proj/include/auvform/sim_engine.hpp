#pragma once

// Closed-loop simulation of a fleet of AUVs following a path in formation:
// scenario configuration, the monolithic state vector, one RK4 step with
// location of COLAV switching instants, full runs, CSV telemetry and metrics.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "auvform/autopilots.hpp"
#include "auvform/nsb_guidance.hpp"
#include "auvform/path.hpp"
#include "auvform/vehicle_model.hpp"

namespace auvform {

struct PathConfig {
  std::string type = "spiral";  // spiral | line | polyline-spline
  double a = 40, b = 20, omega = kPi / 100;
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitX();
  std::vector<Vec3> waypoints;

  PathPtr build() const;
};

struct NsbConfig {
  double lambda1 = 1.0;   // COLAV gain, Lambda_1 = lambda1 * I
  double lambda2 = 0.05;  // formation gain
  double d_colav = 10.0;
  double d_min = 5.0;
  double hysteresis = 0.5;
  // An active pair closer than d_colav - release_tolerance is never released;
  // beyond that it is released once the lower-priority velocity separates it.
  bool release = true;
  double release_tolerance = 0.01;
  bool colav = true;
  bool formation = true;
};

struct LosConfig {
  double delta0 = 5.0;
  double U_los = 1.0;
};

enum class LookaheadPolicy { kOff, kWarn, kError };

struct Scenario {
  std::vector<VehicleParams> params;
  std::vector<VehicleState> initial;
  OceanCurrent current;
  FormationSpec formation;
  PathConfig path_config;
  PathPtr path;
  AutopilotGains gains;
  SignSmoothing sign;
  NsbConfig nsb;
  LosConfig los;
  double k_xi = 1.0;
  double xi0 = 0.0;
  double filter_omega = 2.0;
  DecomposeOptions decompose;
  double force_limit = 0.0;   // |f_u|, |t_q|, |t_r| bound; 0 disables
  double observer_cap = 0.0;  // estimate norm bound; 0 disables
  double dt = 0.01;
  double t_end = 150.0;
  std::uint64_t seed = 0;
  OperatingEnvelope envelope;
  LookaheadPolicy lookahead_policy = LookaheadPolicy::kError;
  std::vector<std::string> warnings;

  std::size_t size() const { return initial.size(); }
  // Throws ConfigError / DomainError. Applies the lookahead policy, appending
  // to `warnings` in warn mode.
  void validate();
};

// Scenario schema with every default filled in (reference values, surrogate
// vehicle, inverted-triangle start on the spiral).
nlohmann::json default_scenario_json();

// Recursively overlays `patch` on `base`. Unknown keys and type changes are
// ConfigErrors naming the dotted key.
nlohmann::json merge_scenario_json(const nlohmann::json& base,
                                   const nlohmann::json& patch);

// Applies "dotted.key=value". The value is parsed as JSON, falling back to a
// plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Builds and validates a scenario from a complete (merged) document. Relative
// vehicle-parameter file paths resolve against `base_dir`.
Scenario scenario_from_json(const nlohmann::json& j, const std::string& base_dir = ".");

// Defaults, then the optional file, then overrides in order.
Scenario load_scenario(const std::string& path,
                       const std::vector<std::string>& overrides = {});
Scenario default_scenario(const std::vector<std::string>& overrides = {});

// Per-vehicle block of the monolithic state: eta(5), nu(5), V_hat_c(3),
// theta_hat_q(9), theta_hat_r(9) and three reference filters (value, rate)
// for u_d, theta_d, psi_d. The path parameter xi is the last entry.
inline constexpr int kVehicleBlock = 37;
inline constexpr int kFilterOffset = 31;

VehicleState vehicle_state(const VecX& x, std::size_t i);
ObserverState observer_state(const VecX& x, std::size_t i);
inline double path_parameter(const VecX& x) { return x[x.size() - 1]; }

// Discrete part of the closed loop, latched over an integration step.
struct Mode {
  std::vector<VehiclePair> pairs;
  std::vector<GuidanceCommand> previous;
};

struct VehicleEvaluation {
  VehicleState state;
  Vec3 velocity = Vec3::Zero();  // inertial
  VehicleMotion motion;
  Decomposition decomposition;
  References references;
  AutopilotOutput control;
  GeneralizedForces forces;
  Vec5 nu_dot = Vec5::Zero();
};

struct Evaluation {
  PathPoint point;
  Vec3 p_b = Vec3::Zero();
  Vec3 error = Vec3::Zero();      // p_b^p
  Vec3 error_dot = Vec3::Zero();  // d/dt p_b^p
  double xi_dot = 0;
  LosOutput los;
  TaskOutput colav;
  TaskOutput formation;
  MatX formation_jacobian;  // 0 rows when the formation task is off
  VecX v_formation, v_los;
  VecX v_lower;  // formation + path following, without COLAV
  VecX v_nsb;
  std::vector<VehicleEvaluation> vehicles;
  VecX derivative;
};

struct ColavEvent {
  double t = 0;
  VehiclePair pair;
  bool activated = false;
};

struct VehicleRecord {
  Vec5 eta = Vec5::Zero();
  Vec5 nu = Vec5::Zero();
  GuidanceCommand command;
  GeneralizedForces forces;
  ObserverState observer;
};

struct SimRecord {
  double t = 0;
  std::vector<VehicleRecord> vehicles;
  double xi = 0, xi_dot = 0;
  Vec3 p_b_p = Vec3::Zero();
  VecX formation_error;          // sigma_2 - sigma_d_2, 3(n-1) entries
  std::vector<double> distances;  // pairs (1,2), (1,3), ..., (n-1,n)
  bool colav_active = false;
};

struct AbortInfo {
  std::size_t step = 0;
  double t = 0;
  std::string message;
};

struct SimLog {
  std::size_t n_vehicles = 0;
  std::vector<SimRecord> records;
  std::vector<ColavEvent> events;
  std::optional<AbortInfo> abort;
};

class Simulator {
 public:
  explicit Simulator(Scenario scenario);

  const Scenario& scenario() const { return scenario_; }

  VecX initial_state() const;
  Mode initial_mode(const VecX& x) const;

  Evaluation evaluate(const VecX& x, const Mode& mode) const;

  // One RK4 step of length `h` with the mode held fixed.
  VecX rk4(const VecX& x, const Mode& mode, double h) const;

  // Advances by dt. The COLAV pair set is refreshed first; if it would change
  // inside the step, the switching instant is located by bisection and the
  // step is split there. Switches are appended to `events` (if given).
  void step(VecX& x, Mode& mode, double t, std::vector<ColavEvent>* events = nullptr) const;

  SimRecord record(const VecX& x, const Mode& mode, double t) const;

  // Full run on the uniform grid k * dt, k = 0..floor(t_end / dt). A
  // pitch-domain violation stops the run and fills `abort`.
  SimLog run() const;

 private:
  void refresh_pairs(const VecX& x, Mode& mode, double t,
                     std::vector<ColavEvent>* events) const;
  std::vector<VehiclePair> next_pairs(const VecX& x,
                                      const std::vector<VehiclePair>& pairs) const;

  Scenario scenario_;
};

SimLog run(const Scenario& scenario);

// CSV telemetry with a fixed column order and 17 significant digits.
std::vector<std::string> csv_header(std::size_t n_vehicles);
void write_csv(const SimLog& log, std::ostream& out);
void write_csv(const SimLog& log, const std::string& path);
// Observer states are not part of the CSV and read back as zero.
SimLog read_csv(std::istream& in);
SimLog read_csv_file(const std::string& path);

struct ExponentialFit {
  bool applicable = false;
  double rate = 0;       // lambda in k exp(-lambda t)
  double amplitude = 0;  // k (at t = 0)
  double r2 = 0;
  std::string reason;
};

// Least squares on log|y| over [t0, t1]. Not applicable if y changes sign,
// touches zero or the window holds fewer than three samples.
ExponentialFit fit_exponential(const std::vector<double>& t,
                               const std::vector<double>& y, double t0, double t1);
// Fits the running maximum taken from the right, i.e. the tightest
// non-increasing envelope of |y|.
ExponentialFit fit_envelope(const std::vector<double>& t, const std::vector<double>& y,
                            double t0, double t1);

struct MetricsOptions {
  double formation_fit_delay = 5.0;  // s after COLAV last switches off
  double formation_fit_floor = 1e-3;  // stop the fit once the error drops below
  double formation_fit_decades = 1.0;  // ... or has fallen this many decades
  double path_fit_start = 50.0;
  double path_fit_floor = 1e-4;
};

struct Metrics {
  double final_path_error = 0;
  double min_distance = 0;
  bool colav_activated = false;
  bool colav_deactivated = false;
  double colav_last_off = 0;
  double max_formation_error_after_colav = 0;
  ExponentialFit formation_rate;
  double formation_fit_t0 = 0, formation_fit_t1 = 0;
  ExponentialFit path_rate;
  double lyapunov_nonincreasing_fraction = 0;
  std::size_t q_samples = 0;
  std::size_t q_positive = 0;
};

Metrics compute_metrics(const SimLog& log, const Scenario& scenario,
                        const MetricsOptions& opts = {});

std::vector<double> column(const SimLog& log, const std::string& name);
std::vector<double> times(const SimLog& log);
std::vector<double> path_error_norm(const SimLog& log);
std::vector<double> formation_error_norm(const SimLog& log);

}  // namespace auvform
