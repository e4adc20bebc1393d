#include "auvform/sim_engine.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "auvform/analysis.hpp"

namespace auvform {

using nlohmann::json;

namespace {

constexpr int kMaxSplitsPerStep = 16;

Vec3 vec3_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3) {
    throw ConfigError("'" + key + "' must be an array of three numbers");
  }
  Vec3 v;
  for (int k = 0; k < 3; ++k) {
    if (!j[k].is_number()) throw ConfigError("'" + key + "' must hold numbers");
    v[k] = j[k].get<double>();
  }
  return v;
}

Vec5 vec5_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 5) {
    throw ConfigError("'" + key + "' must be an array of five numbers");
  }
  Vec5 v;
  for (int k = 0; k < 5; ++k) {
    if (!j[k].is_number()) throw ConfigError("'" + key + "' must hold numbers");
    v[k] = j[k].get<double>();
  }
  return v;
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge_into(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) {
    throw ConfigError((prefix.empty() ? std::string("scenario") : prefix) +
                      " must be an object");
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown scenario key '" + key + "'");
    json& target = base[it.key()];
    if (key == "vehicle") {
      if (!it.value().is_string() && !it.value().is_object()) {
        throw ConfigError("'vehicle' must be \"surrogate\", a file path or an object");
      }
      if (target.is_object() && it.value().is_object()) {
        for (auto v = it.value().begin(); v != it.value().end(); ++v) target[v.key()] = v.value();
      } else {
        target = it.value();
      }
      continue;
    }
    if (target.is_object()) {
      merge_into(target, it.value(), key);
      continue;
    }
    if (!same_kind(target, it.value())) {
      throw ConfigError("scenario key '" + key + "' expects a " +
                        std::string(target.type_name()) + ", got " +
                        std::string(it.value().type_name()));
    }
    target = it.value();
  }
}

double number(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number()) {
    throw ConfigError(std::string("'") + key + "' must be a number");
  }
  return j.at(key).get<double>();
}

// std distributions are not reproducible across standard libraries
double uniform_pm1(std::mt19937_64& rng) {
  return 2.0 * static_cast<double>(rng() >> 11) * 0x1.0p-53 - 1.0;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

PathPtr PathConfig::build() const {
  if (type == "spiral") return spiral_path(a, b, omega);
  if (type == "line") return line_path(origin, direction);
  if (type == "polyline-spline") return spline_path(waypoints);
  throw ConfigError("unknown path type '" + type + "' (spiral | line | polyline-spline)");
}

json default_scenario_json() {
  const AutopilotGains g;
  json j;
  j["dt"] = 0.01;
  j["t_end"] = 150.0;
  j["seed"] = 0;
  j["current"] = json::array({0.0, 0.25, 0.05});
  j["vehicle"] = "surrogate";
  j["formation"] = {{"offsets", json::array({json::array({0.0, 10.0, 5.0}),
                                             json::array({0.0, -10.0, 5.0}),
                                             json::array({0.0, 0.0, -10.0})})}};
  j["path"] = {{"type", "spiral"},
               {"a", 40.0},
               {"b", 20.0},
               {"omega", kPi / 100.0},
               {"origin", json::array({0.0, 0.0, 0.0})},
               {"direction", json::array({1.0, 0.0, 0.0})},
               {"waypoints", json::array()}};
  j["initial"] = {{"layout", "inverted_formation"},
                  {"p0", json::array({0.0, 0.0, 0.0})},
                  {"xi0", 0.0},
                  {"jitter", 0.0},
                  {"surge", 1.0},
                  {"states", json::array()}};
  j["gains"] = {{"k_u", g.k_u},         {"k_c", g.k_c},           {"c_u", g.c_u},
                {"k_theta", g.k_theta}, {"k_q", g.k_q},           {"k_d", g.k_d},
                {"lambda_q", g.lambda_q}, {"c_q", g.c_q},         {"k_psi", g.k_psi},
                {"k_r", g.k_r},         {"lambda_r", g.lambda_r}, {"c_r", g.c_r}};
  j["sign"] = {{"exact", false}, {"epsilon", 0.01}};
  j["nsb"] = {{"lambda1", 1.0},   {"lambda2", 0.05},   {"d_colav", 10.0},
              {"d_min", 5.0},     {"hysteresis", 0.5}, {"release", true},
              {"release_tolerance", 0.01}, {"colav", true}, {"formation", true}};
  j["los"] = {{"delta0", 5.0}, {"U_los", 1.0}};
  j["k_xi"] = 1.0;
  j["reference_filter_omega"] = 2.0;
  j["decompose"] = {{"theta_max_deg", 80.0}, {"u_floor_fraction", 0.05}};
  j["limits"] = {{"force", 0.0}, {"observer", 0.0}};
  j["envelope"] = {{"u_max", 2.5}, {"grid", 100}};
  j["lookahead_check"] = "error";
  return j;
}

json merge_scenario_json(const json& base, const json& patch) {
  json out = base;
  merge_into(out, patch, "");
  return out;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  if (key.rfind("vehicle.", 0) == 0 && j.contains("vehicle") &&
      j["vehicle"] == "surrogate") {
    j["vehicle"] = to_json(VehicleParams::surrogate());
  }
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    json wrapped = json::object();
    wrapped[*it] = patch;
    patch = wrapped;
  }
  merge_into(j, patch, "");
}

Scenario scenario_from_json(const json& j, const std::string& base_dir) {
  const json d = merge_scenario_json(default_scenario_json(), j);
  Scenario sc;
  try {
    sc.dt = number(d, "dt");
    sc.t_end = number(d, "t_end");
    if (!d["seed"].is_number_integer() || d["seed"].get<std::int64_t>() < 0) {
      throw ConfigError("'seed' must be a non-negative integer");
    }
    sc.seed = d["seed"].get<std::uint64_t>();
    sc.current.V = vec3_from(d["current"], "current");

    const json& gj = d["gains"];
    AutopilotGains& g = sc.gains;
    g.k_u = number(gj, "k_u");
    g.k_c = number(gj, "k_c");
    g.c_u = number(gj, "c_u");
    g.k_theta = number(gj, "k_theta");
    g.k_q = number(gj, "k_q");
    g.k_d = number(gj, "k_d");
    g.lambda_q = number(gj, "lambda_q");
    g.c_q = number(gj, "c_q");
    g.k_psi = number(gj, "k_psi");
    g.k_r = number(gj, "k_r");
    g.lambda_r = number(gj, "lambda_r");
    g.c_r = number(gj, "c_r");
    sc.sign.exact = d["sign"]["exact"].get<bool>();
    sc.sign.epsilon = number(d["sign"], "epsilon");

    const json& nj = d["nsb"];
    sc.nsb.lambda1 = number(nj, "lambda1");
    sc.nsb.lambda2 = number(nj, "lambda2");
    sc.nsb.d_colav = number(nj, "d_colav");
    sc.nsb.d_min = number(nj, "d_min");
    sc.nsb.hysteresis = number(nj, "hysteresis");
    sc.nsb.release = nj["release"].get<bool>();
    sc.nsb.release_tolerance = number(nj, "release_tolerance");
    sc.nsb.colav = nj["colav"].get<bool>();
    sc.nsb.formation = nj["formation"].get<bool>();
    sc.los.delta0 = number(d["los"], "delta0");
    sc.los.U_los = number(d["los"], "U_los");
    sc.k_xi = number(d, "k_xi");
    sc.filter_omega = number(d, "reference_filter_omega");
    sc.decompose.theta_max = number(d["decompose"], "theta_max_deg") * kPi / 180.0;
    sc.decompose.u_floor_fraction = number(d["decompose"], "u_floor_fraction");
    sc.force_limit = number(d["limits"], "force");
    sc.observer_cap = number(d["limits"], "observer");
    sc.envelope.u_max = number(d["envelope"], "u_max");
    if (!d["envelope"]["grid"].is_number_integer()) {
      throw ConfigError("'envelope.grid' must be an integer");
    }
    sc.envelope.grid = d["envelope"]["grid"].get<int>();
    sc.envelope.current_max = sc.current.V.norm();

    const std::string policy = d["lookahead_check"].get<std::string>();
    if (policy == "error") {
      sc.lookahead_policy = LookaheadPolicy::kError;
    } else if (policy == "warn") {
      sc.lookahead_policy = LookaheadPolicy::kWarn;
    } else if (policy == "off") {
      sc.lookahead_policy = LookaheadPolicy::kOff;
    } else {
      throw ConfigError("'lookahead_check' must be error, warn or off");
    }

    const json& pj = d["path"];
    sc.path_config.type = pj["type"].get<std::string>();
    sc.path_config.a = number(pj, "a");
    sc.path_config.b = number(pj, "b");
    sc.path_config.omega = number(pj, "omega");
    sc.path_config.origin = vec3_from(pj["origin"], "path.origin");
    sc.path_config.direction = vec3_from(pj["direction"], "path.direction");
    for (const json& w : pj["waypoints"]) {
      sc.path_config.waypoints.push_back(vec3_from(w, "path.waypoints"));
    }
    sc.path = sc.path_config.build();

    for (const json& o : d["formation"]["offsets"]) {
      sc.formation.offsets.push_back(vec3_from(o, "formation.offsets"));
    }
    sc.formation.validate();
    const std::size_t n = sc.formation.size();

    VehicleParams params;
    const json& vj = d["vehicle"];
    if (vj.is_string()) {
      const std::string name = vj.get<std::string>();
      if (name == "surrogate") {
        params = vehicle_params_from_json(to_json(VehicleParams::surrogate()), sc.envelope);
      } else {
        std::filesystem::path file(name);
        if (file.is_relative()) file = std::filesystem::path(base_dir) / file;
        params = load_vehicle_params(file.string(), sc.envelope);
      }
    } else {
      params = vehicle_params_from_json(vj, sc.envelope);
    }
    sc.params.assign(n, params);

    const json& ij = d["initial"];
    sc.xi0 = number(ij, "xi0");
    const std::string layout = ij["layout"].get<std::string>();
    if (!ij["states"].empty()) {
      if (ij["states"].size() != n) {
        throw ConfigError("initial.states must list one state per formation offset");
      }
      for (const json& s : ij["states"]) {
        if (!s.is_object() || !s.contains("eta") || !s.contains("nu")) {
          throw ConfigError("initial.states entries need 'eta' and 'nu'");
        }
        VehicleState st;
        st.eta = vec5_from(s["eta"], "initial.states.eta");
        st.nu = vec5_from(s["nu"], "initial.states.nu");
        sc.initial.push_back(st);
      }
    } else {
      double sign = 0.0;
      if (layout == "inverted_formation") {
        sign = -1.0;
      } else if (layout == "formation") {
        sign = 1.0;
      } else {
        throw ConfigError("initial.layout must be inverted_formation or formation");
      }
      const double jitter = number(ij, "jitter");
      const double surge = number(ij, "surge");
      if (jitter < 0.0) throw ConfigError("initial.jitter must be non-negative");
      const PathPoint pt = eval_path(*sc.path, sc.xi0);
      const Vec3 p_b = pt.p + vec3_from(ij["p0"], "initial.p0");
      const Mat3 R = path_rotation(pt.theta_p, pt.psi_p);
      std::mt19937_64 rng(sc.seed);
      for (std::size_t i = 0; i < n; ++i) {
        VehicleState st;
        Vec3 p = p_b + sign * (R * sc.formation.offsets[i]);
        for (int k = 0; k < 3; ++k) p[k] += jitter * uniform_pm1(rng);
        st.eta << p, pt.theta_p, pt.psi_p;
        st.nu[0] = surge;
        sc.initial.push_back(st);
      }
    }
    sc.validate();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  } catch (const DomainError& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  return sc;
}

void Scenario::validate() {
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (!(t_end > dt)) throw ConfigError("t_end must exceed dt");
  if (!(nsb.d_min > 0.0) || !(nsb.d_colav > nsb.d_min)) {
    throw ConfigError("require d_colav > d_min > 0");
  }
  if (!(nsb.lambda1 > 0.0) || !(nsb.lambda2 > 0.0)) {
    throw ConfigError("task gains must be positive");
  }
  if (nsb.hysteresis < 0.0) throw ConfigError("COLAV hysteresis must be non-negative");
  if (nsb.release_tolerance < 0.0) throw ConfigError("COLAV release tolerance must be non-negative");
  if (!(los.delta0 > 0.0) || !(los.U_los > 0.0)) {
    throw ConfigError("LOS requires delta0 > 0 and U_los > 0");
  }
  if (!(k_xi > 0.0)) throw ConfigError("k_xi must be positive");
  if (!(filter_omega > 0.0)) throw ConfigError("reference_filter_omega must be positive");
  if (!(sign.epsilon > 0.0)) throw ConfigError("sign.epsilon must be positive");
  if (!(decompose.theta_max > 0.0 && decompose.theta_max < kPi / 2)) {
    throw ConfigError("decompose.theta_max_deg must lie in (0, 90)");
  }
  if (!(decompose.u_floor_fraction >= 0.0 && decompose.u_floor_fraction <= 1.0)) {
    throw ConfigError("decompose.u_floor_fraction must lie in [0, 1]");
  }
  if (force_limit < 0.0 || observer_cap < 0.0) {
    throw ConfigError("limits must be non-negative");
  }
  gains.validate();
  formation.validate();
  if (!path) throw ConfigError("scenario has no path");
  if (initial.empty()) throw ConfigError("scenario has no vehicles");
  if (initial.size() != formation.size() || params.size() != initial.size()) {
    throw ConfigError("vehicle count does not match the formation");
  }
  for (const VehicleState& s : initial) {
    if (!(std::abs(s.theta()) < kPi / 2)) {
      throw DomainError("initial pitch outside (-pi/2, pi/2)");
    }
  }
  for (const VehicleParams& p : params) p.validate();

  if (lookahead_policy != LookaheadPolicy::kOff) {
    const StabilityReport rep = check_conditions(*path, params.front(), static_cast<int>(size()),
                                                 current.V.norm(), los.delta0, envelope);
    if (!(los.delta0 > rep.delta0_lower_bound)) {
      std::ostringstream msg;
      msg << "lookahead delta0=" << los.delta0 << " does not exceed the lower bound "
          << rep.delta0_lower_bound << " for this path, vehicle and fleet size";
      if (lookahead_policy == LookaheadPolicy::kError) throw ConfigError(msg.str());
      warnings.push_back(msg.str());
    }
  }
}

Scenario load_scenario(const std::string& path, const std::vector<std::string>& overrides) {
  json j = default_scenario_json();
  std::string base_dir = ".";
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario file: " + path);
    json file;
    try {
      in >> file;
    } catch (const json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    }
    j = merge_scenario_json(j, file);
    base_dir = std::filesystem::path(path).parent_path().string();
    if (base_dir.empty()) base_dir = ".";
  }
  for (const std::string& o : overrides) apply_override(j, o);
  return scenario_from_json(j, base_dir);
}

Scenario default_scenario(const std::vector<std::string>& overrides) {
  return load_scenario("", overrides);
}

VehicleState vehicle_state(const VecX& x, std::size_t i) {
  const Eigen::Index b = static_cast<Eigen::Index>(i) * kVehicleBlock;
  VehicleState s;
  s.eta = x.segment<5>(b);
  s.nu = x.segment<5>(b + 5);
  return s;
}

ObserverState observer_state(const VecX& x, std::size_t i) {
  const Eigen::Index b = static_cast<Eigen::Index>(i) * kVehicleBlock;
  ObserverState o;
  o.V_hat_c = x.segment<3>(b + 10);
  o.theta_hat_q = x.segment<9>(b + 13);
  o.theta_hat_r = x.segment<9>(b + 22);
  return o;
}

Simulator::Simulator(Scenario scenario) : scenario_(std::move(scenario)) {
  if (!scenario_.path) throw ConfigError("scenario has no path");
}

VecX Simulator::initial_state() const {
  const std::size_t n = scenario_.size();
  VecX x = VecX::Zero(static_cast<Eigen::Index>(n) * kVehicleBlock + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Index b = static_cast<Eigen::Index>(i) * kVehicleBlock;
    x.segment<5>(b) = scenario_.initial[i].eta;
    x.segment<5>(b + 5) = scenario_.initial[i].nu;
  }
  x[x.size() - 1] = scenario_.xi0;
  const Mode mode = initial_mode(x);
  const Evaluation ev = evaluate(x, mode);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Index f = static_cast<Eigen::Index>(i) * kVehicleBlock + kFilterOffset;
    const GuidanceCommand& c = ev.vehicles[i].decomposition.command;
    x[f] = c.u_d;
    x[f + 2] = c.theta_d;
    x[f + 4] = c.psi_d;
  }
  return x;
}

namespace {

// Everything up to the lower-priority (formation + path following) velocity.
void guidance_core(const Scenario& sc, const VecX& x, Evaluation& ev,
                   std::vector<Vec3>& positions, std::vector<Vec5>& eta_dot) {
  const std::size_t n = sc.size();
  const Eigen::Index dim = 3 * static_cast<Eigen::Index>(n);
  ev.vehicles.resize(n);
  positions.resize(n);
  eta_dot.resize(n);
  std::vector<VehicleMotion> motions(n);
  for (std::size_t i = 0; i < n; ++i) {
    VehicleEvaluation& ve = ev.vehicles[i];
    ve.state = vehicle_state(x, i);
    eta_dot[i] = kinematics(ve.state);
    ve.velocity = eta_dot[i].head<3>();
    ve.motion = motion_from_velocity(ve.velocity);
    motions[i] = ve.motion;
    positions[i] = ve.state.position();
    ev.p_b += positions[i];
  }
  ev.p_b /= static_cast<double>(n);

  ev.point = eval_path(*sc.path, path_parameter(x));
  const PathPoint& pt = ev.point;
  ev.error = path_error(ev.p_b, pt);
  ev.xi_dot = xi_update(motions, pt, ev.error.x(), sc.k_xi);
  ev.error_dot = barycenter_kinematics(motions, pt, ev.error, ev.xi_dot);
  ev.los = los_velocity(ev.error, pt.theta_p, pt.psi_p, sc.los.U_los, sc.los.delta0);

  const VecX v3 = stack_velocity(ev.los.velocity, n);
  ev.formation_jacobian = MatX(0, dim);
  if (sc.nsb.formation && n >= 2) {
    ev.formation = formation_task(positions, pt.theta_p, pt.psi_p, sc.formation,
                                  path_frame_rate(pt, ev.xi_dot));
    ev.formation_jacobian = ev.formation.jacobian;
    ev.v_formation = clik_velocity(ev.formation, sc.nsb.lambda2);
  } else {
    ev.v_formation = VecX::Zero(dim);
  }
  ev.v_lower = nsb_combine(VecX(), ev.v_formation, v3, MatX(), ev.formation_jacobian, false);
  ev.v_los = v3;
}

}  // namespace

std::vector<VehiclePair> Simulator::next_pairs(const VecX& x,
                                               const std::vector<VehiclePair>& pairs) const {
  if (!scenario_.nsb.colav) return {};
  std::vector<Vec3> positions;
  for (std::size_t i = 0; i < scenario_.size(); ++i) {
    positions.push_back(vehicle_state(x, i).position());
  }
  std::vector<VehiclePair> next =
      update_colav_pairs(positions, pairs, scenario_.nsb.d_colav, scenario_.nsb.hysteresis);
  if (next.empty() || !scenario_.nsb.release) return next;

  // Set-based release: a pair near d_colav whose lower-priority motion already
  // separates it no longer needs the avoidance task.
  Evaluation ev;
  std::vector<Vec5> eta_dot;
  guidance_core(scenario_, x, ev, positions, eta_dot);
  const double release_from = scenario_.nsb.d_colav - scenario_.nsb.release_tolerance;
  std::vector<VehiclePair> kept;
  for (const VehiclePair& p : next) {
    const auto [i, j] = p;
    const Vec3 diff = positions[i] - positions[j];
    const double dist = diff.norm();
    const Vec3 rel = ev.v_lower.segment<3>(3 * i) - ev.v_lower.segment<3>(3 * j);
    if (dist >= release_from && diff.dot(rel) > 0.0) continue;
    kept.push_back(p);
  }
  return kept;
}

Mode Simulator::initial_mode(const VecX& x) const {
  Mode m;
  m.pairs = next_pairs(x, {});
  return m;
}

void Simulator::refresh_pairs(const VecX& x, Mode& mode, double t,
                              std::vector<ColavEvent>* events) const {
  std::vector<VehiclePair> next = next_pairs(x, mode.pairs);
  if (events) {
    for (const VehiclePair& p : next) {
      if (std::find(mode.pairs.begin(), mode.pairs.end(), p) == mode.pairs.end()) {
        events->push_back({t, p, true});
      }
    }
    for (const VehiclePair& p : mode.pairs) {
      if (std::find(next.begin(), next.end(), p) == next.end()) {
        events->push_back({t, p, false});
      }
    }
  }
  mode.pairs = std::move(next);
}

Evaluation Simulator::evaluate(const VecX& x, const Mode& mode) const {
  const Scenario& sc = scenario_;
  const std::size_t n = sc.size();
  const Eigen::Index dim = 3 * static_cast<Eigen::Index>(n);
  Evaluation ev;
  std::vector<Vec3> positions;
  std::vector<Vec5> eta_dot;
  guidance_core(sc, x, ev, positions, eta_dot);

  const bool colav_active = sc.nsb.colav && !mode.pairs.empty();
  VecX v1 = VecX::Zero(dim);
  MatX J1(0, dim);
  if (colav_active) {
    ev.colav = colav_task(positions, sc.nsb.d_colav, mode.pairs);
    v1 = clik_velocity(ev.colav, sc.nsb.lambda1);
    J1 = ev.colav.jacobian;
  }
  ev.v_nsb = colav_active ? nsb_combine(v1, ev.v_formation, ev.v_los, J1,
                                         ev.formation_jacobian, true)
                          : ev.v_lower;

  ev.derivative.resize(x.size());
  const ReferenceFilter filter(sc.filter_omega);
  for (std::size_t i = 0; i < n; ++i) {
    VehicleEvaluation& ve = ev.vehicles[i];
    const Eigen::Index b = static_cast<Eigen::Index>(i) * kVehicleBlock;
    const Eigen::Index f = b + kFilterOffset;
    const GuidanceCommand prev = mode.previous.size() == n ? mode.previous[i] : GuidanceCommand{};
    ve.decomposition =
        decompose_references(ev.v_nsb.segment<3>(3 * static_cast<Eigen::Index>(i)),
                             ve.state.nu[1], ve.state.nu[2], ve.motion.gamma,
                             ve.motion.chi, prev, sc.decompose);
    const GuidanceCommand& cmd = ve.decomposition.command;
    const double psi_in = x[f + 4] + wrap_angle(cmd.psi_d - x[f + 4]);
    References& ref = ve.references;
    ref.u_d = x[f];
    ref.u_d_dot = x[f + 1];
    ref.theta_d = x[f + 2];
    ref.theta_d_dot = x[f + 3];
    ref.theta_d_ddot = filter.acceleration(x[f + 2], x[f + 3], cmd.theta_d);
    ref.psi_d = x[f + 4];
    ref.psi_d_dot = x[f + 5];
    ref.psi_d_ddot = filter.acceleration(x[f + 4], x[f + 5], psi_in);

    const ObserverState obs = observer_state(x, i);
    const ComponentTerms terms = component_terms(sc.params[i], ve.state, sc.current);
    ve.control = autopilot(ve.state, ref, sc.gains, obs, terms, sc.sign);
    ve.forces = ve.control.forces;
    if (sc.force_limit > 0.0) {
      const double L = sc.force_limit;
      ve.forces.f_u = std::clamp(ve.forces.f_u, -L, L);
      ve.forces.t_q = std::clamp(ve.forces.t_q, -L, L);
      ve.forces.t_r = std::clamp(ve.forces.t_r, -L, L);
    }
    ObserverState rates = ve.control.observer_rates;
    if (sc.observer_cap > 0.0) {
      rates.V_hat_c = cap_observer_rate(obs.V_hat_c, rates.V_hat_c, sc.observer_cap);
      rates.theta_hat_q = cap_observer_rate(obs.theta_hat_q, rates.theta_hat_q, sc.observer_cap);
      rates.theta_hat_r = cap_observer_rate(obs.theta_hat_r, rates.theta_hat_r, sc.observer_cap);
    }
    ve.nu_dot = dynamics(sc.params[i], ve.state, sc.current, ve.forces, terms);

    ev.derivative.segment<5>(b) = eta_dot[i];
    ev.derivative.segment<5>(b + 5) = ve.nu_dot;
    ev.derivative.segment<3>(b + 10) = rates.V_hat_c;
    ev.derivative.segment<9>(b + 13) = rates.theta_hat_q;
    ev.derivative.segment<9>(b + 22) = rates.theta_hat_r;
    ev.derivative[f] = x[f + 1];
    ev.derivative[f + 1] = filter.acceleration(x[f], x[f + 1], cmd.u_d);
    ev.derivative[f + 2] = x[f + 3];
    ev.derivative[f + 3] = ref.theta_d_ddot;
    ev.derivative[f + 4] = x[f + 5];
    ev.derivative[f + 5] = ref.psi_d_ddot;
  }
  ev.derivative[x.size() - 1] = ev.xi_dot;
  return ev;
}

VecX Simulator::rk4(const VecX& x, const Mode& mode, double h) const {
  const VecX k1 = evaluate(x, mode).derivative;
  const VecX k2 = evaluate(x + 0.5 * h * k1, mode).derivative;
  const VecX k3 = evaluate(x + 0.5 * h * k2, mode).derivative;
  const VecX k4 = evaluate(x + h * k3, mode).derivative;
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

namespace {

void integrate_step(const Simulator& sim, VecX& x, Mode& mode, double t,
                    std::vector<ColavEvent>* events,
                    const std::function<void(const VecX&, Mode&, double)>& refresh,
                    const std::function<std::vector<VehiclePair>(const VecX&,
                                                                 const std::vector<VehiclePair>&)>& next) {
  const double dt = sim.scenario().dt;
  double remaining = dt, tc = t;
  for (int split = 0;; ++split) {
    VecX trial = sim.rk4(x, mode, remaining);
    if (split >= kMaxSplitsPerStep || next(trial, mode.pairs) == mode.pairs) {
      x = std::move(trial);
      return;
    }
    double lo = 0.0, hi = remaining;
    while (hi - lo > 1e-12 * dt) {
      const double mid = 0.5 * (lo + hi);
      if (next(sim.rk4(x, mode, mid), mode.pairs) == mode.pairs) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    x = sim.rk4(x, mode, hi);
    tc += hi;
    remaining -= hi;
    refresh(x, mode, tc);
    (void)events;
    if (!(remaining > 1e-12 * dt)) return;
  }
}

}  // namespace

void Simulator::step(VecX& x, Mode& mode, double t, std::vector<ColavEvent>* events) const {
  refresh_pairs(x, mode, t, events);
  const Evaluation ev = evaluate(x, mode);
  mode.previous.clear();
  for (const VehicleEvaluation& ve : ev.vehicles) {
    mode.previous.push_back(ve.decomposition.command);
  }
  integrate_step(
      *this, x, mode, t, events,
      [&](const VecX& s, Mode& m, double tc) { refresh_pairs(s, m, tc, events); },
      [&](const VecX& s, const std::vector<VehiclePair>& p) { return next_pairs(s, p); });
}

SimRecord Simulator::record(const VecX& x, const Mode& mode, double t) const {
  const Evaluation ev = evaluate(x, mode);
  const std::size_t n = scenario_.size();
  SimRecord r;
  r.t = t;
  std::vector<Vec3> positions;
  for (std::size_t i = 0; i < n; ++i) {
    VehicleRecord vr;
    vr.eta = ev.vehicles[i].state.eta;
    vr.nu = ev.vehicles[i].state.nu;
    vr.command = ev.vehicles[i].decomposition.command;
    vr.forces = ev.vehicles[i].forces;
    vr.observer = observer_state(x, i);
    r.vehicles.push_back(vr);
    positions.push_back(vr.eta.head<3>());
  }
  r.xi = path_parameter(x);
  r.xi_dot = ev.xi_dot;
  r.p_b_p = ev.error;
  if (n >= 2) {
    r.formation_error =
        formation_task(positions, ev.point.theta_p, ev.point.psi_p, scenario_.formation).error();
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      r.distances.push_back((positions[i] - positions[j]).norm());
    }
  }
  r.colav_active = scenario_.nsb.colav && !mode.pairs.empty();
  return r;
}

SimLog Simulator::run() const {
  SimLog log;
  log.n_vehicles = scenario_.size();
  const double dt = scenario_.dt;
  const auto steps = static_cast<std::size_t>(std::floor(scenario_.t_end / dt + 1e-9));
  log.records.reserve(steps + 1);
  VecX x;
  Mode mode;
  std::size_t k = 0;
  try {
    x = initial_state();
    mode = initial_mode(x);
    for (const VehiclePair& p : mode.pairs) log.events.push_back({0.0, p, true});
    for (;; ++k) {
      const double t = static_cast<double>(k) * dt;
      refresh_pairs(x, mode, t, &log.events);
      const Evaluation ev = evaluate(x, mode);
      mode.previous.clear();
      for (const VehicleEvaluation& ve : ev.vehicles) {
        mode.previous.push_back(ve.decomposition.command);
      }
      log.records.push_back(record(x, mode, t));
      if (k == steps) break;
      integrate_step(
          *this, x, mode, t, &log.events,
          [&](const VecX& s, Mode& m, double tc) { refresh_pairs(s, m, tc, &log.events); },
          [&](const VecX& s, const std::vector<VehiclePair>& p) { return next_pairs(s, p); });
      if (!x.allFinite()) throw DomainError("non-finite state");
    }
  } catch (const DomainError& e) {
    log.abort = AbortInfo{k + 1, static_cast<double>(k + 1) * dt, e.what()};
  }
  return log;
}

SimLog run(const Scenario& scenario) { return Simulator(scenario).run(); }

std::vector<std::string> csv_header(std::size_t n) {
  std::vector<std::string> h = {"t"};
  const char* fields[] = {"x", "y", "z", "theta", "psi", "u", "v", "w",
                          "q", "r", "u_d", "theta_d", "psi_d", "f_u", "t_q", "t_r"};
  for (std::size_t i = 1; i <= n; ++i) {
    for (const char* f : fields) h.push_back(std::string(f) + std::to_string(i));
  }
  for (const char* f : {"xi", "xi_dot", "xbp", "ybp", "zbp"}) h.emplace_back(f);
  for (std::size_t i = 1; i < n; ++i) {
    for (const char* c : {"sx", "sy", "sz"}) h.push_back(std::string(c) + std::to_string(i));
  }
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = i + 1; j <= n; ++j) {
      h.push_back("d" + std::to_string(i) + "_" + std::to_string(j));
    }
  }
  h.emplace_back("colav_active");
  return h;
}

namespace {

std::vector<double> row_values(const SimRecord& r) {
  std::vector<double> v = {r.t};
  for (const VehicleRecord& vr : r.vehicles) {
    for (int k = 0; k < 5; ++k) v.push_back(vr.eta[k]);
    for (int k = 0; k < 5; ++k) v.push_back(vr.nu[k]);
    v.push_back(vr.command.u_d);
    v.push_back(vr.command.theta_d);
    v.push_back(vr.command.psi_d);
    v.push_back(vr.forces.f_u);
    v.push_back(vr.forces.t_q);
    v.push_back(vr.forces.t_r);
  }
  v.push_back(r.xi);
  v.push_back(r.xi_dot);
  for (int k = 0; k < 3; ++k) v.push_back(r.p_b_p[k]);
  for (Eigen::Index k = 0; k < r.formation_error.size(); ++k) v.push_back(r.formation_error[k]);
  for (double d : r.distances) v.push_back(d);
  v.push_back(r.colav_active ? 1.0 : 0.0);
  return v;
}

}  // namespace

void write_csv(const SimLog& log, std::ostream& out) {
  const std::vector<std::string> header = csv_header(log.n_vehicles);
  for (std::size_t k = 0; k < header.size(); ++k) {
    out << (k ? "," : "") << header[k];
  }
  out << '\n';
  for (const SimRecord& r : log.records) {
    const std::vector<double> v = row_values(r);
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (k) out << ',';
      if (k + 1 == v.size()) {
        out << (r.colav_active ? '1' : '0');
      } else {
        out << fmt17(v[k]);
      }
    }
    out << '\n';
  }
}

void write_csv(const SimLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write CSV: " + path);
  write_csv(log, out);
}

SimLog read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty CSV");
  std::vector<std::string> names;
  {
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) names.push_back(cell);
  }
  std::size_t n = 0;
  while (std::find(names.begin(), names.end(), "x" + std::to_string(n + 1)) != names.end()) ++n;
  if (n == 0 || names != csv_header(n)) {
    throw ConfigError("CSV header does not match the telemetry schema");
  }
  SimLog log;
  log.n_vehicles = n;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      char* end = nullptr;
      const double value = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') {
        throw ConfigError("bad number on CSV line " + std::to_string(line_no));
      }
      v.push_back(value);
    }
    if (v.size() != names.size()) {
      throw ConfigError("wrong column count on CSV line " + std::to_string(line_no));
    }
    SimRecord r;
    std::size_t c = 0;
    r.t = v[c++];
    for (std::size_t i = 0; i < n; ++i) {
      VehicleRecord vr;
      for (int k = 0; k < 5; ++k) vr.eta[k] = v[c++];
      for (int k = 0; k < 5; ++k) vr.nu[k] = v[c++];
      vr.command.u_d = v[c++];
      vr.command.theta_d = v[c++];
      vr.command.psi_d = v[c++];
      vr.forces.f_u = v[c++];
      vr.forces.t_q = v[c++];
      vr.forces.t_r = v[c++];
      r.vehicles.push_back(vr);
    }
    r.xi = v[c++];
    r.xi_dot = v[c++];
    for (int k = 0; k < 3; ++k) r.p_b_p[k] = v[c++];
    r.formation_error.resize(3 * (static_cast<Eigen::Index>(n) - 1));
    for (Eigen::Index k = 0; k < r.formation_error.size(); ++k) r.formation_error[k] = v[c++];
    for (std::size_t k = 0; k < n * (n - 1) / 2; ++k) r.distances.push_back(v[c++]);
    r.colav_active = v[c++] != 0.0;
    log.records.push_back(std::move(r));
  }
  return log;
}

SimLog read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open CSV: " + path);
  return read_csv(in);
}

std::vector<double> column(const SimLog& log, const std::string& name) {
  const std::vector<std::string> header = csv_header(log.n_vehicles);
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ConfigError("no telemetry column '" + name + "'");
  const auto idx = static_cast<std::size_t>(it - header.begin());
  std::vector<double> out;
  out.reserve(log.records.size());
  for (const SimRecord& r : log.records) out.push_back(row_values(r)[idx]);
  return out;
}

std::vector<double> times(const SimLog& log) {
  std::vector<double> out;
  for (const SimRecord& r : log.records) out.push_back(r.t);
  return out;
}

std::vector<double> path_error_norm(const SimLog& log) {
  std::vector<double> out;
  for (const SimRecord& r : log.records) out.push_back(r.p_b_p.norm());
  return out;
}

std::vector<double> formation_error_norm(const SimLog& log) {
  std::vector<double> out;
  for (const SimRecord& r : log.records) out.push_back(r.formation_error.norm());
  return out;
}

ExponentialFit fit_exponential(const std::vector<double>& t, const std::vector<double>& y,
                               double t0, double t1) {
  ExponentialFit fit;
  std::vector<double> xs, ys;
  int sign = 0;
  for (std::size_t k = 0; k < t.size() && k < y.size(); ++k) {
    if (t[k] < t0 || t[k] > t1) continue;
    const int s = (y[k] > 0) - (y[k] < 0);
    if (s == 0) {
      fit.reason = "signal touches zero inside the window";
      return fit;
    }
    if (sign != 0 && s != sign) {
      fit.reason = "signal changes sign inside the window";
      return fit;
    }
    sign = s;
    xs.push_back(t[k]);
    ys.push_back(std::log(std::abs(y[k])));
  }
  if (xs.size() < 3) {
    fit.reason = "fewer than three samples in the window";
    return fit;
  }
  const double m = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / m;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / m;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxx += (xs[k] - mx) * (xs[k] - mx);
    sxy += (xs[k] - mx) * (ys[k] - my);
    syy += (ys[k] - my) * (ys[k] - my);
  }
  if (!(sxx > 0.0)) {
    fit.reason = "degenerate time window";
    return fit;
  }
  const double slope = sxy / sxx;
  fit.applicable = true;
  fit.rate = -slope;
  fit.amplitude = std::exp(my - slope * mx);
  fit.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

ExponentialFit fit_envelope(const std::vector<double>& t, const std::vector<double>& y,
                            double t0, double t1) {
  std::vector<double> env(y.size());
  double running = 0.0;
  for (std::size_t k = y.size(); k-- > 0;) {
    running = std::max(running, std::abs(y[k]));
    env[k] = running;
  }
  return fit_exponential(t, env, t0, t1);
}

Metrics compute_metrics(const SimLog& log, const Scenario& sc, const MetricsOptions& opts) {
  if (log.records.empty()) throw ConfigError("empty simulation log");
  Metrics m;
  const std::vector<double> t = times(log);
  const std::vector<double> path_err = path_error_norm(log);
  const std::vector<double> form_err = formation_error_norm(log);
  m.final_path_error = path_err.back();

  m.min_distance = std::numeric_limits<double>::infinity();
  for (const SimRecord& r : log.records) {
    for (double d : r.distances) m.min_distance = std::min(m.min_distance, d);
  }

  std::size_t last_active = log.records.size();
  for (std::size_t k = 0; k < log.records.size(); ++k) {
    if (log.records[k].colav_active) {
      m.colav_activated = true;
      last_active = k;
    }
  }
  std::size_t nominal_from = 0;
  if (m.colav_activated && last_active + 1 < log.records.size()) {
    m.colav_deactivated = true;
    m.colav_last_off = t[last_active + 1];
    nominal_from = last_active + 1;
  } else if (m.colav_activated) {
    nominal_from = log.records.size();
  }
  for (std::size_t k = nominal_from; k < log.records.size(); ++k) {
    m.max_formation_error_after_colav = std::max(m.max_formation_error_after_colav, form_err[k]);
  }

  if (nominal_from < log.records.size() && log.n_vehicles >= 2) {
    const double t0 = t[nominal_from] + opts.formation_fit_delay;
    double t1 = t.back();
    std::size_t k = nominal_from;
    while (k < t.size() && t[k] < t0) ++k;
    if (k < t.size()) {
      const double stop = std::max(opts.formation_fit_floor,
                                   form_err[k] * std::pow(10.0, -opts.formation_fit_decades));
      for (; k < t.size(); ++k) {
        if (form_err[k] < stop) {
          t1 = t[k];
          break;
        }
      }
    }
    m.formation_rate = fit_exponential(t, form_err, t0, t1);
    m.formation_fit_t0 = t0;
    m.formation_fit_t1 = t1;
  } else {
    m.formation_rate.reason = "no COLAV-free interval";
  }

  {
    double t1 = t.back();
    for (std::size_t k = 0; k < t.size(); ++k) {
      if (t[k] >= opts.path_fit_start && path_err[k] < opts.path_fit_floor) {
        t1 = t[k];
        break;
      }
    }
    m.path_rate = fit_envelope(t, path_err, opts.path_fit_start, t1);
  }

  const double nominal_t0 =
      std::max(opts.path_fit_start,
               (m.colav_deactivated ? m.colav_last_off : 0.0) + opts.formation_fit_delay);
  std::size_t pairs = 0, decreasing = 0;
  for (std::size_t k = 1; k < log.records.size(); ++k) {
    const SimRecord& a = log.records[k - 1];
    const SimRecord& b = log.records[k];
    if (a.t < nominal_t0 || a.colav_active || b.colav_active) continue;
    ++pairs;
    if (b.p_b_p.squaredNorm() <= a.p_b_p.squaredNorm()) ++decreasing;
  }
  m.lyapunov_nonincreasing_fraction =
      pairs ? static_cast<double>(decreasing) / static_cast<double>(pairs) : 0.0;

  for (const SimRecord& r : log.records) {
    if (r.colav_active) continue;
    const PathPoint pt = eval_path(*sc.path, r.xi);
    const Vec3& e = r.p_b_p;
    const double delta = std::sqrt(sc.los.delta0 * sc.los.delta0 + e.squaredNorm());
    const double gamma_los = pt.theta_p + std::atan(e.z() / delta);
    if (!(std::abs(gamma_los) < kPi / 2)) continue;
    double U_d = 0.0;
    for (const VehicleRecord& vr : r.vehicles) {
      U_d += std::sqrt(vr.command.u_d * vr.command.u_d + vr.nu[1] * vr.nu[1] +
                       vr.nu[2] * vr.nu[2]);
    }
    U_d /= static_cast<double>(r.vehicles.size());
    const double q1 = sc.k_xi / std::sqrt(1.0 + e.x() * e.x());
    const double q2 = U_d * std::cos(gamma_los) / std::sqrt(delta * delta + e.y() * e.y());
    const double q3 = U_d / std::sqrt(delta * delta + e.z() * e.z());
    ++m.q_samples;
    if (q1 > 0 && q2 > 0 && q3 > 0) ++m.q_positive;
  }
  return m;
}

}  // namespace auvform
