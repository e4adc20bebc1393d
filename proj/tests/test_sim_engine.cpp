#include <cmath>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "auvform/sim_engine.hpp"

using namespace auvform;
using nlohmann::json;

namespace {

const std::string kData = AUVFORM_DATA_DIR;

std::string csv_text(const SimLog& log) {
  std::ostringstream out;
  write_csv(log, out);
  return out.str();
}

// Reference run shared by the metric tests.
const SimLog& reference_log() {
  static const SimLog log = run(default_scenario());
  return log;
}

}  // namespace

TEST(ScenarioJson, DataFileMatchesDefaults) {
  const Scenario a = load_scenario(kData + "/reference.json");
  const Scenario b = default_scenario();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.initial[i].eta, b.initial[i].eta);
    EXPECT_EQ(a.initial[i].nu, b.initial[i].nu);
    EXPECT_EQ(to_json(a.params[i]), to_json(b.params[i]));
  }
  EXPECT_EQ(a.dt, 0.01);
  EXPECT_EQ(a.t_end, 150.0);
  EXPECT_EQ(a.los.delta0, 5.0);
  EXPECT_EQ(a.nsb.lambda2, 0.05);
}

TEST(ScenarioJson, UnknownKeysAndTypeChangesAreRejected) {
  const json base = default_scenario_json();
  EXPECT_THROW(merge_scenario_json(base, json{{"dtt", 0.1}}), ConfigError);
  EXPECT_THROW(merge_scenario_json(base, json{{"los", {{"delta", 3}}}}), ConfigError);
  EXPECT_THROW(merge_scenario_json(base, json{{"dt", "fast"}}), ConfigError);
  EXPECT_THROW(merge_scenario_json(base, json{{"nsb", 3}}), ConfigError);
  const json merged = merge_scenario_json(base, json{{"los", {{"delta0", 7}}}});
  EXPECT_EQ(merged["los"]["delta0"], 7);
  EXPECT_EQ(merged["los"]["U_los"], 1.0);
}

TEST(ScenarioJson, Overrides) {
  json j = default_scenario_json();
  apply_override(j, "los.delta0=6.5");
  apply_override(j, "path.type=line");
  apply_override(j, "initial.p0=[1,2,3]");
  EXPECT_EQ(j["los"]["delta0"], 6.5);
  EXPECT_EQ(j["path"]["type"], "line");
  EXPECT_EQ(j["initial"]["p0"][2], 3);
  EXPECT_THROW(apply_override(j, "los.delta0"), ConfigError);
  EXPECT_THROW(apply_override(j, "los.nope=1"), ConfigError);

  apply_override(j, "vehicle.d11=3.0");
  EXPECT_TRUE(j["vehicle"].is_object());
  EXPECT_EQ(j["vehicle"]["d11"], 3.0);
  EXPECT_EQ(j["vehicle"]["m11"], VehicleParams::surrogate().m11);
}

TEST(ScenarioJson, InvalidValuesAreConfigErrors) {
  EXPECT_THROW(default_scenario({"dt=0"}), ConfigError);
  EXPECT_THROW(default_scenario({"nsb.d_min=12"}), ConfigError);
  EXPECT_THROW(default_scenario({"los.delta0=-1"}), ConfigError);
  EXPECT_THROW(default_scenario({"initial.layout=circle"}), ConfigError);
  EXPECT_THROW(default_scenario({"vehicle.d22=-50"}), ConfigError);
  EXPECT_THROW(default_scenario({"lookahead_check=maybe"}), ConfigError);
  EXPECT_THROW(load_scenario(kData + "/missing.json"), ConfigError);
}

TEST(ScenarioJson, LookaheadPolicy) {
  EXPECT_THROW(default_scenario({"los.delta0=4"}), ConfigError);
  const Scenario warn = default_scenario({"los.delta0=4", "lookahead_check=warn"});
  EXPECT_EQ(warn.warnings.size(), 1u);
  const Scenario off = default_scenario({"los.delta0=4", "lookahead_check=off"});
  EXPECT_TRUE(off.warnings.empty());
  EXPECT_TRUE(default_scenario().warnings.empty());
}

TEST(ScenarioJson, InvertedTriangleStart) {
  const Scenario sc = default_scenario();
  ASSERT_EQ(sc.size(), 3u);
  const PathPoint pt = eval_path(*sc.path, 0.0);
  Vec3 mean = Vec3::Zero();
  for (const VehicleState& s : sc.initial) {
    mean += s.position();
    EXPECT_EQ(s.theta(), pt.theta_p);
    EXPECT_EQ(s.psi(), pt.psi_p);
    EXPECT_EQ(s.nu[0], 1.0);
  }
  EXPECT_LT((mean / 3 - pt.p).norm(), 1e-12);
  // vehicle 3 starts above the path (offset z = -10 mirrored)
  const Mat3 R = path_rotation(pt.theta_p, pt.psi_p);
  EXPECT_LT((R.transpose() * (sc.initial[2].position() - pt.p) - Vec3(0, 0, 10)).norm(), 1e-12);
}

TEST(Simulator, StateLayoutRoundTrip) {
  const Simulator sim(default_scenario());
  const VecX x = sim.initial_state();
  EXPECT_EQ(x.size(), 3 * kVehicleBlock + 1);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(vehicle_state(x, i).eta, sim.scenario().initial[i].eta);
    EXPECT_EQ(observer_state(x, i).V_hat_c, Vec3::Zero());
  }
  EXPECT_EQ(path_parameter(x), 0.0);
}

TEST(Simulator, Rk4IsFourthOrderOnOneStep) {
  const Simulator sim(default_scenario({"nsb.colav=false"}));
  VecX x = sim.initial_state();
  Mode mode = sim.initial_mode(x);
  for (int k = 0; k < 300; ++k) sim.step(x, mode, k * 0.01);
  const double h = 0.04;
  auto fine = [&](int m) {
    VecX y = x;
    for (int k = 0; k < m; ++k) y = sim.rk4(y, mode, h / m);
    return y;
  };
  const VecX ref = fine(64);
  const double e1 = (sim.rk4(x, mode, h) - ref).norm();
  const double e2 = (fine(2) - ref).norm();
  EXPECT_GT(e1 / e2, 12.0);
}

TEST(Simulator, ColavSwitchesAreLocatedInsideSteps) {
  const SimLog& log = reference_log();
  ASSERT_FALSE(log.events.empty());
  bool off_grid = false;
  for (const ColavEvent& e : log.events) {
    EXPECT_GE(e.t, 0.0);
    EXPECT_LE(e.t, 150.0);
    const double k = e.t / 0.01;
    if (std::abs(k - std::round(k)) > 1e-6) off_grid = true;
  }
  EXPECT_TRUE(off_grid);
}

TEST(Simulator, ReleaseRuleEndsColav) {
  const Metrics with = compute_metrics(reference_log(), default_scenario());
  EXPECT_TRUE(with.colav_deactivated);
  EXPECT_LT(with.colav_last_off, 60.0);

  const Scenario latched = default_scenario({"nsb.release=false", "t_end=80"});
  const SimLog log = run(latched);
  ASSERT_FALSE(log.abort);
  EXPECT_TRUE(log.records.back().colav_active);
}

TEST(Simulator, SameSeedGivesIdenticalCsv) {
  const Scenario sc = default_scenario({"seed=7", "initial.jitter=0.5", "t_end=20"});
  EXPECT_EQ(csv_text(run(sc)), csv_text(run(sc)));
  const Scenario other = default_scenario({"seed=8", "initial.jitter=0.5", "t_end=20"});
  EXPECT_NE(csv_text(run(sc)), csv_text(run(other)));
}

TEST(Simulator, DtHalvingChangesFinalPositionsLittle) {
  const SimLog a = run(default_scenario({"dt=0.01", "t_end=60"}));
  const SimLog b = run(default_scenario({"dt=0.005", "t_end=60"}));
  ASSERT_FALSE(a.abort);
  ASSERT_FALSE(b.abort);
  EXPECT_EQ(a.records.back().t, 60.0);
  EXPECT_EQ(b.records.back().t, 60.0);
  for (std::size_t i = 0; i < 3; ++i) {
    const Vec3 pa = a.records.back().vehicles[i].eta.head<3>();
    const Vec3 pb = b.records.back().vehicles[i].eta.head<3>();
    EXPECT_LT((pa - pb).norm(), 1e-5);
  }
}

TEST(Simulator, PitchViolationAborts) {
  // vehicle 1 starts just short of vertical, pitching up
  Scenario sc = default_scenario({"t_end=5"});
  sc.initial[0].eta[3] = 1.5706;
  sc.initial[0].nu << 1, 0, 0, 2, 0;
  const SimLog log = run(sc);
  ASSERT_TRUE(log.abort.has_value());
  EXPECT_GE(log.abort->step, 1u);
  EXPECT_EQ(log.records.size(), log.abort->step);
}

TEST(Csv, HeaderLayout) {
  const std::vector<std::string> h = csv_header(3);
  EXPECT_EQ(h.front(), "t");
  EXPECT_EQ(h[1], "x1");
  EXPECT_EQ(h[16], "t_r1");
  EXPECT_EQ(h.back(), "colav_active");
  EXPECT_EQ(h.size(), 1 + 3 * 16 + 5 + 6 + 3 + 1);
}

TEST(Csv, RoundTrip) {
  const SimLog log = run(default_scenario({"t_end=10"}));
  const std::string text = csv_text(log);
  std::istringstream in(text);
  const SimLog back = read_csv(in);
  EXPECT_EQ(back.records.size(), log.records.size());
  EXPECT_EQ(csv_text(back), text);
}

TEST(Csv, RejectsWrongHeader) {
  std::istringstream in("t,x1,y1\n0,1,2\n");
  EXPECT_THROW(read_csv(in), ConfigError);
}

TEST(Fit, RecoversExponential) {
  std::vector<double> t, y;
  for (int k = 0; k <= 400; ++k) {
    t.push_back(0.1 * k);
    y.push_back(3.0 * std::exp(-0.1 * t.back()));
  }
  const ExponentialFit f = fit_exponential(t, y, 0, 40);
  ASSERT_TRUE(f.applicable);
  EXPECT_NEAR(f.rate, 0.1, 1e-6);
  EXPECT_NEAR(f.amplitude, 3.0, 1e-6);
  EXPECT_NEAR(f.r2, 1.0, 1e-9);
}

TEST(Fit, NotApplicableOnSignChangeOrShortWindow) {
  std::vector<double> t, y;
  for (int k = 0; k <= 100; ++k) {
    t.push_back(0.1 * k);
    y.push_back(std::exp(-0.2 * t.back()) * std::cos(t.back()));
  }
  EXPECT_FALSE(fit_exponential(t, y, 0, 10).applicable);
  EXPECT_FALSE(fit_exponential(t, y, 0, 0.15).applicable);
  // the envelope of a damped oscillation still decays at the damping rate
  const ExponentialFit env = fit_envelope(t, y, 0, 10);
  ASSERT_TRUE(env.applicable);
  EXPECT_NEAR(env.rate, 0.2, 0.05);
}

TEST(Metrics, ReferenceScenario) {
  const Metrics m = compute_metrics(reference_log(), default_scenario());
  EXPECT_LT(m.final_path_error, 0.5);
  EXPECT_GE(m.min_distance, 5.0);
  EXPECT_TRUE(m.colav_activated);
  EXPECT_TRUE(m.colav_deactivated);
  ASSERT_TRUE(m.formation_rate.applicable);
  EXPECT_NEAR(m.formation_rate.rate, 0.05, 0.015);
}

TEST(Metrics, QIsPositiveAlongTheRun) {
  const Metrics m = compute_metrics(reference_log(), default_scenario());
  EXPECT_GT(m.q_samples, 1000u);
  EXPECT_EQ(m.q_positive, m.q_samples);
}

TEST(Metrics, LyapunovNonIncreasingOnLevelLine) {
  const Scenario sc = load_scenario(kData + "/line_formation.json");
  const SimLog log = run(sc);
  ASSERT_FALSE(log.abort);
  const Metrics m = compute_metrics(log, sc);
  EXPECT_GE(m.lyapunov_nonincreasing_fraction, 0.99);
  EXPECT_EQ(m.q_positive, m.q_samples);
}

TEST(Metrics, RecomputedFromCsvMatch) {
  const Scenario sc = default_scenario({"t_end=40"});
  const SimLog log = run(sc);
  std::istringstream in(csv_text(log));
  const SimLog back = read_csv(in);
  const Metrics a = compute_metrics(log, sc);
  const Metrics b = compute_metrics(back, sc);
  EXPECT_EQ(a.min_distance, b.min_distance);
  EXPECT_EQ(a.final_path_error, b.final_path_error);
  EXPECT_EQ(a.colav_last_off, b.colav_last_off);
  EXPECT_EQ(a.q_positive, b.q_positive);
}

TEST(Metrics, DistancesMatchPositions) {
  const SimLog& log = reference_log();
  for (std::size_t k = 0; k < log.records.size(); k += 997) {
    const SimRecord& r = log.records[k];
    const Vec3 p1 = r.vehicles[0].eta.head<3>(), p2 = r.vehicles[1].eta.head<3>(),
               p3 = r.vehicles[2].eta.head<3>();
    EXPECT_NEAR(r.distances[0], (p1 - p2).norm(), 1e-12);
    EXPECT_NEAR(r.distances[1], (p1 - p3).norm(), 1e-12);
    EXPECT_NEAR(r.distances[2], (p2 - p3).norm(), 1e-12);
  }
}
