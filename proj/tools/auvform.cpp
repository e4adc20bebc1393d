#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "auvform/analysis.hpp"
#include "auvform/sim_engine.hpp"

using namespace auvform;
namespace fs = std::filesystem;

namespace {

constexpr int kExitFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitAbort = 3;

struct ScenarioArgs {
  std::string scenario;
  std::vector<std::string> overrides;
  std::optional<double> dt, t_end;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app) {
    app->add_option("--scenario", scenario, "scenario JSON file (defaults when omitted)");
    app->add_option("--set", overrides, "override, e.g. --set los.delta0=6 (repeatable)");
    app->add_option("--dt", dt, "integration step [s]");
    app->add_option("--t-end", t_end, "final time [s]");
    app->add_option("--seed", seed, "seed for initial-position jitter");
  }

  std::vector<std::string> all_overrides() const {
    std::vector<std::string> out = overrides;
    char buf[64];
    if (dt) {
      std::snprintf(buf, sizeof buf, "dt=%.17g", *dt);
      out.push_back(buf);
    }
    if (t_end) {
      std::snprintf(buf, sizeof buf, "t_end=%.17g", *t_end);
      out.push_back(buf);
    }
    if (seed) out.push_back("seed=" + std::to_string(*seed));
    return out;
  }

  Scenario load(const std::string& file) const { return load_scenario(file, all_overrides()); }
};

std::string default_out_dir() {
  const char* env = std::getenv("AUVFORM_OUT_DIR");
  return env && *env ? env : ".";
}

void print_metrics(const Metrics& m, std::ostream& out) {
  char buf[256];
  auto line = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    out << buf << '\n';
  };
  line("final |p_b^p|              %.6g m", m.final_path_error);
  line("min pairwise distance      %.6g m", m.min_distance);
  line("COLAV activated            %s", m.colav_activated ? "yes" : "no");
  line("COLAV deactivated          %s (last off at %.6g s)", m.colav_deactivated ? "yes" : "no",
       m.colav_last_off);
  if (m.formation_rate.applicable) {
    line("formation error rate       %.6g 1/s (R^2 %.4f, t in [%.4g, %.4g] s)",
         m.formation_rate.rate, m.formation_rate.r2, m.formation_fit_t0, m.formation_fit_t1);
  } else {
    line("formation error rate       n/a (%s)", m.formation_rate.reason.c_str());
  }
  if (m.path_rate.applicable) {
    line("path error envelope rate   %.6g 1/s (R^2 %.4f)", m.path_rate.rate, m.path_rate.r2);
  } else {
    line("path error envelope rate   n/a (%s)", m.path_rate.reason.c_str());
  }
  line("Lyapunov non-increasing    %.4f", m.lyapunov_nonincreasing_fraction);
  line("Q positive                 %zu / %zu", m.q_positive, m.q_samples);
}

nlohmann::json metrics_json(const Metrics& m) {
  auto fit = [](const ExponentialFit& f) {
    return nlohmann::json{{"applicable", f.applicable}, {"rate", f.rate},
                          {"amplitude", f.amplitude}, {"r2", f.r2}, {"reason", f.reason}};
  };
  return {{"final_path_error", m.final_path_error},
          {"min_distance", m.min_distance},
          {"colav_activated", m.colav_activated},
          {"colav_deactivated", m.colav_deactivated},
          {"colav_last_off", m.colav_last_off},
          {"max_formation_error_after_colav", m.max_formation_error_after_colav},
          {"formation_rate", fit(m.formation_rate)},
          {"formation_fit_window", {m.formation_fit_t0, m.formation_fit_t1}},
          {"path_rate", fit(m.path_rate)},
          {"lyapunov_nonincreasing_fraction", m.lyapunov_nonincreasing_fraction},
          {"q_samples", m.q_samples},
          {"q_positive", m.q_positive}};
}

// Runs one scenario, writes <csv> and <csv stem>.metrics.json next to it.
int run_one(const Scenario& sc, const std::string& csv, std::ostream& out) {
  for (const std::string& w : sc.warnings) out << "warning: " << w << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  const SimLog log = run(sc);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_csv(log, csv);
  out << "wrote " << csv << " (" << log.records.size() << " rows, " << secs << " s)\n";
  if (log.abort) {
    out << "run aborted at step " << log.abort->step << " (t = " << log.abort->t
        << " s): " << log.abort->message << '\n';
    return kExitAbort;
  }
  const Metrics m = compute_metrics(log, sc);
  print_metrics(m, out);
  fs::path summary(csv);
  summary.replace_extension(".metrics.json");
  std::ofstream(summary) << metrics_json(m).dump(2) << '\n';
  return 0;
}

int cmd_run(const ScenarioArgs& args, const std::string& out_path,
            const std::vector<std::string>& batch, int jobs) {
  if (batch.empty()) {
    const Scenario sc = args.load(args.scenario);
    std::string csv = out_path;
    if (csv.empty()) csv = (fs::path(default_out_dir()) / "run.csv").string();
    if (fs::path(csv).has_parent_path()) fs::create_directories(fs::path(csv).parent_path());
    return run_one(sc, csv, std::cout);
  }
  // Batch: every scenario is loaded up front so config errors stop everything.
  std::vector<Scenario> scenarios;
  for (const std::string& f : batch) scenarios.push_back(args.load(f));
  const fs::path dir = out_path.empty() ? fs::path(default_out_dir()) : fs::path(out_path);
  fs::create_directories(dir);
  std::atomic<std::size_t> next{0};
  std::vector<int> codes(batch.size(), 0);
  std::vector<std::string> reports(batch.size());
  auto worker = [&] {
    for (std::size_t k; (k = next++) < batch.size();) {
      std::ostringstream out;
      const std::string csv = (dir / fs::path(batch[k]).stem()).string() + ".csv";
      try {
        codes[k] = run_one(scenarios[k], csv, out);
      } catch (const std::exception& e) {
        out << "error: " << e.what() << '\n';
        codes[k] = kExitAbort;
      }
      reports[k] = out.str();
    }
  };
  const int n_jobs = std::max(1, std::min<int>(jobs, static_cast<int>(batch.size())));
  std::vector<std::thread> pool;
  for (int j = 0; j < n_jobs; ++j) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  int code = 0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    std::cout << "== " << batch[k] << '\n' << reports[k];
    code = std::max(code, codes[k]);
  }
  return code;
}

nlohmann::json report_json(const StabilityReport& r) {
  auto num = [](double v) { return std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v); };
  return {{"max_kappa", r.max_kappa},
          {"max_iota", r.max_iota},
          {"sampled_kappa", r.sampled_kappa},
          {"sampled_iota", r.sampled_iota},
          {"ratio_v", num(r.ratio_v)},
          {"ratio_w", num(r.ratio_w)},
          {"kappa_ok", r.kappa_ok},
          {"iota_ok", r.iota_ok},
          {"delta0", r.delta0},
          {"delta0_lower_bound", num(r.delta0_lower_bound)},
          {"delta0_ok", r.delta0_ok},
          {"theta_p_max", r.theta_p_max},
          {"theta_ok", r.theta_ok},
          {"overall_ok", r.overall_ok}};
}

struct CheckArgs {
  std::optional<double> ratio, kappa, iota, theta_p, delta0;
  std::optional<int> n;
};

int cmd_check(ScenarioArgs args, const CheckArgs& c, const std::string& out_path) {
  // The check must report, not refuse, a lookahead below the bound.
  args.overrides.insert(args.overrides.begin(), "lookahead_check=off");
  const Scenario sc = args.load(args.scenario);
  const int n = c.n.value_or(static_cast<int>(sc.size()));
  const double delta0 = c.delta0.value_or(sc.los.delta0);
  StabilityReport r = check_conditions(*sc.path, sc.params.front(), n, sc.current.V.norm(),
                                       delta0, sc.envelope);
  if (c.ratio || c.kappa || c.iota || c.theta_p) {
    const double rv = c.ratio.value_or(r.ratio_v), rw = c.ratio.value_or(r.ratio_w);
    r = evaluate_conditions(rv, rw, c.kappa.value_or(r.max_kappa), c.iota.value_or(r.max_iota),
                            c.theta_p.value_or(r.theta_p_max), n, delta0);
  }
  std::cout << format_report(r);
  if (!out_path.empty()) std::ofstream(out_path) << report_json(r).dump(2) << '\n';
  return r.overall_ok ? 0 : kExitFailed;
}

int cmd_verify(const std::string& out_path) {
  struct Row {
    std::string name;
    double value, threshold;
  };
  std::vector<Row> rows;
  const VehicleParams p = VehicleParams::surrogate();
  const ModelOracleResult mo = model_oracle(p, 1000, 1);
  rows.push_back({"model component vs matrix form (rel)", mo.max_relative, 1e-10});
  rows.push_back({"Coriolis skew symmetry", mo.max_skew, 1e-12});
  rows.push_back({"rotation orthonormality", mo.max_orthonormality, 1e-12});

  const OracleResult bo = barycenter_closed_loop_oracle(1000, 2);
  rows.push_back({"barycenter closed loop, x", bo.max_residual.x(), 1e-9});
  rows.push_back({"barycenter closed loop, y", bo.max_residual.y(), 1e-9});
  rows.push_back({"barycenter closed loop, z", bo.max_residual.z(), 1e-9});
  rows.push_back({"barycenter closed loop, residual/|state|", bo.max_relative, 1e-11});
  rows.push_back({"G_y, G_z at X1 = X2 = 0", bo.max_G_at_origin, 1e-12});
  rows.push_back({"G_y at X2 = 0", bo.max_Gy_nominal, 1e-12});

  Scenario sc = default_scenario({"formation.offsets=[[0,0,0]]", "lookahead_check=warn",
                                  "initial.p0=[0,4,3]"});
  const RateOracleResult ro = desired_rate_oracle(sc);
  rows.push_back({"q_d vs differenced theta_d", ro.max_q_error, 1e-3});
  rows.push_back({"psi_d rate vs differenced psi_d", ro.max_psi_error, 1e-3});

  bool ok = true;
  nlohmann::json summary = nlohmann::json::array();
  std::printf("%-44s %12s %10s\n", "oracle", "residual", "threshold");
  for (const Row& r : rows) {
    const bool pass = r.value < r.threshold;
    ok = ok && pass;
    std::printf("%-44s %12.3e %10.1e  %s\n", r.name.c_str(), r.value, r.threshold,
                pass ? "ok" : "FAIL");
    summary.push_back({{"oracle", r.name}, {"residual", r.value}, {"threshold", r.threshold},
                       {"pass", pass}});
  }
  const OracleResult printed = barycenter_closed_loop_oracle(1000, 2, 3, true);
  std::printf("\ninformational (not gated):\n");
  std::printf("%-44s %12.3e\n", "G_z at X2 = 0 (sin theta_p coupling)", bo.max_Gz_nominal);
  std::printf("%-44s %12.3e\n", "printed G_y, G_z and z sign, max residual",
              printed.max_residual.maxCoeff());
  if (!out_path.empty()) std::ofstream(out_path) << summary.dump(2) << '\n';
  return ok ? 0 : kExitFailed;
}

int cmd_metrics(const ScenarioArgs& args, const std::string& csv, const std::string& out_path) {
  const SimLog log = read_csv_file(csv);
  std::vector<std::string> overrides = args.all_overrides();
  overrides.insert(overrides.begin(), "lookahead_check=off");
  const Scenario sc = load_scenario(args.scenario, overrides);
  if (sc.size() != log.n_vehicles) {
    throw ConfigError("scenario and CSV disagree on the number of vehicles");
  }
  const Metrics m = compute_metrics(log, sc);
  print_metrics(m, std::cout);
  if (!out_path.empty()) std::ofstream(out_path) << metrics_json(m).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Formation path following for underactuated AUVs"};
  app.require_subcommand(1);

  ScenarioArgs run_args, check_args, metrics_args;
  std::string run_out, check_out, verify_out, metrics_out, metrics_csv;
  std::vector<std::string> batch;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  CheckArgs check;

  CLI::App* run_cmd = app.add_subcommand("run", "simulate a scenario and write CSV telemetry");
  run_args.add_to(run_cmd);
  run_cmd->add_option("--out", run_out, "CSV path (directory with --batch)");
  run_cmd->add_option("--batch", batch, "scenario files to run on a worker pool");
  run_cmd->add_option("--jobs", jobs, "worker threads for --batch");

  CLI::App* check_cmd = app.add_subcommand("check", "evaluate the stability conditions");
  check_args.add_to(check_cmd);
  check_cmd->add_option("--out", check_out, "JSON summary path");
  check_cmd->add_option("--ratio", check.ratio, "use this |Y/X| ratio for sway and heave");
  check_cmd->add_option("--kappa", check.kappa, "use this max |kappa|");
  check_cmd->add_option("--iota", check.iota, "use this max |iota|");
  check_cmd->add_option("--theta-p", check.theta_p, "use this max |theta_p| [rad]");
  check_cmd->add_option("--n", check.n, "fleet size");
  check_cmd->add_option("--delta0", check.delta0, "lookahead distance");

  CLI::App* verify_cmd = app.add_subcommand("verify", "run the numerical oracle suite");
  verify_cmd->add_option("--out", verify_out, "JSON summary path");

  CLI::App* metrics_cmd = app.add_subcommand("metrics", "recompute metrics from a CSV");
  metrics_args.add_to(metrics_cmd);
  metrics_cmd->add_option("--csv", metrics_csv, "telemetry CSV")->required();
  metrics_cmd->add_option("--out", metrics_out, "JSON summary path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run_cmd) return cmd_run(run_args, run_out, batch, jobs);
    if (*check_cmd) return cmd_check(check_args, check, check_out);
    if (*verify_cmd) return cmd_verify(verify_out);
    if (*metrics_cmd) return cmd_metrics(metrics_args, metrics_csv, metrics_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DomainError& e) {
    std::cerr << "domain error: " << e.what() << '\n';
    return kExitAbort;
  }
  return kExitFailed;
}
