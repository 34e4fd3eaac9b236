// Command-line front end: validate, fare, horizon, run, bench, reproduce.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rhpgkf/harness.hpp"

namespace fs = std::filesystem;
using namespace rhpgkf;

namespace {

constexpr int kExitTargetMissed = 1;
constexpr int kExitError = 2;

int report_error(const std::string& kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << std::endl;
  return kExitError;
}

std::string fmt(double x, int digits = 7) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return buf;
}

std::string fmt_matrix(const Matrix& m) {
  std::string out = "[";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out += i ? ", [" : "[";
    for (Eigen::Index j = 0; j < m.cols(); ++j) out += (j ? ", " : "") + fmt(m(i, j));
    out += "]";
  }
  return out + "]";
}

void print_record(const RunRecord& r) {
  std::cout << "epsilon=" << fmt(r.epsilon, 4) << " seed=" << r.seed << " N=" << r.horizon
            << " samples=" << r.total_samples << " error="
            << (r.final_policy_error ? fmt(*r.final_policy_error, 5) : std::string("nan"))
            << " rho=" << fmt(r.final_spectral_radius, 5)
            << " stabilizing=" << (r.stabilizing ? "true" : "false")
            << (r.failure.empty() ? "" : " failure=\"" + r.failure + "\"")
            << (r.meets_target() ? "" : "  [target missed]") << '\n';
}

/// Per-ε summary; returns true iff every record meets its target.
bool summarize(const std::vector<RunRecord>& records) {
  std::map<double, std::pair<int, int>, std::greater<>> tally;
  bool all = true;
  for (const auto& r : records) {
    auto& [ok, total] = tally[r.epsilon];
    ++total;
    if (r.meets_target()) ++ok;
    all = all && r.meets_target();
  }
  for (const auto& [eps, t] : tally)
    std::cout << "epsilon=" << fmt(eps, 4) << ": " << t.first << "/" << t.second
              << " runs met the target\n";
  return all;
}

int bench(ExperimentSpec spec, const fs::path& out) {
  const auto records = run_benchmark(spec, [](const RunRecord& r) { print_record(r); });
  write_records_csv(records, out, spec.trace);
  std::cout << "wrote " << out.string() << '\n';
  return summarize(records) ? 0 : kExitTargetMissed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Receding-horizon policy gradient for steady-state Kalman filter learning"};
  app.require_subcommand(1);

  std::string config;
  auto* validate_cmd = app.add_subcommand("validate", "check a config and its system");
  validate_cmd->add_option("--config", config, "TOML config")->required();

  double tol = 1e-12;
  int max_iter = 100000;
  auto* fare_cmd = app.add_subcommand("fare", "solve the filter algebraic Riccati equation");
  fare_cmd->add_option("--config", config, "TOML config")->required();
  fare_cmd->add_option("--tol", tol, "relative fixed-point tolerance");
  fare_cmd->add_option("--max-iter", max_iter, "iteration limit");

  double epsilon = 0.0;
  std::string rule = "epsilon";
  auto* horizon_cmd = app.add_subcommand("horizon", "print the horizon bound for an accuracy");
  horizon_cmd->add_option("--config", config, "TOML config")->required();
  horizon_cmd->add_option("--epsilon", epsilon, "accuracy target")->required();
  horizon_cmd->add_option("--rule", rule, "epsilon or half_epsilon")
      ->check(CLI::IsMember({"epsilon", "half_epsilon"}));

  std::string mode;
  std::uint64_t seed = 0;
  std::string out;
  auto* run_cmd = app.add_subcommand("run", "single learning run");
  run_cmd->add_option("--config", config, "TOML config")->required();
  run_cmd->add_option("--mode", mode, "exact or zo")->check(CLI::IsMember({"exact", "zo"}));
  auto* eps_opt = run_cmd->add_option("--epsilon", epsilon, "accuracy target (default: first in config)");
  auto* seed_opt = run_cmd->add_option("--seed", seed, "RNG seed (default: derived for trial 0)");
  run_cmd->add_option("--out", out, "write the record as CSV");

  auto* bench_cmd = app.add_subcommand("bench", "epsilon sweep with several trials per epsilon");
  bench_cmd->add_option("--config", config, "TOML config")->required();
  bench_cmd->add_option("--out", out, "records CSV")->required();

  std::string preset;
  int trials = 0;
  auto* repro_cmd = app.add_subcommand("reproduce", "run a built-in preset");
  repro_cmd->add_option("preset", preset, "scalar or vector")
      ->required()
      ->check(CLI::IsMember({"scalar", "vector"}));
  repro_cmd->add_option("--out", out, "output directory")->required();
  repro_cmd->add_option("--trials", trials, "override trials per epsilon")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*validate_cmd) {
      try {
        const auto spec = load_config(config);
        std::cout << validate_system(spec.system, solve_fare(spec.system)).summary() << '\n';
        std::cout << "ok\n";
        return 0;
      } catch (const ValidationFailure& e) {
        std::cout << e.report().summary() << '\n';
        throw;
      }
    }

    if (*fare_cmd) {
      const auto spec = load_config(config);
      const auto sol = solve_fare(spec.system, tol, max_iter);
      std::cout << "Sigma* = " << fmt_matrix(sol.sigma_star) << '\n'
                << "L* = " << fmt_matrix(sol.gain_star) << '\n'
                << "A_L* = " << fmt_matrix(sol.a_closed) << '\n'
                << "weighted norm of A_L* = " << fmt(sol.induced_norm_acl) << '\n'
                << "iterations = " << sol.iterations << '\n'
                << "residual = " << fmt(sol.residual, 3) << '\n';
      return 0;
    }

    if (*horizon_cmd) {
      const auto spec = load_config(config);
      const auto sol = solve_fare(spec.system);
      std::cout << horizon_bound(spec.system, sol, rule == "half_epsilon" ? 0.5 * epsilon : epsilon)
                << '\n';
      return 0;
    }

    if (*run_cmd) {
      auto spec = load_config(config);
      if (mode == "exact") spec.inner.mode = InnerMode::kExact;
      if (mode == "zo") spec.inner.mode = InnerMode::kZerothOrder;
      if (eps_opt->count() == 0) epsilon = spec.epsilons.front();
      if (!(epsilon > 0.0)) return report_error("config", "--epsilon must be positive");
      if (seed_opt->count() == 0) seed = derive_seed(spec.base_seed, epsilon, 0);
      const auto fare = solve_fare(spec.system);
      const auto rec = run_trial(spec, fare, epsilon, seed);
      print_record(rec);
      if (!out.empty()) write_records_csv({rec}, out, spec.trace);
      return rec.meets_target() ? 0 : kExitTargetMissed;
    }

    if (*bench_cmd) return bench(load_config(config), out);

    if (*repro_cmd) {
      auto spec = preset == "scalar" ? scalar_preset() : vector_preset();
      if (trials > 0) spec.trials_per_epsilon = trials;
      return bench(spec, fs::path(out) / spec.output_path);
    }
  } catch (const Error& e) {
    return report_error(e.kind(), e.what());
  } catch (const std::exception& e) {
    return report_error("internal", e.what());
  }
  return 0;
}
