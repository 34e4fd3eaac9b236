#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <toml.hpp>

#include "rhpgkf/rhpg.hpp"

namespace rhpgkf {

/// How the horizon N is chosen from the accuracy target ε.
enum class HorizonRule {
  kHalfEpsilon,  // horizon_bound(ε/2): half the budget for truncation
  kEpsilon,      // horizon_bound(ε)
};

struct ExperimentSpec {
  std::string name;
  LtiSystem system;
  std::vector<double> epsilons;  // strictly positive, descending
  int trials_per_epsilon = 10;
  InnerSolverConfig inner;
  std::uint64_t base_seed = 0;
  std::string output_path;
  HorizonRule horizon_rule = HorizonRule::kHalfEpsilon;
  std::optional<int> fixed_horizon;
  bool trace = false;
};

/// Config file that parsed but describes an invalid system.
class ValidationFailure : public ConfigError {
 public:
  ValidationFailure(const std::string& what, ValidationReport report)
      : ConfigError(what + "\n" + report.summary()), report_(std::move(report)) {}
  const ValidationReport& report() const noexcept { return report_; }
  const char* kind() const noexcept override { return "validation"; }

 private:
  ValidationReport report_;
};

namespace detail {

inline Matrix toml_matrix(const toml::table& tbl, const char* key) {
  const auto* arr = tbl[key].as_array();
  if (arr == nullptr || arr->empty())
    throw ConfigError(std::string("[system] ") + key + ": expected a nonempty nested array");
  const auto rows = static_cast<Eigen::Index>(arr->size());
  Eigen::Index cols = -1;
  Matrix out;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto* row = (*arr)[static_cast<std::size_t>(i)].as_array();
    if (row == nullptr)
      throw ConfigError(std::string("[system] ") + key + ": rows must be arrays");
    if (cols < 0) {
      cols = static_cast<Eigen::Index>(row->size());
      out.resize(rows, cols);
    } else if (static_cast<Eigen::Index>(row->size()) != cols) {
      throw ConfigError(std::string("[system] ") + key + ": ragged rows");
    }
    for (Eigen::Index j = 0; j < cols; ++j) {
      auto value = (*row)[static_cast<std::size_t>(j)].value<double>();
      if (!value) throw ConfigError(std::string("[system] ") + key + ": entries must be numbers");
      out(i, j) = *value;
    }
  }
  return out;
}

inline Vector toml_vector(const toml::table& tbl, const char* key) {
  const auto* arr = tbl[key].as_array();
  if (arr == nullptr || arr->empty())
    throw ConfigError(std::string("[system] ") + key + ": expected a nonempty array");
  Vector out(static_cast<Eigen::Index>(arr->size()));
  for (std::size_t i = 0; i < arr->size(); ++i) {
    auto value = (*arr)[i].value<double>();
    if (!value) throw ConfigError(std::string("[system] ") + key + ": entries must be numbers");
    out(static_cast<Eigen::Index>(i)) = *value;
  }
  return out;
}

template <typename T>
T toml_get(const toml::node_view<const toml::node>& node, const std::string& where, T fallback) {
  if (!node) return fallback;
  auto value = node.value<T>();
  if (!value) throw ConfigError(where + ": wrong value type");
  return *value;
}

}  // namespace detail

/// Parses and validates a config document. `source` names it in messages.
inline ExperimentSpec parse_config(std::string_view text, const std::string& source = "<config>") {
  toml::table doc;
  try {
    doc = toml::parse(text, source);
  } catch (const toml::parse_error& err) {
    std::ostringstream os;
    os << source << ":" << err.source().begin.line << ":" << err.source().begin.column << ": "
       << err.description();
    throw ConfigError(os.str());
  }

  const auto* sys_tbl = doc["system"].as_table();
  if (sys_tbl == nullptr) throw ConfigError(source + ": missing [system] table");

  std::optional<LtiSystem> sys;
  try {
    sys.emplace(detail::toml_matrix(*sys_tbl, "a"), detail::toml_matrix(*sys_tbl, "c"),
                detail::toml_matrix(*sys_tbl, "w"), detail::toml_matrix(*sys_tbl, "v"),
                detail::toml_vector(*sys_tbl, "x0_mean"), detail::toml_matrix(*sys_tbl, "x0_cov"));
  } catch (const DimensionError& e) {
    throw ConfigError(source + ": [system] " + e.what());
  }

  ExperimentSpec spec{.name = "", .system = *sys, .epsilons = {}};
  const toml::table empty;
  const toml::table* run = doc["run"].as_table();
  if (run == nullptr) run = &empty;
  const auto rv = toml::node_view<const toml::node>(run);
  spec.name = detail::toml_get<std::string>(rv["name"], "[run] name", "");

  if (const auto* eps = (*run)["epsilons"].as_array()) {
    for (const auto& node : *eps) {
      auto value = node.value<double>();
      if (!value) throw ConfigError(source + ": [run] epsilons must be numbers");
      spec.epsilons.push_back(*value);
    }
  } else {
    spec.epsilons = {0.1};
  }
  if (spec.epsilons.empty()) throw ConfigError(source + ": [run] epsilons is empty");
  for (double e : spec.epsilons)
    if (!(e > 0.0)) throw ConfigError(source + ": [run] epsilons must be strictly positive");
  std::sort(spec.epsilons.begin(), spec.epsilons.end(), std::greater<>());
  if (std::adjacent_find(spec.epsilons.begin(), spec.epsilons.end()) != spec.epsilons.end())
    throw ConfigError(source + ": [run] epsilons contains duplicates");

  spec.trials_per_epsilon = static_cast<int>(detail::toml_get<int64_t>(rv["trials"], "[run] trials", 10));
  if (spec.trials_per_epsilon < 1) throw ConfigError(source + ": [run] trials must be at least 1");
  spec.base_seed =
      static_cast<std::uint64_t>(detail::toml_get<int64_t>(rv["base_seed"], "[run] base_seed", 0));
  spec.output_path = detail::toml_get<std::string>(rv["output"], "[run] output", "records.csv");
  spec.trace = detail::toml_get<bool>(rv["trace"], "[run] trace", false);

  const auto mode = detail::toml_get<std::string>(rv["mode"], "[run] mode", "zeroth_order");
  if (mode == "zeroth_order" || mode == "zo") {
    spec.inner.mode = InnerMode::kZerothOrder;
  } else if (mode == "exact") {
    spec.inner.mode = InnerMode::kExact;
  } else {
    throw ConfigError(source + ": [run] mode must be \"exact\" or \"zeroth_order\"");
  }

  const auto rule = detail::toml_get<std::string>(rv["horizon_rule"], "[run] horizon_rule",
                                                  "half_epsilon");
  if (rule == "half_epsilon") {
    spec.horizon_rule = HorizonRule::kHalfEpsilon;
  } else if (rule == "epsilon") {
    spec.horizon_rule = HorizonRule::kEpsilon;
  } else {
    throw ConfigError(source + ": [run] horizon_rule must be \"half_epsilon\" or \"epsilon\"");
  }
  if (rv["horizon"]) {
    spec.fixed_horizon = static_cast<int>(detail::toml_get<int64_t>(rv["horizon"], "[run] horizon", 1));
    if (*spec.fixed_horizon < 1) throw ConfigError(source + ": [run] horizon must be >= 1");
  }

  const auto iv = rv["inner"];
  auto& in = spec.inner;
  in.eta0 = detail::toml_get<double>(iv["eta0"], "[run.inner] eta0", 1.0);
  in.r0 = detail::toml_get<double>(iv["r0"], "[run.inner] r0", 1.0);
  in.max_iters = static_cast<long>(
      detail::toml_get<int64_t>(iv["max_iters"], "[run.inner] max_iters", 200000000));
  in.batch = static_cast<int>(detail::toml_get<int64_t>(iv["batch"], "[run.inner] batch", 1));
  in.target_tol = detail::toml_get<double>(iv["target_tol"], "[run.inner] target_tol", 0.0);
  in.benchmark = detail::toml_get<bool>(iv["benchmark"], "[run.inner] benchmark", true);
  in.step_offset = detail::toml_get<double>(iv["step_offset"], "[run.inner] step_offset", 0.0);
  in.divergence_bound =
      detail::toml_get<double>(iv["divergence_bound"], "[run.inner] divergence_bound", 1e6);
  in.full_sum = detail::toml_get<bool>(iv["full_sum"], "[run.inner] full_sum", false);
  const auto policy =
      detail::toml_get<std::string>(iv["step_policy"], "[run.inner] step_policy", "curvature");
  if (policy == "curvature") {
    in.step_policy = StepPolicy::kCurvatureScaled;
  } else if (policy == "harmonic") {
    in.step_policy = StepPolicy::kHarmonic;
  } else {
    throw ConfigError(source + ": [run.inner] step_policy must be \"curvature\" or \"harmonic\"");
  }
  if (!(in.eta0 > 0.0) || !(in.r0 > 0.0))
    throw ConfigError(source + ": [run.inner] eta0 and r0 must be positive");
  if (in.max_iters < 1 || in.batch < 1)
    throw ConfigError(source + ": [run.inner] max_iters and batch must be at least 1");
  in.record_trace = spec.trace;

  auto report = validate_system(spec.system);
  if (!report.passed()) throw ValidationFailure(source + ": system fails validation", report);
  FareSolution fare;
  try {
    fare = solve_fare(spec.system);
  } catch (const Error& e) {
    throw ConfigError(source + ": FARE solve failed: " + e.what());
  }
  report = validate_system(spec.system, fare);
  if (!report.passed()) throw ValidationFailure(source + ": system fails validation", report);
  return spec;
}

inline ExperimentSpec load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Per-trial seed from the base seed, the bit pattern of ε and the trial
/// index; independent of the rest of the ε grid.
inline std::uint64_t derive_seed(std::uint64_t base_seed, double epsilon, int trial) {
  std::uint64_t s = splitmix64(base_seed);
  s = splitmix64(s ^ std::bit_cast<std::uint64_t>(epsilon));
  return splitmix64(s ^ static_cast<std::uint64_t>(trial));
}

inline int horizon_for(const ExperimentSpec& spec, const FareSolution& fare, double epsilon) {
  if (spec.fixed_horizon) return *spec.fixed_horizon;
  const double target = spec.horizon_rule == HorizonRule::kHalfEpsilon ? 0.5 * epsilon : epsilon;
  return horizon_bound(spec.system, fare, target);
}

/// Worker count: RHPGKF_THREADS if set, else hardware concurrency.
inline unsigned worker_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RHPGKF_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = static_cast<unsigned>(cap);
  }
  return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

/// Runs one learning run for (ε, seed) and never throws for algorithmic
/// failures; they are recorded in RunRecord::failure.
inline RunRecord run_trial(const ExperimentSpec& spec, const FareSolution& fare, double epsilon,
                           std::uint64_t seed) {
  InnerSolverConfig cfg = spec.inner;
  cfg.epsilon = epsilon;
  cfg.record_trace = spec.trace;
  const int horizon = horizon_for(spec, fare, epsilon);
  Rng rng(seed);
  DriverOptions opts;
  opts.fare = fare;
  RunRecord rec;
  try {
    rec = rhpg_kf(spec.system, horizon, cfg, rng, opts).record;
  } catch (const Error& e) {
    rec.failure = e.what();
    rec.horizon = horizon;
  }
  rec.epsilon = epsilon;
  rec.seed = seed;
  return rec;
}

/// ε-sweep with `trials` runs per ε. Records come back sorted by
/// (ε descending, seed ascending) whatever order the workers finish in.
inline std::vector<RunRecord> run_benchmark(
    const ExperimentSpec& spec,
    const std::function<void(const RunRecord&)>& on_record = nullptr) {
  const FareSolution fare = solve_fare(spec.system);
  struct Job {
    double epsilon;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (double eps : spec.epsilons)
    for (int t = 0; t < spec.trials_per_epsilon; ++t) jobs.push_back({eps, derive_seed(spec.base_seed, eps, t)});

  std::vector<RunRecord> records(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mu;
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      records[k] = run_trial(spec, fare, jobs[k].epsilon, jobs[k].seed);
      if (on_record) {
        std::lock_guard lock(report_mu);
        on_record(records[k]);
      }
    }
  };
  const unsigned n_workers = worker_count(jobs.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  std::stable_sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) {
    if (a.epsilon != b.epsilon) return a.epsilon > b.epsilon;
    return a.seed < b.seed;
  });
  return records;
}

inline constexpr const char* kRecordsHeader =
    "epsilon,seed,horizon,total_samples,final_error,spectral_radius,stabilizing,wall_time_ms";
inline constexpr const char* kTraceHeader = "stage,iter,cum_samples,subproblem_error";

namespace detail {

inline std::string fmt_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace detail

/// Companion trace file name for a record: <stem>_trace_<index>.csv.
inline std::filesystem::path trace_path_for(const std::filesystem::path& csv, std::size_t index) {
  auto p = csv;
  p.replace_filename(csv.stem().string() + "_trace_" + std::to_string(index) + ".csv");
  return p;
}

inline void write_records_csv(const std::vector<RunRecord>& records,
                              const std::filesystem::path& path, bool with_traces = false) {
  auto out = detail::open_for_write(path);
  out << kRecordsHeader << '\n';
  for (const auto& r : records) {
    char wall[64];
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_time_ms);
    out << detail::fmt_real(r.epsilon) << ',' << r.seed << ',' << r.horizon << ','
        << r.total_samples << ','
        << detail::fmt_real(r.final_policy_error.value_or(std::numeric_limits<double>::quiet_NaN()))
        << ',' << detail::fmt_real(r.final_spectral_radius) << ','
        << (r.stabilizing ? "true" : "false") << ',' << wall << '\n';
  }
  if (!out) throw Error("write failed for " + path.string());

  if (!with_traces) return;
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto tpath = trace_path_for(path, k);
    auto tout = detail::open_for_write(tpath);
    tout << kTraceHeader << '\n';
    long offset = 0;
    for (const auto& stage : records[k].per_stage) {
      for (const auto& pt : stage.trace)
        tout << stage.h << ',' << pt.iteration << ',' << offset + pt.cumulative_samples << ','
             << detail::fmt_real(pt.subproblem_error) << '\n';
      offset += stage.samples;
    }
    if (!tout) throw Error("write failed for " + tpath.string());
  }
}

/// Parses a file written by write_records_csv (per-stage data is not stored).
inline std::vector<RunRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kRecordsHeader)
    throw Error(path.string() + ": unexpected header");
  std::vector<RunRecord> records;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cols.push_back(cell);
    if (cols.size() != 8)
      throw Error(path.string() + ":" + std::to_string(line_no) + ": expected 8 columns");
    RunRecord r;
    try {
      r.epsilon = std::stod(cols[0]);
      r.seed = std::stoull(cols[1]);
      r.horizon = std::stoi(cols[2]);
      r.total_samples = std::stol(cols[3]);
      const double err = std::stod(cols[4]);
      if (!std::isnan(err)) r.final_policy_error = err;
      r.final_spectral_radius = std::stod(cols[5]);
      r.stabilizing = cols[6] == "true";
      r.wall_time_ms = std::stod(cols[7]);
    } catch (const std::exception&) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": malformed value");
    }
    records.push_back(std::move(r));
  }
  return records;
}

/// Experiment presets matching the bundled configs/scalar.toml and configs/vector.toml.
inline ExperimentSpec scalar_preset() {
  Matrix a(1, 1), c(1, 1), w(1, 1), v(1, 1), x0_cov(1, 1);
  Vector x0_mean(1);
  a << 2.0;
  c << 1.0;
  w << 1.0;
  v << 1.0;
  x0_cov << 5.0;
  x0_mean << 1.0;
  ExperimentSpec spec{.name = "scalar",
                      .system = LtiSystem(a, c, w, v, x0_mean, x0_cov),
                      .epsilons = {3.16e-1, 1e-1, 3.16e-2, 1e-2, 3.16e-3, 1e-3}};
  spec.trials_per_epsilon = 10;
  spec.base_seed = 20230301;
  spec.output_path = "scalar_sweep.csv";
  spec.inner.mode = InnerMode::kZerothOrder;
  spec.inner.eta0 = 1.0;
  spec.inner.r0 = 1.0;
  spec.inner.max_iters = 200000000;
  spec.inner.step_policy = StepPolicy::kCurvatureScaled;
  return spec;
}

inline ExperimentSpec vector_preset() {
  Matrix a(2, 2), c(2, 2);
  a << 9.9, -0.02, 0.01, 10.1;
  c << 0.99, 0.0, -0.01, 1.01;
  Vector x0_mean(2);
  x0_mean << 0.1, 0.1;
  ExperimentSpec spec{.name = "vector",
                      .system = LtiSystem(a, c, 1e-3 * Matrix::Identity(2, 2),
                                          1e-2 * Matrix::Identity(2, 2), x0_mean,
                                          2.0 * Matrix::Identity(2, 2)),
                      .epsilons = {0.8}};
  spec.trials_per_epsilon = 1;
  spec.base_seed = 20230302;
  spec.output_path = "vector_run.csv";
  spec.inner.mode = InnerMode::kZerothOrder;
  spec.inner.eta0 = 1.0;
  spec.inner.r0 = 1.0;
  spec.inner.max_iters = 200000000;
  spec.inner.step_policy = StepPolicy::kCurvatureScaled;
  return spec;
}

}  // namespace rhpgkf
