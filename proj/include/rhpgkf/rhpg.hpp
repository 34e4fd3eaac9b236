#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "rhpgkf/riccati.hpp"
#include "rhpgkf/simkit.hpp"

namespace rhpgkf {

enum class InnerMode { kExact, kZerothOrder };

/// Step-size schedule of the zeroth-order inner loop.
enum class StepPolicy {
  /// η_i = eta0 / (i + step_offset). Uses no model information.
  kHarmonic,
  /// η_i = eta0 / (μ_h (i + d κ_h + step_offset)) with μ_h, κ_h the curvature of
  /// the step-h subproblem and d = n(n+m). Reads the subproblem moments.
  kCurvatureScaled,
};

struct InnerSolverConfig {
  InnerMode mode = InnerMode::kZerothOrder;
  double eta0 = 0.05;
  double r0 = 1.0;
  long max_iters = 1000000;
  /// Per-stage stopping tolerance; 0 means ε/N inside rhpg_kf.
  double target_tol = 0.0;
  /// Accuracy ε the radius schedule r_i = r0 √ε / i is scaled by.
  double epsilon = 0.1;
  int batch = 1;
  /// Stop as soon as the distance to the exact subproblem optimum is within
  /// target_tol (benchmark mode). Otherwise run exactly max_iters iterations.
  bool benchmark = true;
  StepPolicy step_policy = StepPolicy::kHarmonic;
  double step_offset = 0.0;
  double divergence_bound = 1e6;
  bool full_sum = false;
  /// Keep a log-spaced record of (iteration, subproblem error) per stage.
  bool record_trace = false;
};

struct TracePoint {
  long iteration = 0;
  long cumulative_samples = 0;
  double subproblem_error = 0.0;
};

struct StageRecord {
  int h = 0;
  long iterations = 0;
  long samples = 0;
  std::optional<double> subproblem_error;
  /// Distance to (A − L_h C, L_h) of the exact Riccati trace, when supplied.
  std::optional<double> reference_gap;
  bool converged = true;
  std::vector<TracePoint> trace;
};

struct RunRecord {
  double epsilon = 0.0;
  int horizon = 0;
  std::uint64_t seed = 0;
  std::vector<StageRecord> per_stage;
  long total_samples = 0;
  std::optional<double> final_policy_error;
  double final_spectral_radius = std::numeric_limits<double>::quiet_NaN();
  bool stabilizing = false;
  double wall_time_ms = 0.0;
  /// Empty unless the run aborted; holds the error message.
  std::string failure;

  bool meets_target() const {
    return failure.empty() && stabilizing && final_policy_error.has_value() &&
           *final_policy_error <= epsilon;
  }
};

struct PolicyEvaluation {
  double error = 0.0;
  bool stabilizing = false;
  double spectral_radius = 0.0;
  /// error < 1 − ‖A_L*‖_*, the sufficient condition for stability.
  bool within_stability_margin = false;
};

/// Θ' = Θ − η g.
inline FilterStage pg_step(const FilterStage& theta, const Matrix& g, double eta) {
  if (!(eta > 0.0)) throw PreconditionError("pg_step: stepsize must be positive");
  const Matrix stacked = theta.stacked();
  if (g.rows() != stacked.rows() || g.cols() != stacked.cols())
    throw DimensionError("g", "must match [A_L B_L]");
  return FilterStage::from_stacked(stacked - eta * g, theta.a_l.rows());
}

inline PolicyEvaluation evaluate_policy(const FilterStage& stage, const FareSolution& fare) {
  PolicyEvaluation ev;
  Matrix target(fare.a_closed.rows(), fare.a_closed.cols() + fare.b_closed.cols());
  target << fare.a_closed, fare.b_closed;
  ev.error = spectral_norm(stage.stacked() - target);
  ev.spectral_radius = spectral_radius(stage.a_l);
  ev.stabilizing = ev.spectral_radius < 1.0;
  ev.within_stability_margin = ev.error < 1.0 - fare.induced_norm_acl;
  return ev;
}

struct SubproblemResult {
  FilterStage stage;
  long iterations = 0;
  long samples = 0;
  std::optional<double> error;
  bool converged = true;
  std::vector<TracePoint> trace;
};

namespace detail {

/// Distance to the minimizer set with cheap Frobenius bounds before an SVD.
inline double bounded_distance(const SubproblemGeometry& geo, const Matrix& theta, double tol,
                               Matrix& scratch) {
  if (geo.full_rank) {
    scratch = theta - geo.optimum;
  } else {
    scratch.noalias() = (theta - geo.optimum) * geo.range_projector;
  }
  const double fro = scratch.norm();
  if (fro <= tol) return fro;
  const double rank_bound = std::sqrt(static_cast<double>(std::min(scratch.rows(), scratch.cols())));
  if (fro > tol * rank_bound) return fro;
  return spectral_norm(scratch);
}

/// Log-spaced iteration marks: 1..10, then ~5% increments.
inline bool is_trace_mark(long i, long& next_mark) {
  if (i < next_mark) return false;
  next_mark = i < 10 ? i + 1 : static_cast<long>(std::ceil(static_cast<double>(i) * 1.05));
  return true;
}

}  // namespace detail

/// Exact-gradient descent with constant stepsize η = min(eta0, 1/ψ) from
/// Θ₀ (zero by default) until ‖Θ − Θ*‖ ≤ target_tol.
inline SubproblemResult solve_subproblem_exact(const MomentSet& mom, const InnerSolverConfig& cfg,
                                               const std::optional<Matrix>& initial = std::nullopt) {
  if (cfg.mode != InnerMode::kExact)
    throw PreconditionError("solve_subproblem_exact: config mode is not exact");
  if (cfg.max_iters < 1) throw PreconditionError("solve_subproblem_exact: max_iters must be >= 1");
  if (!(cfg.eta0 > 0.0)) throw PreconditionError("solve_subproblem_exact: eta0 must be positive");
  if (!(cfg.target_tol > 0.0))
    throw PreconditionError("solve_subproblem_exact: target_tol must be positive");
  const auto geo = analyze_subproblem(mom);
  const auto n = mom.cross_moment.rows();
  Matrix theta = initial.value_or(Matrix::Zero(n, mom.cross_moment.cols()));
  if (theta.rows() != n || theta.cols() != mom.cross_moment.cols())
    throw DimensionError("initial", "must be n x (n+m)");
  const double eta = std::min(cfg.eta0, 1.0 / geo.smoothness);
  const Matrix& mm = mom.regressor_second_moment;
  const Matrix& xi = mom.cross_moment;

  SubproblemResult res;
  Matrix scratch;
  double err = std::numeric_limits<double>::infinity();
  long next_mark = 1;
  for (long i = 1; i <= cfg.max_iters; ++i) {
    theta -= eta * 2.0 * (theta * mm - xi);
    err = detail::bounded_distance(geo, theta, cfg.target_tol, scratch);
    if (cfg.record_trace && detail::is_trace_mark(i, next_mark))
      res.trace.push_back({i, 0, err});
    if (err <= cfg.target_tol) {
      res.iterations = i;
      break;
    }
  }
  if (!(err <= cfg.target_tol))
    throw ConvergenceError("solve_subproblem_exact: max_iters reached", err);
  res.stage = FilterStage::from_stacked(theta, n);
  res.error = err;
  return res;
}

/// Zeroth-order PG on the step-h subproblem (h = prefix.size()) from Θ₀ = 0,
/// with η_i from the configured step policy and r_i = r0 √ε / i.
inline SubproblemResult solve_subproblem_zo(const LtiSystem& sys, const FilterSequence& prefix,
                                            const InnerSolverConfig& cfg, Rng& rng) {
  if (cfg.mode != InnerMode::kZerothOrder)
    throw PreconditionError("solve_subproblem_zo: config mode is not zeroth_order");
  if (cfg.max_iters < 1) throw PreconditionError("solve_subproblem_zo: max_iters must be >= 1");
  if (cfg.batch < 1) throw PreconditionError("solve_subproblem_zo: batch must be >= 1");
  if (!(cfg.eta0 > 0.0) || !(cfg.r0 > 0.0) || !(cfg.epsilon > 0.0))
    throw PreconditionError("solve_subproblem_zo: eta0, r0 and epsilon must be positive");
  if (cfg.benchmark && !(cfg.target_tol > 0.0))
    throw PreconditionError("solve_subproblem_zo: benchmark mode needs a positive target_tol");

  const auto n = sys.n();
  const auto m = sys.m();
  const int h = static_cast<int>(prefix.size());
  const double dim = static_cast<double>(n * (n + m));

  std::optional<SubproblemGeometry> geo;
  if (cfg.benchmark || cfg.step_policy == StepPolicy::kCurvatureScaled || cfg.record_trace)
    geo = analyze_subproblem(propagate_moments(sys, prefix, h));

  double step_scale = cfg.eta0;
  double step_offset = cfg.step_offset;
  if (cfg.step_policy == StepPolicy::kCurvatureScaled) {
    step_scale = cfg.eta0 / geo->strong_convexity;
    step_offset += dim * geo->smoothness / geo->strong_convexity;
  }

  Simulator sim(sys);
  OracleOptions oracle_opts;
  oracle_opts.full_sum = cfg.full_sum;
  Matrix theta = Matrix::Zero(n, n + m);
  Matrix g_sum(n, n + m);
  GradientEstimate est;
  est.g.resize(n, n + m);
  Matrix scratch;

  SubproblemResult res;
  res.converged = !cfg.benchmark;
  const double sqrt_eps = std::sqrt(cfg.epsilon);
  long next_mark = 1;
  long i = 1;
  for (; i <= cfg.max_iters; ++i) {
    const double di = static_cast<double>(i);
    const double eta = step_scale / (di + step_offset);
    const double r = cfg.r0 * sqrt_eps / di;
    g_sum.setZero();
    for (int b = 0; b < cfg.batch; ++b) {
      sim.zo_oracle_into(prefix, prefix.size(), theta, r, rng, est, oracle_opts);
      g_sum += est.g;
    }
    theta -= (eta / cfg.batch) * g_sum;
    if (!theta.allFinite() || theta.norm() > cfg.divergence_bound)
      throw DivergenceError("zeroth-order iterate left the divergence bound", h);

    if (cfg.record_trace && detail::is_trace_mark(i, next_mark))
      res.trace.push_back({i, 2L * cfg.batch * i, geo->distance(theta)});
    if (cfg.benchmark &&
        detail::bounded_distance(*geo, theta, cfg.target_tol, scratch) <= cfg.target_tol) {
      res.converged = true;
      break;
    }
  }
  res.iterations = std::min(i, cfg.max_iters);
  res.samples = 2L * cfg.batch * res.iterations;
  if (geo) {
    res.error = geo->distance(theta);
    if (cfg.record_trace && (res.trace.empty() || res.trace.back().iteration != res.iterations))
      res.trace.push_back({res.iterations, res.samples, *res.error});
  }
  res.stage = FilterStage::from_stacked(theta, n);
  return res;
}

struct DriverOptions {
  /// Enables final_policy_error and the stability-margin report.
  std::optional<FareSolution> fare;
  /// Exact Riccati trace; per-stage gaps to (A − L_h C, L_h) are recorded.
  std::optional<RiccatiTrace> reference;
};

struct RhpgResult {
  FilterSequence filter;
  RunRecord record;
};

/// Receding-horizon policy gradient: for h = 0..N−1, solve the one-step
/// subproblem with all earlier stages frozen; the last stage is the policy.
inline RhpgResult rhpg_kf(const LtiSystem& sys, int n_horizon, const InnerSolverConfig& cfg,
                          Rng& rng, const DriverOptions& opts = {}) {
  if (n_horizon < 1) throw PreconditionError("rhpg_kf: horizon must be at least 1");
  const auto start = std::chrono::steady_clock::now();
  InnerSolverConfig stage_cfg = cfg;
  if (!(stage_cfg.target_tol > 0.0)) stage_cfg.target_tol = cfg.epsilon / n_horizon;

  RhpgResult out;
  out.record.epsilon = cfg.epsilon;
  out.record.horizon = n_horizon;
  for (int h = 0; h < n_horizon; ++h) {
    SubproblemResult sub;
    try {
      if (cfg.mode == InnerMode::kExact) {
        sub = solve_subproblem_exact(propagate_moments(sys, out.filter, h), stage_cfg);
      } else {
        sub = solve_subproblem_zo(sys, out.filter, stage_cfg, rng);
      }
    } catch (const DivergenceError& e) {
      if (e.stage() >= 0) throw;
      throw DivergenceError(e.what(), h);
    } catch (const ConvergenceError& e) {
      throw ConvergenceError("stage " + std::to_string(h) + ": " + e.message(), e.last_residual());
    }
    StageRecord rec;
    rec.h = h;
    rec.iterations = sub.iterations;
    rec.samples = sub.samples;
    rec.subproblem_error = sub.error;
    rec.converged = sub.converged;
    rec.trace = std::move(sub.trace);
    if (opts.reference && static_cast<std::size_t>(h) < opts.reference->gains.size()) {
      const Matrix& gain = opts.reference->gains[h];
      FilterStage ref{sys.a() - gain * sys.c(), gain};
      rec.reference_gap = spectral_norm(sub.stage.stacked() - ref.stacked());
    }
    out.record.total_samples += rec.samples;
    out.record.per_stage.push_back(std::move(rec));
    out.filter.stages.push_back(std::move(sub.stage));
  }

  const FilterStage& last = out.filter.stages.back();
  out.record.final_spectral_radius = spectral_radius(last.a_l);
  out.record.stabilizing = out.record.final_spectral_radius < 1.0;
  if (opts.fare) out.record.final_policy_error = evaluate_policy(last, *opts.fare).error;
  out.record.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace rhpgkf
