#include <gtest/gtest.h>

#include <map>
#include <string>

#include "rhpgkf/rhpg.hpp"
#include "support/oracles.hpp"

using namespace rhpgkf;

namespace {

FilterStage stage(double a, double b) {
  return {Matrix::Constant(1, 1, a), Matrix::Constant(1, 1, b)};
}

InnerSolverConfig exact_cfg(double tol) {
  InnerSolverConfig cfg;
  cfg.mode = InnerMode::kExact;
  cfg.eta0 = 1e9;  // step capped at 1/ψ
  cfg.target_tol = tol;
  // iterations grow like κ_h, which grows like ρ(A)^{2h}
  cfg.max_iters = 200000000;
  return cfg;
}

InnerSolverConfig zo_cfg(double eps, double tol) {
  InnerSolverConfig cfg;
  cfg.mode = InnerMode::kZerothOrder;
  cfg.eta0 = 1.0;
  cfg.step_policy = StepPolicy::kCurvatureScaled;
  cfg.epsilon = eps;
  cfg.target_tol = tol;
  cfg.max_iters = 50000000;
  return cfg;
}

double m_norm(const Matrix& d, const Matrix& m) { return std::sqrt((d * m * d.transpose()).trace()); }

}  // namespace

TEST(PgStep, Examples) {
  const auto st = stage(0.3, -1.2);
  const auto same = pg_step(st, Matrix::Zero(1, 2), 0.5);
  EXPECT_EQ(same.stacked(), st.stacked());
  const auto moved = pg_step(stage(0, 0), Matrix::Constant(1, 2, 2.0), 0.1);
  EXPECT_NEAR(moved.a_l(0, 0), -0.2, 1e-15);
  EXPECT_NEAR(moved.b_l(0, 0), -0.2, 1e-15);
  EXPECT_THROW(pg_step(st, Matrix::Zero(1, 2), 0.0), PreconditionError);
}

TEST(PgStep, StronglyConvexContraction) {
  const auto mom = propagate_moments(oracle::scalar_system(), FilterSequence{}, 0);
  const auto geo = analyze_subproblem(mom);
  const double rate = std::sqrt(1.0 - geo.strong_convexity / geo.smoothness);
  std::mt19937_64 g(41);
  for (int k = 0; k < 50; ++k) {
    const FilterStage st = FilterStage::from_stacked(oracle::random_matrix(g, 1, 2, 3.0), 1);
    const auto next = pg_step(st, exact_subproblem_gradient(mom, st), 1.0 / geo.smoothness);
    const Matrix& m = mom.regressor_second_moment;
    EXPECT_LE(m_norm(next.stacked() - geo.optimum, m),
              rate * m_norm(st.stacked() - geo.optimum, m) + 1e-12);
  }
}

TEST(SolveSubproblemExact, ScalarStepZero) {
  const auto mom = propagate_moments(oracle::scalar_system(), FilterSequence{}, 0);
  const auto res = solve_subproblem_exact(mom, exact_cfg(1e-9));
  EXPECT_NEAR(res.stage.a_l(0, 0), 1.0 / 3.0, 1e-9);
  EXPECT_NEAR(res.stage.b_l(0, 0), 5.0 / 3.0, 1e-9);
  EXPECT_LE(*res.error, 1e-9);
  EXPECT_LT(res.iterations, 1000);
}

TEST(SolveSubproblemExact, ZeroOptimumTakesOneStep) {
  const Matrix one = Matrix::Ones(1, 1);
  const LtiSystem sys(Matrix::Zero(1, 1), one, one, one, Vector::Ones(1), one);
  const auto res = solve_subproblem_exact(propagate_moments(sys, FilterSequence{}, 0), exact_cfg(1e-9));
  EXPECT_EQ(res.iterations, 1);
  EXPECT_EQ(res.stage.stacked().norm(), 0.0);
}

TEST(SolveSubproblemExact, IterationsAffineInLogTolerance) {
  const auto mom = propagate_moments(oracle::scalar_system(), FilterSequence{}, 0);
  std::vector<double> x, y;
  for (double tol : {1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9}) {
    x.push_back(std::log(1.0 / tol));
    y.push_back(static_cast<double>(solve_subproblem_exact(mom, exact_cfg(tol)).iterations));
  }
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
    syy += y[i] * y[i];
  }
  const double cov = n * sxy - sx * sy;
  const double r2 = cov * cov / ((n * sxx - sx * sx) * (n * syy - sy * sy));
  EXPECT_GT(cov, 0.0);
  EXPECT_GT(r2, 0.99);
}

TEST(SolveSubproblemExact, SameLimitFromRandomStarts) {
  std::mt19937_64 g(42);
  for (const auto& sys : {oracle::scalar_system(), oracle::vector_system()}) {
    const auto trace = riccati_trace(sys, 1);
    FilterSequence prefix;
    prefix.stages.push_back({sys.a() - trace.gains[0] * sys.c(), trace.gains[0]});
    const auto mom = propagate_moments(sys, prefix, 1);
    const Matrix ref = solve_subproblem_exact(mom, exact_cfg(1e-10)).stage.stacked();
    for (int k = 0; k < 10; ++k) {
      const Matrix init = oracle::random_matrix(g, sys.n(), sys.n() + sys.m(), 5.0);
      const Matrix got = solve_subproblem_exact(mom, exact_cfg(1e-10), init).stage.stacked();
      EXPECT_LE(oracle::two_norm(got - ref), 1e-8);
    }
  }
}

TEST(SolveSubproblemExact, Errors) {
  const auto mom = propagate_moments(oracle::scalar_system(), FilterSequence{}, 0);
  auto cfg = exact_cfg(1e-12);
  cfg.max_iters = 3;
  EXPECT_THROW(solve_subproblem_exact(mom, cfg), ConvergenceError);
  cfg.max_iters = 0;
  EXPECT_THROW(solve_subproblem_exact(mom, cfg), PreconditionError);
  EXPECT_THROW(solve_subproblem_exact(mom, zo_cfg(0.1, 0.1)), PreconditionError);
}

TEST(SolveSubproblemZo, ScalarBenchmarkHitsTolerance) {
  const auto sys = oracle::scalar_system();
  const auto geo = analyze_subproblem(propagate_moments(sys, FilterSequence{}, 0));
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto res = solve_subproblem_zo(sys, FilterSequence{}, zo_cfg(0.1, 0.05), rng);
    EXPECT_EQ(res.samples, 2 * res.iterations);
    if (res.converged && geo.distance(res.stage.stacked()) <= 0.05) ++ok;
  }
  EXPECT_GE(ok, 9);
}

TEST(SolveSubproblemZo, BatchedSampleAccounting) {
  auto cfg = zo_cfg(0.1, 0.05);
  cfg.batch = 3;
  cfg.benchmark = false;
  cfg.max_iters = 100;
  Rng rng(1);
  const auto res = solve_subproblem_zo(oracle::scalar_system(), FilterSequence{}, cfg, rng);
  EXPECT_EQ(res.iterations, 100);
  EXPECT_EQ(res.samples, 600);
}

TEST(SolveSubproblemZo, BatchingLowersTrajectoryVariance) {
  // Equal sample budgets: batch 1 takes 4x the iterations of batch 4.
  const auto sys = oracle::scalar_system();
  double var_sum[2] = {0.0, 0.0};
  for (long budget : {400L, 1000L, 2000L, 4000L, 8000L}) {
    for (int bi = 0; bi < 2; ++bi) {
      const int batch = bi ? 4 : 1;
      std::vector<double> errs;
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto cfg = zo_cfg(0.1, 0.05);
        cfg.benchmark = false;
        cfg.batch = batch;
        cfg.max_iters = budget / (2 * batch);
        Rng rng(seed);
        errs.push_back(*solve_subproblem_zo(sys, FilterSequence{}, cfg, rng).error);
      }
      double mean = 0.0, var = 0.0;
      for (double e : errs) mean += e / errs.size();
      for (double e : errs) var += (e - mean) * (e - mean) / (errs.size() - 1);
      var_sum[bi] += var;
    }
  }
  EXPECT_LT(var_sum[1], var_sum[0]);
}

TEST(SolveSubproblemZo, MeanErrorImprovesWhenIterationsDouble) {
  const auto sys = oracle::scalar_system();
  const int seeds = 20;
  const long budget = 20000;
  std::map<long, double> mean_err;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    auto cfg = zo_cfg(0.1, 0.05);
    cfg.benchmark = false;
    cfg.record_trace = true;
    cfg.max_iters = budget;
    Rng rng(100 + seed);
    for (const auto& pt : solve_subproblem_zo(sys, FilterSequence{}, cfg, rng).trace)
      mean_err[pt.iteration] += pt.subproblem_error / seeds;
  }
  // The first few iterates move away on average while r_i is large; the
  // comparison starts at i = 10.
  int checked = 0;
  for (const auto& [i, e] : mean_err) {
    if (i < 10) continue;
    const auto it = mean_err.lower_bound(2 * i);
    if (it == mean_err.end()) break;
    EXPECT_LT(it->second, e) << "i=" << i << " vs " << it->first;
    ++checked;
  }
  EXPECT_GT(checked, 20);
}

TEST(SolveSubproblemZo, Errors) {
  const auto sys = oracle::scalar_system();
  Rng rng(1);
  auto cfg = zo_cfg(0.1, 0.05);
  cfg.max_iters = 0;
  EXPECT_THROW(solve_subproblem_zo(sys, FilterSequence{}, cfg, rng), PreconditionError);
  EXPECT_THROW(solve_subproblem_zo(sys, FilterSequence{}, exact_cfg(0.1), rng), PreconditionError);
  cfg = zo_cfg(0.1, 0.05);
  cfg.divergence_bound = 1e-3;
  try {
    solve_subproblem_zo(sys, FilterSequence{}, cfg, rng);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.stage(), 0);
  }
}

TEST(RhpgKf, ExactModeRecoversOptimalScalarFilter) {
  const auto sys = oracle::scalar_system();
  const auto fare = solve_fare(sys);
  const double eps = 1e-6;
  const int n = horizon_bound(sys, fare, eps);
  auto cfg = exact_cfg(0.0);
  cfg.epsilon = eps;
  Rng rng(0);
  DriverOptions opts;
  opts.fare = fare;
  const auto out = rhpg_kf(sys, n, cfg, rng, opts);
  ASSERT_EQ(out.filter.size(), static_cast<std::size_t>(n));
  EXPECT_LE(*out.record.final_policy_error, eps);
  EXPECT_NEAR(out.filter.stages.back().a_l(0, 0), 0.38197, 1e-5);
  EXPECT_NEAR(out.filter.stages.back().b_l(0, 0), 1.61803, 1e-5);
  EXPECT_TRUE(out.record.stabilizing);
  EXPECT_EQ(out.record.total_samples, 0);
}

TEST(RhpgKf, ExactModeBellmanConsistency) {
  // Stage h equals (A − L_h C, L_h); at h = 0 of the vector system only the
  // identified part is compared (A_L acts on x̂₀ = x̄₀ alone).
  for (const auto& [sys, n] : {std::pair{oracle::scalar_system(), 5}, std::pair{oracle::vector_system(), 3}}) {
    const double tol = 1e-9;
    auto cfg = exact_cfg(tol);
    cfg.epsilon = tol * n;
    DriverOptions opts;
    opts.reference = riccati_trace(sys, n);
    Rng rng(0);
    const auto out = rhpg_kf(sys, n, cfg, rng, opts);
    for (int h = 0; h < n; ++h) {
      const auto& rec = out.record.per_stage[h];
      ASSERT_TRUE(rec.reference_gap.has_value());
      const Matrix& l = opts.reference->gains[h];
      const Matrix ref = FilterStage{sys.a() - l * sys.c(), l}.stacked();
      const auto geo = analyze_subproblem(propagate_moments(
          sys, FilterSequence{{out.filter.stages.begin(), out.filter.stages.begin() + h}}, h));
      const double scale = std::max(1.0, ref.norm());
      EXPECT_LE(geo.distance(out.filter.stages[h].stacked()), tol * scale * 10) << "h=" << h;
      EXPECT_LE(geo.distance(ref), 1e-6 * scale) << "h=" << h;
      if (geo.full_rank) EXPECT_LE(*rec.reference_gap, 1e-8 * scale) << "h=" << h;
    }
  }
}

TEST(RhpgKf, SingleStageHorizon) {
  const auto sys = oracle::scalar_system();
  auto cfg = exact_cfg(1e-9);
  Rng rng(0);
  const auto out = rhpg_kf(sys, 1, cfg, rng);
  ASSERT_EQ(out.filter.size(), 1u);
  EXPECT_NEAR(out.filter.stages[0].b_l(0, 0), 5.0 / 3.0, 1e-8);
  EXPECT_FALSE(out.record.final_policy_error.has_value());
  EXPECT_THROW(rhpg_kf(sys, 0, cfg, rng), PreconditionError);
}

TEST(RhpgKf, ToleranceSensitivityIsLinear) {
  // Fixed N: the error attributable to inner tolerance τ scales like τ.
  const auto sys = oracle::scalar_system();
  const auto fare = solve_fare(sys);
  const int n = 4;
  const auto trace = riccati_trace(sys, n);
  const Matrix& l = trace.gains[n - 1];
  const double truncation =
      evaluate_policy(FilterStage{sys.a() - l * sys.c(), l}, fare).error;
  const auto k = error_constants(sys, fare, trace);
  std::vector<double> taus, attributable;
  for (double tau : {1e-4, 1e-5, 1e-6, 1e-7, 1e-8}) {
    auto cfg = exact_cfg(tau);
    DriverOptions opts;
    opts.fare = fare;
    Rng rng(0);
    const auto out = rhpg_kf(sys, n, cfg, rng, opts);
    const double a = std::abs(*out.record.final_policy_error - truncation);
    EXPECT_LE(a, n * std::max(1.0, k.c2) * tau);
    taus.push_back(tau);
    attributable.push_back(std::max(a, 1e-300));
  }
  const double slope = oracle::loglog_slope(taus, attributable);
  EXPECT_GT(slope, 0.7);
  EXPECT_LT(slope, 1.3);
}

TEST(RhpgKf, ZerothOrderScalarRun) {
  const auto sys = oracle::scalar_system();
  const auto fare = solve_fare(sys);
  const double eps = 0.1;
  const int n = horizon_bound(sys, fare, eps / 2);
  DriverOptions opts;
  opts.fare = fare;
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto out = rhpg_kf(sys, n, zo_cfg(eps, 0.0), rng, opts);
    long sum = 0;
    for (const auto& st : out.record.per_stage) sum += st.samples;
    EXPECT_EQ(out.record.total_samples, sum);
    EXPECT_EQ(out.record.stabilizing, out.record.final_spectral_radius < 1.0);
    if (out.record.meets_target()) ++ok;
  }
  EXPECT_GE(ok, 9);
}

TEST(RhpgKf, DivergenceCarriesStage) {
  // The stage-0 optimum (1/3, 5/3) lies outside a 0.5 ball.
  auto cfg = zo_cfg(0.1, 0.0);
  cfg.divergence_bound = 0.5;
  Rng rng(0);
  try {
    rhpg_kf(oracle::scalar_system(), 3, cfg, rng);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.stage(), 0);
  }
}

TEST(EvaluatePolicy, Examples) {
  const auto fare = solve_fare(oracle::scalar_system());
  const auto best = evaluate_policy(FilterStage{fare.a_closed, fare.b_closed}, fare);
  EXPECT_EQ(best.error, 0.0);
  EXPECT_TRUE(best.stabilizing);
  EXPECT_TRUE(best.within_stability_margin);
  const auto zero = evaluate_policy(stage(0, 0), fare);
  const double a = 2.0 - (1.0 + std::sqrt(5.0)) / 2.0, b = (1.0 + std::sqrt(5.0)) / 2.0;
  EXPECT_NEAR(zero.error, std::sqrt(a * a + b * b), 1e-9);
  EXPECT_TRUE(zero.stabilizing);
  EXPECT_FALSE(zero.within_stability_margin);
  EXPECT_FALSE(evaluate_policy(stage(1.5, 0), fare).stabilizing);
}
