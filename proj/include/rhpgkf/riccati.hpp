#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "rhpgkf/sysmodel.hpp"

namespace rhpgkf {

/// Stabilizing solution of the filter algebraic Riccati equation and the
/// steady-state filter it induces.
struct FareSolution {
  Matrix sigma_star;  // Σ*
  Matrix gain_star;   // L* = AΣ*Cᵀ(V + CΣ*Cᵀ)⁻¹
  Matrix a_closed;    // A − L*C
  Matrix b_closed;    // L*
  double induced_norm_acl = 0.0;  // ‖A − L*C‖ in the Σ*-weighted norm
  int iterations = 0;
  double residual = 0.0;
};

/// Σ_0..Σ_N of the filter Riccati difference equation and gains L_0..L_{N-1}.
struct RiccatiTrace {
  std::vector<Matrix> sigmas;
  std::vector<Matrix> gains;
};

struct ErrorConstants {
  double phi = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  bool degenerate = false;  // some constant is not strictly positive
};

namespace detail {

inline void check_square(const LtiSystem& sys, const Matrix& sigma, const char* name) {
  if (sigma.rows() != sys.n() || sigma.cols() != sys.n())
    throw DimensionError(name, "must be " + std::to_string(sys.n()) + "x" +
                                   std::to_string(sys.n()));
}

/// Factorization of V + CΣCᵀ; throws when it is not numerically pd.
inline Eigen::LDLT<Matrix> innovation_factor(const LtiSystem& sys, const Matrix& sigma) {
  Matrix s = symmetrize(sys.v() + sys.c() * sigma * sys.c().transpose());
  Eigen::LDLT<Matrix> ldlt(s);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      (ldlt.vectorD().array() <= 0.0).any())
    throw NumericError("V + C Sigma C^T is singular");
  return ldlt;
}

/// Returns X with (V + CΣCᵀ) X = CΣAᵀ, i.e. Xᵀ = AΣCᵀ(V + CΣCᵀ)⁻¹.
inline Matrix gain_transpose(const LtiSystem& sys, const Matrix& sigma) {
  const auto ldlt = innovation_factor(sys, sigma);
  return ldlt.solve(sys.c() * sigma * sys.a().transpose());
}

}  // namespace detail

/// Time-varying Kalman gain AΣCᵀ(V + CΣCᵀ)⁻¹.
inline Matrix finite_gain(const LtiSystem& sys, const Matrix& sigma) {
  detail::check_square(sys, sigma, "sigma");
  return detail::gain_transpose(sys, sigma).transpose();
}

/// One step of the filter Riccati difference equation.
inline Matrix frde_step(const LtiSystem& sys, const Matrix& sigma) {
  detail::check_square(sys, sigma, "sigma");
  const Matrix& a = sys.a();
  const Matrix x = detail::gain_transpose(sys, sigma);
  return symmetrize(a * sigma * a.transpose() - a * sigma * sys.c().transpose() * x + sys.w());
}

/// Error-covariance propagation (A − LC)Σ(A − LC)ᵀ + LVLᵀ + W under an arbitrary gain.
inline Matrix lyapunov_step(const LtiSystem& sys, const Matrix& sigma, const Matrix& gain) {
  detail::check_square(sys, sigma, "sigma");
  if (gain.rows() != sys.n() || gain.cols() != sys.m())
    throw DimensionError("gain", "must be n x m");
  const Matrix acl = sys.a() - gain * sys.c();
  return symmetrize(acl * sigma * acl.transpose() + gain * sys.v() * gain.transpose() + sys.w());
}

/// The FRDE written as (A − LΣC)ΣAᵀ + W with L = finite_gain(Σ).
inline Matrix frde_step_closed_loop_form(const LtiSystem& sys, const Matrix& sigma) {
  const Matrix gain = finite_gain(sys, sigma);
  return symmetrize((sys.a() - gain * sys.c()) * sigma * sys.a().transpose() + sys.w());
}

/// Fixed-point FRDE iteration from X_0 until ‖Σ_{t+1} − Σ_t‖ ≤ tol·max(1, ‖Σ_t‖).
inline FareSolution solve_fare(const LtiSystem& sys, double tol = 1e-12, int max_iter = 100000) {
  if (!(tol > 0.0)) throw PreconditionError("solve_fare: tol must be positive");
  if (max_iter < 1) throw PreconditionError("solve_fare: max_iter must be at least 1");
  Matrix sigma = sys.x0_cov();
  double step = 0.0;
  int it = 0;
  for (; it < max_iter; ++it) {
    Matrix next = frde_step(sys, sigma);
    step = spectral_norm(next - sigma);
    sigma = std::move(next);
    if (!sigma.allFinite()) throw NumericError("solve_fare: FRDE iterate is not finite");
    if (step <= tol * std::max(1.0, spectral_norm(sigma))) {
      ++it;
      break;
    }
  }
  if (it >= max_iter && step > tol * std::max(1.0, spectral_norm(sigma)))
    throw ConvergenceError("solve_fare: iteration limit reached", step);

  FareSolution sol;
  sol.sigma_star = sigma;
  sol.gain_star = finite_gain(sys, sigma);
  sol.a_closed = sys.a() - sol.gain_star * sys.c();
  sol.b_closed = sol.gain_star;
  sol.induced_norm_acl = weighted_induced_norm(sol.a_closed, sigma);
  sol.iterations = it;
  sol.residual = spectral_norm(frde_step(sys, sigma) - sigma);
  return sol;
}

inline ValidationReport validate_system(const LtiSystem& sys, const FareSolution& fare) {
  return validate_system(sys, &fare.sigma_star);
}

inline RiccatiTrace riccati_trace(const LtiSystem& sys, int n_steps) {
  if (n_steps < 1) throw PreconditionError("riccati_trace: n_steps must be at least 1");
  RiccatiTrace trace;
  trace.sigmas.reserve(n_steps + 1);
  trace.gains.reserve(n_steps);
  trace.sigmas.push_back(sys.x0_cov());
  for (int t = 0; t < n_steps; ++t) {
    trace.gains.push_back(finite_gain(sys, trace.sigmas.back()));
    trace.sigmas.push_back(frde_step(sys, trace.sigmas.back()));
  }
  return trace;
}

/// Smallest integer horizon N ≥ 1 for which L_{N-1} is ε-close to L*:
/// ceil of ½·log(‖X₀−Σ*‖_* κ(Σ*) ‖A_L*‖ ‖C‖ / (ε λ_min(V))) / log(1/‖A_L*‖_*) + 1.
inline int horizon_bound(const LtiSystem& sys, const FareSolution& fare, double eps) {
  if (!(eps > 0.0)) throw PreconditionError("horizon_bound: eps must be positive");
  const double rho_star = fare.induced_norm_acl;
  if (!(rho_star < 1.0))
    throw PreconditionError("horizon_bound: weighted norm of A_L* is not below 1");
  const Matrix gap = sys.x0_cov() - fare.sigma_star;
  if (gap.norm() == 0.0) return 1;
  const double numerator = weighted_induced_norm(gap, fare.sigma_star) *
                           condition_number(fare.sigma_star) * spectral_norm(fare.a_closed) *
                           spectral_norm(sys.c());
  const double arg = numerator / (eps * min_eigenvalue(sys.v()));
  if (!(arg > 1.0)) return 1;
  if (rho_star == 0.0) return 1;
  const double n0 = 0.5 * std::log(arg) / std::log(1.0 / rho_star) + 1.0;
  return std::max(1, static_cast<int>(std::ceil(n0)));
}

/// Difference of two FRDE steps expressed as a Riccati map of Σ² − Σ¹ with
/// the closed loop and innovation covariance of the first sequence.
inline Matrix rde_difference_step(const LtiSystem& sys, const Matrix& sigma1,
                                  const Matrix& sigma2) {
  detail::check_square(sys, sigma1, "sigma1");
  detail::check_square(sys, sigma2, "sigma2");
  const Matrix& a = sys.a();
  const Matrix& c = sys.c();
  const Matrix diff = sigma2 - sigma1;
  const Matrix v_tilde = symmetrize(sys.v() + c * sigma1 * c.transpose());
  Eigen::LDLT<Matrix> v_ldlt(v_tilde);
  if (v_ldlt.info() != Eigen::Success || !v_ldlt.isPositive())
    throw NumericError("rde_difference_step: V + C Sigma1 C^T is singular");
  const Matrix a_bar = a - a * sigma1 * c.transpose() * v_ldlt.solve(c);
  const Matrix inner = symmetrize(v_tilde + c * diff * c.transpose());
  Eigen::LDLT<Matrix> inner_ldlt(inner);
  if (inner_ldlt.info() != Eigen::Success || !inner_ldlt.isPositive())
    throw NumericError("rde_difference_step: inner matrix is singular");
  const Matrix cross = c * diff * a_bar.transpose();
  return symmetrize(a_bar * diff * a_bar.transpose() - cross.transpose() * inner_ldlt.solve(cross));
}

/// (L*C − A)(Σ* − Σ_t)Cᵀ(V + CΣ_tCᵀ)⁻¹, which equals finite_gain(Σ_t) − L*.
inline Matrix gain_gap_identity(const LtiSystem& sys, const FareSolution& fare,
                                const Matrix& sigma_t) {
  detail::check_square(sys, sigma_t, "sigma_t");
  const auto ldlt = detail::innovation_factor(sys, sigma_t);
  const Matrix lhs = (fare.gain_star * sys.c() - sys.a()) * (fare.sigma_star - sigma_t) *
                     sys.c().transpose();
  return ldlt.solve(lhs.transpose()).transpose();
}

/// φ = max_t ‖A − L_t C‖ and the error-propagation constants C₁, C₂, C₃.
inline ErrorConstants error_constants(const LtiSystem& sys, const FareSolution& fare,
                                      const RiccatiTrace& trace) {
  if (trace.gains.empty()) throw PreconditionError("error_constants: empty trace");
  ErrorConstants k;
  for (const auto& gain : trace.gains)
    k.phi = std::max(k.phi, spectral_norm(sys.a() - gain * sys.c()));
  const double norm_c = spectral_norm(sys.c());
  const double norm_a = spectral_norm(sys.a());
  const double spread = spectral_norm(sys.x0_cov()) + spectral_norm(fare.sigma_star);
  k.c1 = k.phi * norm_c / min_eigenvalue(sys.v());
  k.c2 = 2.0 * norm_a * (k.phi + k.c1 * norm_c * spread);
  k.c3 = 2.0 * (spectral_norm(sys.v()) + norm_c * norm_c * spread);
  k.degenerate = !(k.phi > 0.0 && k.c1 > 0.0 && k.c2 > 0.0 && k.c3 > 0.0);
  return k;
}

}  // namespace rhpgkf
