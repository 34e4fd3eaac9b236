#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "rhpgkf/sysmodel.hpp"

namespace rhpgkf {

using Rng = std::mt19937_64;

/// One filter step x̂_{t+1} = A_L x̂_t + B_L y_t. The stacked block
/// [A_L B_L] (n × (n+m)) is the optimization variable of each subproblem.
struct FilterStage {
  Matrix a_l;
  Matrix b_l;

  Matrix stacked() const {
    Matrix theta(a_l.rows(), a_l.cols() + b_l.cols());
    theta << a_l, b_l;
    return theta;
  }

  static FilterStage from_stacked(const Matrix& theta, Eigen::Index n) {
    if (theta.rows() != n || theta.cols() <= n)
      throw DimensionError("theta", "must be n x (n+m)");
    return {theta.leftCols(n), theta.rightCols(theta.cols() - n)};
  }

  static FilterStage zero(Eigen::Index n, Eigen::Index m) {
    return {Matrix::Zero(n, n), Matrix::Zero(n, m)};
  }
};

struct FilterSequence {
  std::vector<FilterStage> stages;

  std::size_t size() const noexcept { return stages.size(); }
};

/// Trajectory of the plant under a fixed filter prefix.
struct Trajectory {
  std::vector<Vector> states;     // x_0..x_H
  std::vector<Vector> outputs;    // y_0..y_{H-1}
  std::vector<Vector> estimates;  // x̂_0..x̂_H
};

/// Exact second moments of the joint process [x_h; x̂_h] and the quantities
/// that make the step-h subproblem an explicit quadratic in Θ = [A_L B_L]:
///   J_h(Θ) = offset + tr(Θ M Θᵀ) − 2 tr(Θ Ξᵀ).
struct MomentSet {
  int step = 0;
  Vector mean_joint;                // E[x_h; x̂_h]
  Matrix cov_joint;                 // Cov[x_h; x̂_h]
  Matrix regressor_second_moment;   // M = E[φ φᵀ], φ = [x̂_h; y_h]
  Matrix cross_moment;              // Ξ = E[x_{h+1} φᵀ]
  double next_state_energy = 0.0;   // E‖x_{h+1}‖²
  double prior_mse = 0.0;           // Σ_{t≤h} E‖x_t − x̂_t‖²
  double offset = 0.0;              // next_state_energy + prior_mse
};

struct GradientEstimate {
  Matrix g;
  long samples_used = 2;
  double j_plus = 0.0;
  double j_minus = 0.0;
};

struct OracleOptions {
  /// Evaluate the whole empirical MSE sum rather than the final-step term.
  /// The prior terms do not depend on Θ, so the estimate is identical.
  bool full_sum = false;
};

namespace detail {

inline void check_stage(const FilterStage& st, Eigen::Index n, Eigen::Index m, const char* field) {
  if (st.a_l.rows() != n || st.a_l.cols() != n || st.b_l.rows() != n || st.b_l.cols() != m)
    throw DimensionError(field, "stage shape does not match the system");
}

inline Matrix cholesky_factor(const Matrix& cov, const char* field) {
  Eigen::LLT<Matrix> llt(symmetrize(cov));
  if (llt.info() != Eigen::Success)
    throw PreconditionError(std::string(field) + " is not positive definite");
  return llt.matrixL();
}

}  // namespace detail

/// Monte Carlo simulator of the plant and filter. Holds the Cholesky factors of
/// the noise covariances and scratch buffers, so one instance per thread.
class Simulator {
 public:
  explicit Simulator(const LtiSystem& sys)
      : sys_(sys),
        x0_factor_(detail::cholesky_factor(sys.x0_cov(), "x0_cov")),
        w_factor_(detail::cholesky_factor(sys.w(), "w")),
        v_factor_(detail::cholesky_factor(sys.v(), "v")),
        x_(sys.n()), xhat_(sys.n()), y_(sys.m()), xn_(sys.n()), xhatn_(sys.n()),
        zn_(sys.n()), zm_(sys.m()), phi_(sys.n() + sys.m()), e_(sys.n()) {}

  const LtiSystem& system() const noexcept { return sys_; }

  Trajectory rollout(const FilterSequence& prefix, int horizon, Rng& rng) {
    if (horizon < 1) throw PreconditionError("rollout: horizon must be at least 1");
    if (prefix.size() < static_cast<std::size_t>(horizon))
      throw DimensionError("prefix", "has " + std::to_string(prefix.size()) +
                                         " stages but the horizon needs " +
                                         std::to_string(horizon));
    std::normal_distribution<double> normal;
    Trajectory tr;
    draw_initial(rng, normal);
    tr.states.push_back(x_);
    tr.estimates.push_back(xhat_);
    for (int t = 0; t < horizon; ++t) {
      const auto& st = prefix.stages[t];
      detail::check_stage(st, sys_.n(), sys_.m(), "prefix");
      advance(st, rng, normal);
      tr.outputs.push_back(y_);
      tr.states.push_back(x_);
      tr.estimates.push_back(xhat_);
    }
    return tr;
  }

  /// Two-point zeroth-order estimate of ∇J_h at Θ, h = prefix.size(), using
  /// one shared trajectory for Θ ± rU.
  GradientEstimate zo_oracle(const FilterSequence& prefix, const Matrix& theta, double r,
                             Rng& rng, const OracleOptions& opts = {}) {
    GradientEstimate est;
    est.g.resize(sys_.n(), sys_.n() + sys_.m());
    zo_oracle_into(prefix, prefix.size(), theta, r, rng, est, opts);
    return est;
  }

  /// Allocation-free variant; uses the first `h` stages of `prefix`.
  void zo_oracle_into(const FilterSequence& prefix, std::size_t h, const Matrix& theta, double r,
                      Rng& rng, GradientEstimate& out, const OracleOptions& opts = {}) {
    const auto n = sys_.n();
    const auto m = sys_.m();
    if (!(r > 0.0)) throw PreconditionError("zo_oracle: smoothing radius must be positive");
    if (theta.rows() != n || theta.cols() != n + m)
      throw DimensionError("theta", "must be n x (n+m)");
    if (prefix.size() < h) throw DimensionError("prefix", "shorter than the requested step");
    std::normal_distribution<double> normal;

    // Direction uniform on the unit Frobenius sphere.
    u_.resize(n, n + m);
    for (Eigen::Index j = 0; j < u_.cols(); ++j)
      for (Eigen::Index i = 0; i < n; ++i) u_(i, j) = normal(rng);
    u_ /= u_.norm();

    // Shared trajectory up to (x_h, x̂_h), then w_h, v_h. The prefix error
    // terms are the same for Θ ± rU, so J⁺ − J⁻ is taken termwise and they
    // drop out of it exactly.
    draw_initial(rng, normal);
    double prior = 0.0;
    for (std::size_t t = 0; t < h; ++t) {
      if (opts.full_sum) prior += (x_ - xhat_).squaredNorm();
      advance(prefix.stages[t], rng, normal);
    }
    if (opts.full_sum) prior += (x_ - xhat_).squaredNorm();
    for (Eigen::Index i = 0; i < n; ++i) zn_(i) = normal(rng);
    for (Eigen::Index i = 0; i < m; ++i) zm_(i) = normal(rng);
    y_.noalias() = sys_.c() * x_;
    y_.noalias() += v_factor_ * zm_;
    xn_.noalias() = sys_.a() * x_;
    xn_.noalias() += w_factor_ * zn_;
    phi_.head(n) = xhat_;
    phi_.tail(m) = y_;

    e_ = xn_;
    e_.noalias() -= theta * phi_;
    e_.noalias() -= r * (u_ * phi_);
    const double final_plus = e_.squaredNorm();
    e_ = xn_;
    e_.noalias() -= theta * phi_;
    e_.noalias() += r * (u_ * phi_);
    const double final_minus = e_.squaredNorm();

    out.j_plus = prior + final_plus;
    out.j_minus = prior + final_minus;
    const double diff = final_plus - final_minus;
    const double dim = static_cast<double>(n * (n + m));
    out.g.noalias() = (dim / (2.0 * r) * diff) * u_;
    out.samples_used = 2;
  }

 private:
  void draw_initial(Rng& rng, std::normal_distribution<double>& normal) {
    for (Eigen::Index i = 0; i < sys_.n(); ++i) zn_(i) = normal(rng);
    x_ = sys_.x0_mean();
    x_.noalias() += x0_factor_ * zn_;
    xhat_ = sys_.x0_mean();
  }

  void advance(const FilterStage& st, Rng& rng, std::normal_distribution<double>& normal) {
    for (Eigen::Index i = 0; i < sys_.n(); ++i) zn_(i) = normal(rng);
    for (Eigen::Index i = 0; i < sys_.m(); ++i) zm_(i) = normal(rng);
    y_.noalias() = sys_.c() * x_;
    y_.noalias() += v_factor_ * zm_;
    xn_.noalias() = sys_.a() * x_;
    xn_.noalias() += w_factor_ * zn_;
    xhatn_.noalias() = st.a_l * xhat_;
    xhatn_.noalias() += st.b_l * y_;
    x_.swap(xn_);
    xhat_.swap(xhatn_);
  }

  LtiSystem sys_;
  Matrix x0_factor_, w_factor_, v_factor_;
  Vector x_, xhat_, y_, xn_, xhatn_, zn_, zm_, phi_, e_;
  Matrix u_;
};

/// Draws one trajectory of `horizon` steps under `prefix`.
inline Trajectory rollout(const LtiSystem& sys, const FilterSequence& prefix, int horizon,
                          Rng& rng) {
  Simulator sim(sys);
  return sim.rollout(prefix, horizon, rng);
}

inline GradientEstimate zo_oracle(const LtiSystem& sys, const FilterSequence& prefix,
                                  const FilterStage& theta, double r, Rng& rng,
                                  const OracleOptions& opts = {}) {
  detail::check_stage(theta, sys.n(), sys.m(), "theta");
  Simulator sim(sys);
  return sim.zo_oracle(prefix, theta.stacked(), r, rng, opts);
}

/// Propagates mean and covariance of [x_t; x̂_t] through the first h stages of
/// `prefix` and assembles the subproblem moments at step h.
inline MomentSet propagate_moments(const LtiSystem& sys, const FilterSequence& prefix, int h) {
  if (h < 0) throw PreconditionError("propagate_moments: step must be nonnegative");
  if (prefix.size() < static_cast<std::size_t>(h))
    throw DimensionError("prefix", "has fewer stages than the requested step");
  const auto n = sys.n();
  const auto m = sys.m();
  const Matrix& a = sys.a();
  const Matrix& c = sys.c();

  Vector mean(2 * n);
  mean << sys.x0_mean(), sys.x0_mean();
  Matrix cov = Matrix::Zero(2 * n, 2 * n);
  cov.topLeftCorner(n, n) = sys.x0_cov();

  auto error_energy = [n](const Vector& mu, const Matrix& sigma) {
    const Vector dm = mu.head(n) - mu.tail(n);
    const Matrix dc = sigma.topLeftCorner(n, n) - sigma.topRightCorner(n, n) -
                      sigma.bottomLeftCorner(n, n) + sigma.bottomRightCorner(n, n);
    return dc.trace() + dm.squaredNorm();
  };

  double prior = error_energy(mean, cov);
  for (int t = 0; t < h; ++t) {
    const auto& st = prefix.stages[t];
    detail::check_stage(st, n, m, "prefix");
    Matrix f = Matrix::Zero(2 * n, 2 * n);
    f.topLeftCorner(n, n) = a;
    f.bottomLeftCorner(n, n) = st.b_l * c;
    f.bottomRightCorner(n, n) = st.a_l;
    Matrix q = Matrix::Zero(2 * n, 2 * n);
    q.topLeftCorner(n, n) = sys.w();
    q.bottomRightCorner(n, n) = st.b_l * sys.v() * st.b_l.transpose();
    mean = f * mean;
    cov = symmetrize(f * cov * f.transpose() + q);
    prior += error_energy(mean, cov);
  }

  const Matrix second = cov + mean * mean.transpose();
  const Matrix sxx = second.topLeftCorner(n, n);
  const Matrix sxh = second.topRightCorner(n, n);  // E[x x̂ᵀ]
  const Matrix shh = second.bottomRightCorner(n, n);

  MomentSet mom;
  mom.step = h;
  mom.mean_joint = mean;
  mom.cov_joint = cov;
  mom.regressor_second_moment.resize(n + m, n + m);
  mom.regressor_second_moment << shh, sxh.transpose() * c.transpose(), c * sxh,
      c * sxx * c.transpose() + sys.v();
  mom.regressor_second_moment = symmetrize(mom.regressor_second_moment);
  mom.cross_moment.resize(n, n + m);
  mom.cross_moment << a * sxh, a * sxx * c.transpose();
  mom.next_state_energy = (a * sxx * a.transpose() + sys.w()).trace();
  mom.prior_mse = prior;
  mom.offset = mom.next_state_energy + prior;
  return mom;
}

namespace detail {

inline void check_theta(const MomentSet& mom, const Matrix& theta) {
  if (theta.rows() != mom.cross_moment.rows() || theta.cols() != mom.cross_moment.cols())
    throw DimensionError("theta", "must be n x (n+m)");
}

}  // namespace detail

inline double subproblem_objective(const MomentSet& mom, const Matrix& theta) {
  detail::check_theta(mom, theta);
  return mom.offset + (theta * mom.regressor_second_moment * theta.transpose()).trace() -
         2.0 * (theta * mom.cross_moment.transpose()).trace();
}

inline double subproblem_objective(const MomentSet& mom, const FilterStage& theta) {
  return subproblem_objective(mom, theta.stacked());
}

/// ∇J_h(Θ) = 2(ΘM − Ξ).
inline Matrix exact_subproblem_gradient(const MomentSet& mom, const Matrix& theta) {
  detail::check_theta(mom, theta);
  return 2.0 * (theta * mom.regressor_second_moment - mom.cross_moment);
}

inline Matrix exact_subproblem_gradient(const MomentSet& mom, const FilterStage& theta) {
  return exact_subproblem_gradient(mom, theta.stacked());
}

/// Curvature and minimizer of the quadratic subproblem. When M is singular
/// the minimizers form an affine set; `optimum` is its min-norm element and
/// distances are measured to the set.
struct SubproblemGeometry {
  Matrix optimum;           // Ξ M⁺
  Matrix range_projector;   // orthogonal projector onto range(M)
  double strong_convexity;  // 2 λ_min over range(M)
  double smoothness;        // 2 λ_max(M)
  int rank;
  bool full_rank;

  /// Spectral-norm distance from Θ to the minimizer set.
  double distance(const Matrix& theta) const {
    if (full_rank) return spectral_norm(theta - optimum);
    return spectral_norm((theta - optimum) * range_projector);
  }
};

inline SubproblemGeometry analyze_subproblem(const MomentSet& mom) {
  const Matrix& mm = mom.regressor_second_moment;
  if (!mm.allFinite() || !mom.cross_moment.allFinite())
    throw NumericError("subproblem moments are not finite");
  Eigen::SelfAdjointEigenSolver<Matrix> es(mm);
  if (es.info() != Eigen::Success) throw NumericError("self-adjoint eigensolver did not converge");
  const Vector& lambda = es.eigenvalues();
  const Matrix& q = es.eigenvectors();
  const double top = lambda(lambda.size() - 1);
  if (!(top > 0.0)) throw NumericError("regressor second moment is zero");
  const double cut = kRankTol * top;

  SubproblemGeometry geo;
  geo.rank = 0;
  geo.strong_convexity = 0.0;
  Vector inv = Vector::Zero(lambda.size());
  Vector proj = Vector::Zero(lambda.size());
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (lambda(i) > cut) {
      if (geo.rank == 0) geo.strong_convexity = 2.0 * lambda(i);
      inv(i) = 1.0 / lambda(i);
      proj(i) = 1.0;
      ++geo.rank;
    }
  }
  geo.full_rank = geo.rank == lambda.size();
  geo.smoothness = 2.0 * top;
  geo.range_projector = q * proj.asDiagonal() * q.transpose();
  if (geo.full_rank) {
    Eigen::LDLT<Matrix> ldlt(mm);
    geo.optimum = ldlt.solve(mom.cross_moment.transpose()).transpose();
  } else {
    geo.optimum = mom.cross_moment * (q * inv.asDiagonal() * q.transpose());
  }
  return geo;
}

/// Minimizer Θ* of the step-h subproblem (min-norm when M is singular).
inline FilterStage subproblem_optimum(const MomentSet& mom) {
  const auto geo = analyze_subproblem(mom);
  return FilterStage::from_stacked(geo.optimum, mom.cross_moment.rows());
}

}  // namespace rhpgkf
