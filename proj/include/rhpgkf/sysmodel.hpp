#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rhpgkf/errors.hpp"

namespace rhpgkf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Relative threshold for the positive-definiteness test: λ_min > kPdTol·max(1, ‖M‖).
inline constexpr double kPdTol = 1e-10;
/// Singular values below kRankTol·σ_max count as zero.
inline constexpr double kRankTol = 1e-9;

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  if (m.rows() == 1 || m.cols() == 1) return m.norm();
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

inline double min_eigenvalue(const Matrix& sym) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(sym), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("self-adjoint eigensolver did not converge");
  return es.eigenvalues()(0);
}

inline double max_eigenvalue(const Matrix& sym) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(sym), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("self-adjoint eigensolver did not converge");
  return es.eigenvalues()(es.eigenvalues().size() - 1);
}

inline bool is_positive_definite(const Matrix& sym) {
  return min_eigenvalue(sym) > kPdTol * std::max(1.0, spectral_norm(sym));
}

/// Discrete-time LTI plant x_{t+1} = A x_t + w_t, y_t = C x_t + v_t with
/// x_0 ~ N(x̄_0, X_0). Covariances are symmetrized on construction; shapes
/// are checked, definiteness is not (see validate_system).
class LtiSystem {
 public:
  LtiSystem(Matrix a, Matrix c, Matrix w, Matrix v, Vector x0_mean, Matrix x0_cov)
      : a_(std::move(a)), c_(std::move(c)), w_(std::move(w)), v_(std::move(v)),
        x0_mean_(std::move(x0_mean)), x0_cov_(std::move(x0_cov)) {
    const auto n = a_.rows();
    if (n == 0 || a_.cols() != n) throw DimensionError("a", "must be a nonempty square matrix");
    if (c_.cols() != n || c_.rows() == 0)
      throw DimensionError("c", "must have " + std::to_string(n) + " columns");
    const auto m = c_.rows();
    if (w_.rows() != n || w_.cols() != n)
      throw DimensionError("w", "must be " + std::to_string(n) + "x" + std::to_string(n));
    if (v_.rows() != m || v_.cols() != m)
      throw DimensionError("v", "must be " + std::to_string(m) + "x" + std::to_string(m));
    if (x0_mean_.size() != n)
      throw DimensionError("x0_mean", "must have length " + std::to_string(n));
    if (x0_cov_.rows() != n || x0_cov_.cols() != n)
      throw DimensionError("x0_cov", "must be " + std::to_string(n) + "x" + std::to_string(n));
    w_ = symmetrize(w_);
    v_ = symmetrize(v_);
    x0_cov_ = symmetrize(x0_cov_);
  }

  const Matrix& a() const noexcept { return a_; }
  const Matrix& c() const noexcept { return c_; }
  const Matrix& w() const noexcept { return w_; }
  const Matrix& v() const noexcept { return v_; }
  const Vector& x0_mean() const noexcept { return x0_mean_; }
  const Matrix& x0_cov() const noexcept { return x0_cov_; }
  Eigen::Index n() const noexcept { return a_.rows(); }
  Eigen::Index m() const noexcept { return c_.rows(); }

 private:
  Matrix a_, c_, w_, v_;
  Vector x0_mean_;
  Matrix x0_cov_;
};

struct PdCheck {
  std::string name;
  double min_eigenvalue = 0.0;
  bool passed = false;
};

struct ValidationReport {
  std::vector<PdCheck> pd_checks;
  int observability_rank = 0;
  int state_dim = 0;
  bool x0_mean_nonzero = false;
  std::optional<bool> x0_dominates_sigma;
  std::optional<double> x0_sigma_margin;
  std::vector<std::string> messages;

  bool passed() const {
    for (const auto& c : pd_checks)
      if (!c.passed) return false;
    if (observability_rank != state_dim) return false;
    if (!x0_mean_nonzero) return false;
    if (x0_dominates_sigma.has_value() && !*x0_dominates_sigma) return false;
    return true;
  }

  std::string summary() const {
    std::ostringstream os;
    for (const auto& msg : messages) os << msg << '\n';
    return os.str();
  }
};

/// Numerical rank of the stacked observability matrix [C; CA; ...; CA^{n-1}].
inline int observability_rank(const Matrix& a, const Matrix& c) {
  if (a.rows() != a.cols()) throw DimensionError("a", "must be square");
  if (c.cols() != a.rows()) throw DimensionError("c", "column count must match a");
  const auto n = a.rows();
  const auto m = c.rows();
  Matrix obs(n * m, n);
  Matrix block = c;
  for (Eigen::Index k = 0; k < n; ++k) {
    obs.middleRows(k * m, m) = block;
    block = block * a;
  }
  Eigen::JacobiSVD<Matrix> svd(obs);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > kRankTol * s(0)) ++rank;
  return rank;
}

inline double spectral_radius(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionError("matrix", "spectral radius needs a square matrix");
  if (m.size() == 0) return 0.0;
  if (m.size() == 1) return std::abs(m(0, 0));
  Eigen::EigenSolver<Matrix> es(m, false);
  if (es.info() != Eigen::Success) throw NumericError("eigensolver did not converge");
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Unique symmetric psd square root; eigenvalues in [-tol, 0) are clamped.
inline Matrix psd_sqrt(const Matrix& m, double tol = 1e-10) {
  if (m.rows() != m.cols()) throw DimensionError("matrix", "psd_sqrt needs a square matrix");
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m));
  if (es.info() != Eigen::Success) throw NumericError("self-adjoint eigensolver did not converge");
  Vector lambda = es.eigenvalues();
  const double scale = std::max(1.0, lambda.cwiseAbs().maxCoeff());
  if (lambda.size() > 0 && lambda(0) < -tol * scale)
    throw PreconditionError("psd_sqrt: matrix is not positive semidefinite (min eigenvalue " +
                            std::to_string(lambda(0)) + ")");
  lambda = lambda.cwiseMax(0.0).cwiseSqrt();
  return symmetrize(es.eigenvectors() * lambda.asDiagonal() * es.eigenvectors().transpose());
}

/// ‖X‖_W = max_{z≠0} sqrt(zᵀXᵀWXz / zᵀWz), evaluated as ‖W^{1/2} X W^{-1/2}‖₂.
inline double weighted_induced_norm(const Matrix& x, const Matrix& weight) {
  if (x.rows() != x.cols() || weight.rows() != x.rows() || weight.cols() != x.cols())
    throw DimensionError("weight", "must match the square matrix being measured");
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(weight));
  if (es.info() != Eigen::Success) throw NumericError("self-adjoint eigensolver did not converge");
  const Vector& lambda = es.eigenvalues();
  if (lambda(0) <= kPdTol * std::max(1.0, lambda.cwiseAbs().maxCoeff()))
    throw PreconditionError("weighted_induced_norm: weight is not positive definite");
  const Matrix& q = es.eigenvectors();
  const Matrix root = q * lambda.cwiseSqrt().asDiagonal() * q.transpose();
  const Matrix inv_root = q * lambda.cwiseSqrt().cwiseInverse().asDiagonal() * q.transpose();
  return spectral_norm(root * x * inv_root);
}

/// Spectral condition number of a symmetric pd matrix.
inline double condition_number(const Matrix& sym) {
  return max_eigenvalue(sym) / min_eigenvalue(sym);
}

namespace detail {

inline PdCheck pd_check(const std::string& name, const Matrix& m) {
  PdCheck check;
  check.name = name;
  check.min_eigenvalue = min_eigenvalue(m);
  check.passed = check.min_eigenvalue > kPdTol * std::max(1.0, spectral_norm(m));
  return check;
}

}  // namespace detail

/// Checks the standing assumptions: W, V, X_0 pd; (C, A) observable;
/// x̄_0 ≠ 0; and X_0 > Σ* when a FARE solution is supplied.
inline ValidationReport validate_system(const LtiSystem& sys,
                                        const Matrix* sigma_star = nullptr) {
  ValidationReport report;
  report.state_dim = static_cast<int>(sys.n());
  for (const auto& [name, mat] : {std::pair<const char*, const Matrix*>{"w", &sys.w()},
                                  {"v", &sys.v()},
                                  {"x0_cov", &sys.x0_cov()}}) {
    auto check = detail::pd_check(name, *mat);
    std::ostringstream os;
    os << name << (check.passed ? " pd: ok" : " pd: FAIL") << " (min eigenvalue "
       << check.min_eigenvalue << ")";
    report.messages.push_back(os.str());
    report.pd_checks.push_back(std::move(check));
  }

  report.observability_rank = observability_rank(sys.a(), sys.c());
  {
    std::ostringstream os;
    os << "observability rank " << report.observability_rank << " of " << sys.n()
       << (report.observability_rank == sys.n() ? ": ok" : ": FAIL");
    report.messages.push_back(os.str());
  }

  report.x0_mean_nonzero = sys.x0_mean().norm() > 0.0;
  report.messages.push_back(report.x0_mean_nonzero ? "x0_mean nonzero: ok"
                                                   : "x0_mean nonzero: FAIL");

  if (sigma_star != nullptr) {
    if (sigma_star->rows() != sys.n() || sigma_star->cols() != sys.n())
      throw DimensionError("sigma_star", "must match the state dimension");
    const double margin = min_eigenvalue(sys.x0_cov() - *sigma_star);
    report.x0_sigma_margin = margin;
    report.x0_dominates_sigma = margin > 0.0;
    std::ostringstream os;
    os << "x0_cov > sigma_star" << (margin > 0.0 ? ": ok" : ": FAIL") << " (margin " << margin
       << ")";
    report.messages.push_back(os.str());
  }
  return report;
}

}  // namespace rhpgkf
