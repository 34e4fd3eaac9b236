#pragma once

#include <stdexcept>
#include <string>

namespace rhpgkf {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

/// Matrices or sequences with inconsistent shapes.
class DimensionError : public Error {
 public:
  DimensionError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }
  const char* kind() const noexcept override { return "dimension"; }

 private:
  std::string field_;
};

/// An argument violates a documented precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "precondition"; }
};

/// A factorization or eigensolver failed, or produced non-finite output.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

/// An iterative method ran out of iterations.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double last_residual)
      : Error(what + " (last residual " + std::to_string(last_residual) + ")"),
        message_(what),
        last_residual_(last_residual) {}
  /// The message without the residual suffix.
  const std::string& message() const noexcept { return message_; }
  double last_residual() const noexcept { return last_residual_; }
  const char* kind() const noexcept override { return "convergence"; }

 private:
  std::string message_;
  double last_residual_;
};

/// The zeroth-order inner loop left the configured parameter bound.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int stage = -1)
      : Error(stage >= 0 ? "stage " + std::to_string(stage) + ": " + what : what),
        stage_(stage) {}
  int stage() const noexcept { return stage_; }
  const char* kind() const noexcept override { return "divergence"; }

 private:
  int stage_;
};

/// Config file could not be read or parsed.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

}  // namespace rhpgkf
