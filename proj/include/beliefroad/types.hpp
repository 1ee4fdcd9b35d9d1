#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace beliefroad {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Failure categories shared by the library and the CLI exit-code contract.
enum class Failure {
  kInvalidInput,  // malformed arguments, dimension mismatches
  kInfeasible,    // the requested steering/planning problem has no solution
  kNumerical,     // integration blew up or lost definiteness
};

class Error : public std::runtime_error {
 public:
  Error(Failure kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Failure kind() const { return kind_; }

 private:
  Failure kind_;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(Failure::kInvalidInput, what);
}

/// Uniform grid on [0, horizon] with `steps` intervals.
///
/// dt is computed once as horizon / steps. Knot times are i * dt for
/// i < steps, and the last knot is pinned to `horizon` so that the grid
/// always ends exactly at the horizon regardless of rounding in i * dt.
class TimeGrid {
 public:
  TimeGrid(double horizon, int steps);

  double horizon() const { return horizon_; }
  int steps() const { return steps_; }
  double dt() const { return dt_; }
  std::size_t knots() const { return static_cast<std::size_t>(steps_) + 1; }
  double time(std::size_t i) const;
  /// Midpoint of interval i, between knots i and i + 1.
  double mid_time(std::size_t i) const { return time(i) + 0.5 * dt_; }

  bool operator==(const TimeGrid& other) const {
    return horizon_ == other.horizon_ && steps_ == other.steps_;
  }

 private:
  double horizon_;
  int steps_;
  double dt_;
};

/// A matrix-valued signal sampled on the knots and interval midpoints of a
/// TimeGrid: sample 2i is knot i, sample 2i+1 is the midpoint of interval i.
/// RK4 steps consume samples (2i, 2i+1, 2i+1, 2i+2).
template <typename T>
using HalfGridSeries = std::vector<T>;

inline std::size_t half_grid_size(const TimeGrid& grid) { return 2 * grid.knots() - 1; }

struct GaussianBelief {
  Vector mean;
  Matrix covariance;
};

/// Symmetric part (M + M^T) / 2.
inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Smallest eigenvalue of the symmetric part of m.
double min_eigenvalue(const Matrix& m);

/// Cholesky-based positive-definiteness test with a relative tolerance on the
/// smallest eigenvalue.
bool is_spd(const Matrix& m, double tol = 1e-12);
bool is_psd(const Matrix& m, double tol = 1e-10);

/// Eigenvalues of the symmetric part below zero are clamped to zero.
Matrix clamp_psd(const Matrix& m);

/// Relative Frobenius distance ||a - b|| / ||b||.
double relative_frobenius(const Matrix& a, const Matrix& b);

bool all_finite(const Matrix& m);

}  // namespace beliefroad
