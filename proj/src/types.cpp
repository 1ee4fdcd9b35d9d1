#include "beliefroad/types.hpp"

#include <cmath>

namespace beliefroad {

TimeGrid::TimeGrid(double horizon, int steps) : horizon_(horizon), steps_(steps), dt_(0.0) {
  require(std::isfinite(horizon) && horizon > 0.0, "time grid horizon must be positive");
  require(steps >= 2, "time grid needs at least 2 steps");
  dt_ = horizon_ / steps_;
}

double TimeGrid::time(std::size_t i) const {
  if (i >= static_cast<std::size_t>(steps_)) return horizon_;
  return static_cast<double>(i) * dt_;
}

double min_eigenvalue(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

bool is_spd(const Matrix& m, double tol) {
  if (m.rows() != m.cols() || !all_finite(m)) return false;
  Eigen::LLT<Matrix> llt(symmetrized(m));
  if (llt.info() != Eigen::Success) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return min_eigenvalue(m) > tol * scale;
}

bool is_psd(const Matrix& m, double tol) {
  if (m.rows() != m.cols() || !all_finite(m)) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return min_eigenvalue(m) >= -tol * scale;
}

Matrix clamp_psd(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(m));
  Vector vals = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

double relative_frobenius(const Matrix& a, const Matrix& b) {
  const double denom = b.norm();
  return denom > 0.0 ? (a - b).norm() / denom : (a - b).norm();
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace beliefroad
