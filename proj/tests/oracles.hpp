#pragma once

// Test-only reference computations. Nothing here calls into the solver code
// paths these helpers are used to check.

#include <cmath>
#include <functional>
#include <limits>
#include <tuple>
#include <vector>
#include <random>

#include "beliefroad/types.hpp"

namespace beliefroad::testing {

/// Central finite-difference Jacobian of f at x with per-entry step.
inline Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x, double step) {
  const Vector f0 = f(x);
  Matrix jac(f0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vector xp = x;
    Vector xm = x;
    xp[j] += step;
    xm[j] -= step;
    jac.col(j) = (f(xp) - f(xm)) / (2.0 * step);
  }
  return jac;
}

inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double step) {
  Vector g(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vector xp = x;
    Vector xm = x;
    xp[j] += step;
    xm[j] -= step;
    g[j] = (f(xp) - f(xm)) / (2.0 * step);
  }
  return g;
}

inline Vector random_vector(std::mt19937_64& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

/// Random SPD matrix with eigenvalues in [lo, hi].
inline Matrix random_spd(std::mt19937_64& rng, int n, double lo, double hi) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = g(rng);
  Eigen::HouseholderQR<Matrix> qr(m);
  const Matrix q = qr.householderQ();
  std::uniform_real_distribution<double> u(lo, hi);
  Vector eig(n);
  for (int i = 0; i < n; ++i) eig[i] = u(rng);
  return q * eig.asDiagonal() * q.transpose();
}

/// Exact chi-square quantiles, dof 2..6 at p = 0.90, 0.95, 0.99 (standard table).
inline double chi_square_table(int dof, double p) {
  static const double table[5][3] = {
      {4.605170, 5.991465, 9.210340},   {6.251389, 7.814728, 11.344867}, {7.779440, 9.487729, 13.276704},
      {9.236357, 11.070498, 15.086272}, {10.644641, 12.591587, 16.811894},
  };
  const int col = p < 0.925 ? 0 : (p < 0.97 ? 1 : 2);
  return table[dof - 2][col];
}

/// Discrete-time Kalman covariance recursion for dx = F x dt + B sqrt(eps) dW,
/// z_k = H x_k + v_k with Cov(v_k) = R / dt. Predict with I + F dt, then
/// update. Converges to the continuous Riccati solution at O(dt).
inline Matrix discrete_kalman(const Matrix& f, const Matrix& b, double eps, const Matrix& h, const Matrix& r,
                              const Matrix& p0, double horizon, int steps) {
  const double dt = horizon / steps;
  const Matrix phi = Matrix::Identity(f.rows(), f.cols()) + dt * f;
  const Matrix qd = eps * dt * b * b.transpose();
  Matrix p = p0;
  for (int k = 0; k < steps; ++k) {
    const Matrix prior = phi * p * phi.transpose() + qd;
    const Matrix s = h * prior * h.transpose() + r / dt;
    const Matrix gain = prior * h.transpose() * s.inverse();
    p = prior - gain * h * prior;
    p = 0.5 * (p + p.transpose());
  }
  return p;
}

/// Cheapest simple path by depth-first enumeration of every simple path.
/// Costs are summed from the start outward. Returns +inf when unreachable.
inline double exhaustive_best_path(int nodes, const std::vector<std::tuple<int, int, double>>& edges, int start,
                                   int goal) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<bool> visited(nodes, false);
  std::function<void(int, double)> walk = [&](int node, double cost) {
    if (node == goal) {
      best = std::min(best, cost);
      return;
    }
    visited[node] = true;
    for (const auto& [src, dst, c] : edges) {
      if (src == node && !visited[dst]) walk(dst, cost + c);
    }
    visited[node] = false;
  };
  walk(start, 0.0);
  return best;
}

}  // namespace beliefroad::testing
