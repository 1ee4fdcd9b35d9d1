#pragma once

#include <optional>
#include <vector>

#include "beliefroad/types.hpp"

namespace beliefroad {

/// Time-varying data of a linear covariance steering problem
///
///   min E int_0^T 1/2 |u|^2 + 1/2 x^T Q x + x^T r dt
///   dX = (A X + a) dt + B (u dt + sqrt(eps) dW),  X_0 ~ N(m0, S0), X_T ~ N(mT, ST).
///
/// Every series is sampled on the half grid (knots and interval midpoints,
/// see HalfGridSeries), which is what the fixed-step RK4 integrators consume.
/// `diffusion`, when non-empty, replaces eps B B^T in the covariance dynamics.
struct LqDrivingTerms {
  TimeGrid grid{1.0, 2};
  HalfGridSeries<Matrix> a_mat;
  HalfGridSeries<Vector> a_vec;
  HalfGridSeries<Matrix> b_mat;
  HalfGridSeries<Matrix> q_mat;
  HalfGridSeries<Vector> r_vec;
  double noise_intensity = 0.0;
  HalfGridSeries<Matrix> diffusion;

  int state_dim() const { return static_cast<int>(a_mat.front().rows()); }
  int input_dim() const { return static_cast<int>(b_mat.front().cols()); }
  Matrix diffusion_at(std::size_t sample) const;

  /// Checks sizes and finiteness; symmetrizes Q and clamps its eigenvalues
  /// at zero. Returns the normalized copy.
  LqDrivingTerms normalized() const;

  /// Time-invariant data replicated on every half-grid sample.
  static LqDrivingTerms constant(const TimeGrid& grid, const Matrix& a_mat, const Vector& a_vec, const Matrix& b_mat,
                                 const Matrix& q_mat, const Vector& r_vec, double noise_intensity);
};

struct BoundaryMoments {
  Vector initial_mean;
  Matrix initial_covariance;
  Vector terminal_mean;
  Matrix terminal_covariance;
};

/// Deterministic two-point boundary solution on the knots, plus the same
/// quantities on the half grid for downstream RK4 consumers.
struct MeanSolution {
  std::vector<Vector> mean;         // x*(t_i)
  std::vector<Vector> feedforward;  // v*(t_i) = -B^T lambda(t_i)
  HalfGridSeries<Vector> mean_half;
  HalfGridSeries<Vector> costate_half;
};

/// Minimum-energy mean transfer via the Pontryagin system
///   x' = A x + a - B B^T lambda,  lambda' = -A^T lambda - Q x - r,
/// with lambda(0) from one n x n solve against the transition matrix.
/// Throws Error(kInfeasible) when the reachability block is singular.
MeanSolution solve_mean_bvp(const LqDrivingTerms& terms, const Vector& m0, const Vector& mT);

struct ShootingOptions {
  int max_iterations = 50;
  double tolerance = 1e-9;  // absolute Frobenius mismatch, scaled by max(1, |ST|)
  double fd_step = 1e-7;
};

struct RiccatiSolution {
  HalfGridSeries<Matrix> pi;           // Riccati matrix on the half grid
  std::vector<Matrix> covariance;      // closed-loop covariance on the knots
  double terminal_mismatch = 0.0;      // |S(T) - ST|_F
  int iterations = 0;
};

/// Finds Pi with  -Pi' = A^T Pi + Pi A - Pi B B^T Pi + Q  such that the
/// closed-loop covariance under u = -B^T Pi x, started at S0, reaches ST.
/// Solved by damped Newton shooting on the symmetric entries of Pi(0).
/// `warm_start` seeds Pi(0). Throws Error(kInfeasible) carrying the residual
/// when the iteration budget is exhausted.
RiccatiSolution solve_coupled_riccati(const LqDrivingTerms& terms, const Matrix& s0, const Matrix& sT,
                                      const ShootingOptions& options = {},
                                      const std::optional<Matrix>& warm_start = std::nullopt);

/// Integrates Pi and the closed-loop covariance forward from given Pi(0), S0.
/// Returns std::nullopt if Pi escapes or values become non-finite.
std::optional<RiccatiSolution> integrate_riccati_pair(const LqDrivingTerms& terms, const Matrix& pi0,
                                                      const Matrix& s0);

/// u = K(t) x + d(t), with K = -B^T Pi and d = v* + B^T Pi x*.
struct FeedbackPolicy {
  TimeGrid grid{1.0, 2};
  HalfGridSeries<Matrix> gain;
  HalfGridSeries<Vector> feedforward;
  HalfGridSeries<Matrix> riccati;
  std::vector<Vector> mean;           // x*(t_i) on knots
  std::vector<Vector> nominal_input;  // v*(t_i) = K x* + d on knots

  Vector input(std::size_t knot, const Vector& state) const {
    return gain[2 * knot] * state + feedforward[2 * knot];
  }
};

struct Moments {
  std::vector<Vector> mean;
  std::vector<Matrix> covariance;
};

/// RK4 propagation of x' = A x + c and S' = A S + S A^T + D on the half grid.
/// Covariances are symmetrized every step; losing definiteness beyond
/// tolerance throws Error(kNumerical).
Moments propagate_linear(const TimeGrid& grid, const HalfGridSeries<Matrix>& a_mat, const HalfGridSeries<Vector>& c_vec,
                         const HalfGridSeries<Matrix>& diffusion, const Vector& m0, const Matrix& s0);

Moments propagate_closed_loop(const LqDrivingTerms& terms, const FeedbackPolicy& policy, const Vector& m0,
                              const Matrix& s0);

struct SteeringResult {
  FeedbackPolicy policy;
  Moments moments;
  Matrix initial_riccati;
  int shooting_iterations = 0;
  double terminal_mean_error = 0.0;
  double terminal_covariance_error = 0.0;  // relative Frobenius
};

/// Full linear covariance steering: Riccati shooting, mean transfer, and a
/// final terminal-mean correction so that the exported policy, propagated by
/// propagate_closed_loop, reproduces the boundary moments.
SteeringResult steer_linear(const LqDrivingTerms& terms, const BoundaryMoments& boundary,
                            const ShootingOptions& options = {},
                            const std::optional<Matrix>& warm_start = std::nullopt);

}  // namespace beliefroad
