#pragma once

#include <vector>

#include "beliefroad/dynamics.hpp"
#include "beliefroad/linear_steering.hpp"
#include "beliefroad/sdf.hpp"

namespace beliefroad {

struct PgcsParams {
  TimeGrid grid{5.0, 50};
  double step_size = 1e-3;            // eta
  int max_iterations = 50;            // K_max
  double tolerance = 1e-4;            // max-knot nominal change, state units
  double residual_tolerance = 1e-3;   // terminal moment acceptance
  double divergence_bound = 1e6;      // |x| beyond this is an unstable iterate
  bool innovation_diffusion = false;  // steer the estimate with P H^T R^-1 H P instead of eps B B^T
  CollisionCostParams collision;
  ShootingOptions shooting;

  void validate() const;
};

/// Error covariance of the EKF along a nominal, on knots and on the half grid.
struct ErrorCovariance {
  std::vector<Matrix> knots;
  HalfGridSeries<Matrix> half;
};

/// Integrates P' = F P + P F^T + eps B B^T - P H^T R^-1 H P with F, H the
/// Jacobians along `nominal` (half-grid samples). Without an observation the
/// measurement term is dropped. Throws Error(kNumerical) if P loses PSD.
ErrorCovariance ekf_riccati(const ControlAffineModel& model, const TimeGrid& grid,
                            const HalfGridSeries<Vector>& nominal, const Matrix& p0);

struct QuadraticWeights {
  HalfGridSeries<Matrix> q_mat;
  HalfGridSeries<Vector> r_vec;
};

/// Drift of the previous iterate and the linearized prior on the half grid.
struct ProximalDrift {
  HalfGridSeries<Matrix> a_mat;    // A_k
  HalfGridSeries<Vector> a_vec;    // a_k
  HalfGridSeries<Matrix> lin_mat;  // Ahat_k
  HalfGridSeries<Vector> lin_vec;  // ahat_k
  HalfGridSeries<Matrix> b_mat;
};

/// Quadratic state cost of one proximal subproblem, collected as
/// 1/2 x^T Q x + x^T r on each half-grid sample:
///   w (hinge expansion around the nominal)  with  w = eta / (1 + eta),
///   eta / (1 + eta)^2 * 1/2 |B^+ ((A_k - Ahat) x + a_k - ahat)|^2.
/// The second term is the cross term of the path-measure mixture between the
/// previous iterate and the linearized prior; it vanishes when A_k, a_k equal
/// the linearization. The hinge part uses Gauss-Newton curvature.
QuadraticWeights build_quadratic_weights(const SdfMap& map, const CollisionCostParams& params,
                                         const HalfGridSeries<Vector>& nominal, const ProximalDrift& drift,
                                         double step_size);

/// x' = A x + a from m0 and S' = A S + S A^T + eps B B^T from S0. Throws
/// Error(kNumerical) when the mean leaves the divergence bound.
Moments propagate_nominal(const ControlAffineModel& model, const TimeGrid& grid, const HalfGridSeries<Matrix>& a_mat,
                          const HalfGridSeries<Vector>& a_vec, const Vector& m0, const Matrix& s0,
                          double divergence_bound = 1e6);

/// Knot trajectory extended to the half grid with cubic Hermite midpoints,
/// using x' = A x + a at the knots.
HalfGridSeries<Vector> nominal_half_grid(const TimeGrid& grid, const HalfGridSeries<Matrix>& a_mat,
                                         const HalfGridSeries<Vector>& a_vec, const std::vector<Vector>& knots);

/// Per-knot output of an edge connection. covariance == estimate_covariance
/// + error_covariance at every knot.
struct TrajectoryDistribution {
  TimeGrid grid{1.0, 2};
  std::vector<Vector> mean;
  std::vector<Matrix> covariance;
  std::vector<Matrix> error_covariance;
  std::vector<Matrix> estimate_covariance;
  std::vector<Matrix> gain;
  std::vector<Vector> feedforward;
  std::vector<Matrix> closed_loop_a;
  std::vector<Vector> closed_loop_a_vec;
  std::vector<Vector> nominal_input;
};

struct PgcsIterate {
  int iteration = 0;
  double hinge_integral = 0.0;       // int hinge^2 dt along the iterate's nominal
  double nominal_change = 0.0;       // max-knot |x_{k+1} - x_k|_inf
  double mean_residual = 0.0;        // |x(T) - mT|
  double covariance_residual = 0.0;  // |S(T) - ST|_F / |ST|_F
};

struct EdgeConnectionResult {
  TrajectoryDistribution trajectory;
  FeedbackPolicy policy;  // total input on the state estimate, model drift linearized along the mean
  bool converged = false;
  int iterations = 0;
  std::vector<PgcsIterate> diagnostics;
  double terminal_mean_error = 0.0;
  double terminal_covariance_error = 0.0;
};

/// Proximal-gradient covariance steering between two beliefs. The start
/// error covariance p0 must satisfy start.covariance - p0 > 0. The first
/// nominal is the straight line between the means. Iteration stops once the
/// nominal changes by less than tolerance (never on the first solve, whose
/// input is the straight line) or after max_iterations solves.
/// Throws Error(kInfeasible) with "terminal covariance below estimation
/// error" when goal.covariance - P(T) is not positive definite.
EdgeConnectionResult pgcs_connect(const ControlAffineModel& model, const SdfMap& map, const PgcsParams& params,
                                  const GaussianBelief& start, const Matrix& p0, const GaussianBelief& goal);

/// Trapezoid integral of hinge^2 along the knots, without the obstacle weight.
double hinge_integral(const SdfMap& map, const CollisionCostParams& params, const TimeGrid& grid,
                      const std::vector<Vector>& mean);

}  // namespace beliefroad
