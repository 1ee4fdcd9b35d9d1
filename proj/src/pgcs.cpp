#include "beliefroad/pgcs.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "ode.hpp"

namespace beliefroad {

using detail::hermite_mid;
using detail::rk4_step;
using detail::sample_index;

namespace {

double sample_time(const TimeGrid& grid, std::size_t s) {
  return s % 2 == 0 ? grid.time(s / 2) : grid.mid_time(s / 2);
}

void check_divergence(const std::vector<Vector>& mean, double bound) {
  for (const auto& x : mean) {
    if (!x.allFinite() || x.lpNorm<Eigen::Infinity>() > bound) {
      throw Error(Failure::kNumerical, "pgcs: unstable iterate, nominal exceeds the divergence bound");
    }
  }
}

// Positions linear in t; a trailing velocity block holds the constant
// finite-difference velocity.
HalfGridSeries<Vector> straight_line(const ControlAffineModel& model, const TimeGrid& grid, const Vector& m0,
                                     const Vector& mT) {
  const std::size_t count = half_grid_size(grid);
  const int d = model.position_dim();
  HalfGridSeries<Vector> line(count);
  for (std::size_t s = 0; s < count; ++s) {
    const double tau = sample_time(grid, s) / grid.horizon();
    Vector x = (1.0 - tau) * m0 + tau * mT;
    if (model.dynamics->has_velocity_block()) {
      x.tail(d) = (mT.head(d) - m0.head(d)) / grid.horizon();
    }
    line[s] = x;
  }
  return line;
}

double max_change(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, (a[i] - b[i]).lpNorm<Eigen::Infinity>());
  return worst;
}

// Total input u = K x + d against the model drift, linearized along the
// mean: B u = (A_cl - F) x + a_cl - f_lin. The subproblem policy is only the
// increment over the previous closed loop.
FeedbackPolicy total_policy(const ControlAffineModel& model, const TimeGrid& grid, const SteeringResult& steer,
                            const HalfGridSeries<Matrix>& a_mat, const HalfGridSeries<Vector>& a_vec,
                            const HalfGridSeries<Matrix>& b_mat, const HalfGridSeries<Vector>& nominal) {
  FeedbackPolicy policy = steer.policy;
  policy.mean = steer.moments.mean;
  for (std::size_t s = 0; s < nominal.size(); ++s) {
    const Linearization lin = linearize(model, nominal[s], sample_time(grid, s));
    const Eigen::LLT<Matrix> btb(b_mat[s].transpose() * b_mat[s]);
    policy.gain[s] = btb.solve(b_mat[s].transpose() * (a_mat[s] - lin.a_mat));
    policy.feedforward[s] = btb.solve(b_mat[s].transpose() * (a_vec[s] - lin.a_vec));
  }
  for (std::size_t i = 0; i < grid.knots(); ++i) policy.nominal_input[i] = policy.input(i, policy.mean[i]);
  return policy;
}

}  // namespace

void PgcsParams::validate() const {
  require(step_size > 0.0, "pgcs: step size must be positive");
  require(max_iterations >= 1, "pgcs: max_iterations must be at least 1");
  require(tolerance > 0.0, "pgcs: tolerance must be positive");
  require(residual_tolerance > 0.0, "pgcs: residual tolerance must be positive");
  require(divergence_bound > 0.0, "pgcs: divergence bound must be positive");
  collision.validate();
}

ErrorCovariance ekf_riccati(const ControlAffineModel& model, const TimeGrid& grid,
                            const HalfGridSeries<Vector>& nominal, const Matrix& p0) {
  const int n = model.state_dim();
  const std::size_t count = half_grid_size(grid);
  require(nominal.size() == count, "ekf_riccati: nominal must be sampled on the half grid");
  require(p0.rows() == n && p0.cols() == n, "ekf_riccati: P0 dimension mismatch");
  require(is_psd(p0), "ekf_riccati: P0 must be positive semidefinite");

  HalfGridSeries<Matrix> f(count), g(count), m(count);
  Eigen::LLT<Matrix> r_llt;
  if (model.has_measurements()) {
    r_llt.compute(model.measurement_noise);
    if (r_llt.info() != Eigen::Success) throw Error(Failure::kInvalidInput, "ekf_riccati: R is singular");
  }
  for (std::size_t s = 0; s < count; ++s) {
    const double t = sample_time(grid, s);
    f[s] = model.dynamics->drift_jacobian(t, nominal[s]);
    const Matrix b = model.dynamics->input_matrix(t);
    g[s] = model.noise_intensity * b * b.transpose();
    if (model.has_measurements()) {
      const Matrix h = measurement_jacobian(model, nominal[s]);
      m[s] = h.transpose() * r_llt.solve(h);
    } else {
      m[s] = Matrix::Zero(n, n);
    }
  }
  // Coefficients at fraction tau of interval i, quadratic through the three
  // half-grid samples; tau in {0, 1/2, 1} reproduces the samples exactly.
  auto rhs_frac = [&](std::size_t i, double tau, const Matrix& p) {
    const std::size_t s = 2 * i;
    const double l0 = 2.0 * (tau - 0.5) * (tau - 1.0);
    const double l1 = -4.0 * tau * (tau - 1.0);
    const double l2 = 2.0 * tau * (tau - 0.5);
    const Matrix fi = l0 * f[s] + l1 * f[s + 1] + l2 * f[s + 2];
    const Matrix gi = l0 * g[s] + l1 * g[s + 1] + l2 * g[s + 2];
    const Matrix mi = l0 * m[s] + l1 * m[s + 1] + l2 * m[s + 2];
    const Matrix fp = fi * p;
    return Matrix(fp + fp.transpose() + gi - p * mi * p);
  };
  auto lost_psd = [](const Matrix& p) {
    return !all_finite(p) || min_eigenvalue(p) < -1e-10 * std::max(1.0, p.norm());
  };

  ErrorCovariance out;
  out.knots.reserve(grid.knots());
  out.half.resize(count);
  Matrix p = symmetrized(p0);
  out.knots.push_back(p);
  const double h = grid.dt();
  for (std::size_t i = 0; i < static_cast<std::size_t>(grid.steps()); ++i) {
    // Substeps keep h * (2|F| + 2|P||M|) / substeps inside the RK4 stability region.
    double rate = 0.0;
    for (std::size_t s = 2 * i; s <= 2 * i + 2; ++s) {
      rate = std::max(rate, 2.0 * f[s].norm() + 2.0 * p.norm() * m[s].norm());
    }
    int substeps = 1;
    while (substeps < 4096 && h * rate / substeps > 1.5) substeps *= 2;

    Matrix next, mid;
    for (;; substeps *= 2) {
      if (substeps > 4096) {
        throw Error(Failure::kNumerical, "ekf_riccati: error covariance lost positive semidefiniteness");
      }
      const double hs = h / substeps;
      Matrix y = p;
      bool failed = false;
      for (int k = 0; k < substeps && !failed; ++k) {
        const double tau0 = static_cast<double>(k) / substeps;
        y = symmetrized(rk4_step(y, hs, [&](const Matrix& state, detail::Stage stage) {
          const double tau = tau0 + (stage == detail::Stage::kStart ? 0.0 : stage == detail::Stage::kMid ? 0.5 : 1.0) /
                                        substeps;
          return rhs_frac(i, tau, state);
        }));
        failed = lost_psd(y);
        if (2 * (k + 1) == substeps) mid = y;
      }
      if (!failed) {
        next = y;
        break;
      }
    }
    out.half[2 * i] = p;
    out.half[2 * i + 1] =
        substeps > 1 ? mid : symmetrized(hermite_mid(p, next, rhs_frac(i, 0.0, p), rhs_frac(i, 1.0, next), h));
    p = next;
    out.knots.push_back(p);
  }
  out.half[count - 1] = p;
  return out;
}

QuadraticWeights build_quadratic_weights(const SdfMap& map, const CollisionCostParams& params,
                                         const HalfGridSeries<Vector>& nominal, const ProximalDrift& drift,
                                         double step_size) {
  require(step_size > 0.0, "build_quadratic_weights: step size must be positive");
  const std::size_t count = nominal.size();
  require(drift.a_mat.size() == count && drift.a_vec.size() == count && drift.lin_mat.size() == count &&
              drift.lin_vec.size() == count && drift.b_mat.size() == count,
          "build_quadratic_weights: drift series size mismatch");
  const double w = step_size / (1.0 + step_size);
  const double mix = step_size / ((1.0 + step_size) * (1.0 + step_size));
  QuadraticWeights out;
  out.q_mat.reserve(count);
  out.r_vec.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const HingeCost c = hinge_cost(map, params, nominal[s]);
    Matrix q = w * c.gn_hessian;
    Vector r = w * (c.gradient - c.gn_hessian * nominal[s]);
    const Matrix& b = drift.b_mat[s];
    const Eigen::LLT<Matrix> btb(b.transpose() * b);
    const Matrix m = btb.solve(b.transpose() * (drift.a_mat[s] - drift.lin_mat[s]));
    const Vector v = btb.solve(b.transpose() * (drift.a_vec[s] - drift.lin_vec[s]));
    q += mix * m.transpose() * m;
    r += mix * m.transpose() * v;
    out.q_mat.push_back(symmetrized(q));
    out.r_vec.push_back(r);
  }
  return out;
}

Moments propagate_nominal(const ControlAffineModel& model, const TimeGrid& grid, const HalfGridSeries<Matrix>& a_mat,
                          const HalfGridSeries<Vector>& a_vec, const Vector& m0, const Matrix& s0,
                          double divergence_bound) {
  const std::size_t count = half_grid_size(grid);
  require(a_mat.size() == count && a_vec.size() == count, "propagate_nominal: drift must be on the half grid");
  HalfGridSeries<Matrix> diffusion(count);
  for (std::size_t s = 0; s < count; ++s) {
    const Matrix b = model.dynamics->input_matrix(sample_time(grid, s));
    diffusion[s] = model.noise_intensity * b * b.transpose();
  }
  Moments moments = propagate_linear(grid, a_mat, a_vec, diffusion, m0, s0);
  check_divergence(moments.mean, divergence_bound);
  return moments;
}

HalfGridSeries<Vector> nominal_half_grid(const TimeGrid& grid, const HalfGridSeries<Matrix>& a_mat,
                                         const HalfGridSeries<Vector>& a_vec, const std::vector<Vector>& knots) {
  require(knots.size() == grid.knots(), "nominal_half_grid: knot count mismatch");
  HalfGridSeries<Vector> half(half_grid_size(grid));
  for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
    const Vector d0 = a_mat[2 * i] * knots[i] + a_vec[2 * i];
    const Vector d1 = a_mat[2 * i + 2] * knots[i + 1] + a_vec[2 * i + 2];
    half[2 * i] = knots[i];
    half[2 * i + 1] = hermite_mid(knots[i], knots[i + 1], d0, d1, grid.dt());
  }
  half.back() = knots.back();
  return half;
}

double hinge_integral(const SdfMap& map, const CollisionCostParams& params, const TimeGrid& grid,
                      const std::vector<Vector>& mean) {
  double total = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double hinge = hinge_cost(map, params, mean[i]).hinge;
    const double weight = (i == 0 || i + 1 == mean.size()) ? 0.5 : 1.0;
    total += weight * hinge * hinge;
  }
  return total * grid.dt();
}

EdgeConnectionResult pgcs_connect(const ControlAffineModel& model, const SdfMap& map, const PgcsParams& params,
                                  const GaussianBelief& start, const Matrix& p0, const GaussianBelief& goal) {
  model.validate();
  params.validate();
  const int n = model.state_dim();
  require(start.mean.size() == n && goal.mean.size() == n, "pgcs: belief dimension mismatch");
  require(start.covariance.rows() == n && goal.covariance.rows() == n, "pgcs: covariance dimension mismatch");
  require(is_spd(goal.covariance), "pgcs: goal covariance must be positive definite");
  const Matrix estimate0 = symmetrized(start.covariance - p0);
  if (!is_spd(estimate0, 1e-10)) {
    throw Error(Failure::kInfeasible, "initial covariance below estimation error");
  }

  const TimeGrid& grid = params.grid;
  const std::size_t count = half_grid_size(grid);
  const std::size_t knots = grid.knots();
  const double eta = params.step_size;

  HalfGridSeries<Matrix> b_mat(count);
  for (std::size_t s = 0; s < count; ++s) b_mat[s] = model.dynamics->input_matrix(sample_time(grid, s));

  HalfGridSeries<Vector> nominal = straight_line(model, grid, start.mean, goal.mean);
  std::vector<Vector> nominal_knots(knots);
  for (std::size_t i = 0; i < knots; ++i) nominal_knots[i] = nominal[2 * i];
  HalfGridSeries<Matrix> a_mat(count);
  HalfGridSeries<Vector> a_vec(count);
  for (std::size_t s = 0; s < count; ++s) {
    const Linearization lin = linearize(model, nominal[s], sample_time(grid, s));
    a_mat[s] = lin.a_mat;
    a_vec[s] = lin.a_vec;
  }
  ErrorCovariance error = ekf_riccati(model, grid, nominal, p0);

  std::optional<Matrix> warm;
  std::optional<EdgeConnectionResult> previous;
  std::vector<PgcsIterate> diagnostics;

  for (int k = 0; k < params.max_iterations; ++k) {
    const Matrix estimate_t = symmetrized(goal.covariance - error.knots.back());
    if (!is_spd(estimate_t, 1e-10)) {
      throw Error(Failure::kInfeasible, "terminal covariance below estimation error");
    }

    LqDrivingTerms terms;
    terms.grid = grid;
    terms.b_mat = b_mat;
    terms.noise_intensity = model.noise_intensity;
    ProximalDrift drift{a_mat, a_vec, HalfGridSeries<Matrix>(count), HalfGridSeries<Vector>(count), b_mat};
    terms.a_mat.resize(count);
    terms.a_vec.resize(count);
    for (std::size_t s = 0; s < count; ++s) {
      const Linearization lin = linearize(model, nominal[s], sample_time(grid, s));
      drift.lin_mat[s] = lin.a_mat;
      drift.lin_vec[s] = lin.a_vec;
      terms.a_mat[s] = (a_mat[s] + eta * lin.a_mat) / (1.0 + eta);
      terms.a_vec[s] = (a_vec[s] + eta * lin.a_vec) / (1.0 + eta);
    }
    const QuadraticWeights weights = build_quadratic_weights(map, params.collision, nominal, drift, eta);
    terms.q_mat = weights.q_mat;
    terms.r_vec = weights.r_vec;
    if (params.innovation_diffusion && model.has_measurements()) {
      terms.diffusion.resize(count);
      const Eigen::LLT<Matrix> r_llt(model.measurement_noise);
      for (std::size_t s = 0; s < count; ++s) {
        const Matrix ph = error.half[s] * measurement_jacobian(model, nominal[s]).transpose();
        terms.diffusion[s] = symmetrized(ph * r_llt.solve(ph.transpose()));
      }
    }

    const BoundaryMoments boundary{start.mean, estimate0, goal.mean, estimate_t};
    const SteeringResult steer = steer_linear(terms, boundary, params.shooting, warm);
    warm = steer.initial_riccati;

    for (std::size_t s = 0; s < count; ++s) {
      a_mat[s] = terms.a_mat[s] + b_mat[s] * steer.policy.gain[s];
      a_vec[s] = terms.a_vec[s] + b_mat[s] * steer.policy.feedforward[s];
    }
    check_divergence(steer.moments.mean, params.divergence_bound);
    const HalfGridSeries<Vector> next_nominal = nominal_half_grid(grid, a_mat, a_vec, steer.moments.mean);
    ErrorCovariance next_error = ekf_riccati(model, grid, next_nominal, p0);

    EdgeConnectionResult candidate;
    TrajectoryDistribution& traj = candidate.trajectory;
    traj.grid = grid;
    traj.mean = steer.moments.mean;
    traj.estimate_covariance = steer.moments.covariance;
    traj.error_covariance = next_error.knots;
    candidate.policy = total_policy(model, grid, steer, a_mat, a_vec, b_mat, next_nominal);
    traj.nominal_input = candidate.policy.nominal_input;
    for (std::size_t i = 0; i < knots; ++i) {
      if (!is_spd(traj.estimate_covariance[i], 1e-10)) {
        throw Error(Failure::kInfeasible, "estimated-state covariance lost positive definiteness along the edge");
      }
      traj.covariance.push_back(traj.estimate_covariance[i] + traj.error_covariance[i]);
      traj.gain.push_back(candidate.policy.gain[2 * i]);
      traj.feedforward.push_back(candidate.policy.feedforward[2 * i]);
      traj.closed_loop_a.push_back(a_mat[2 * i]);
      traj.closed_loop_a_vec.push_back(a_vec[2 * i]);
    }
    candidate.iterations = k + 1;
    candidate.terminal_mean_error = (traj.mean.back() - goal.mean).norm();
    candidate.terminal_covariance_error = relative_frobenius(traj.covariance.back(), goal.covariance);

    PgcsIterate record;
    record.iteration = k;
    record.hinge_integral = hinge_integral(map, params.collision, grid, nominal_knots);
    record.nominal_change = max_change(steer.moments.mean, nominal_knots);
    record.mean_residual = candidate.terminal_mean_error;
    record.covariance_residual = candidate.terminal_covariance_error;
    diagnostics.push_back(record);

    if (k > 0 && record.nominal_change < params.tolerance) {
      candidate.converged = true;
      candidate.diagnostics = std::move(diagnostics);
      return candidate;
    }

    nominal = next_nominal;
    nominal_knots = steer.moments.mean;
    error = std::move(next_error);
    previous = std::move(candidate);
  }

  PgcsIterate last;
  last.iteration = params.max_iterations;
  last.hinge_integral = hinge_integral(map, params.collision, grid, nominal_knots);
  last.nominal_change = diagnostics.back().nominal_change;
  last.mean_residual = previous->terminal_mean_error;
  last.covariance_residual = previous->terminal_covariance_error;
  diagnostics.push_back(last);
  previous->diagnostics = std::move(diagnostics);
  return std::move(*previous);
}

}  // namespace beliefroad
