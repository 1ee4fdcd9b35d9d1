#include "beliefroad/linear_steering.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ode.hpp"

namespace beliefroad {

using detail::hermite_mid;
using detail::rk4_step;
using detail::sample_index;
using detail::Stage;

namespace {

// Riccati iterates beyond this norm are treated as a finite escape.
constexpr double kEscapeNorm = 1e12;

struct PreparedTerms {
  const LqDrivingTerms* terms;
  HalfGridSeries<Matrix> bbt;
  HalfGridSeries<Matrix> diffusion;
};

PreparedTerms prepare(const LqDrivingTerms& terms) {
  PreparedTerms prep{&terms, {}, {}};
  const std::size_t count = terms.a_mat.size();
  prep.bbt.reserve(count);
  prep.diffusion.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    prep.bbt.push_back(terms.b_mat[s] * terms.b_mat[s].transpose());
    prep.diffusion.push_back(terms.diffusion_at(s));
  }
  return prep;
}

Matrix riccati_rhs(const PreparedTerms& prep, std::size_t s, const Matrix& pi) {
  const Matrix& a = prep.terms->a_mat[s];
  const Matrix pa = pi * a;
  return -pa.transpose() - pa + pi * prep.bbt[s] * pi - prep.terms->q_mat[s];
}

int vech_size(int n) { return n * (n + 1) / 2; }

Matrix from_vech(const Vector& theta, int n) {
  Matrix m(n, n);
  int k = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j, ++k) {
      m(i, j) = theta[k];
      m(j, i) = theta[k];
    }
  }
  return m;
}

Vector to_vech(const Matrix& m) {
  const int n = static_cast<int>(m.rows());
  Vector theta(vech_size(n));
  int k = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j, ++k) theta[k] = 0.5 * (m(i, j) + m(j, i));
  }
  return theta;
}

// Residual whose Euclidean norm equals the Frobenius norm of the symmetric
// mismatch.
Vector mismatch_vector(const Matrix& diff) {
  const int n = static_cast<int>(diff.rows());
  Vector r(vech_size(n));
  int k = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j, ++k) r[k] = (i == j ? 1.0 : std::sqrt(2.0)) * 0.5 * (diff(i, j) + diff(j, i));
  }
  return r;
}

std::optional<RiccatiSolution> integrate_pair(const PreparedTerms& prep, const Matrix& pi0, const Matrix& s0,
                                              bool keep_series) {
  const LqDrivingTerms& terms = *prep.terms;
  const TimeGrid& grid = terms.grid;
  const double h = grid.dt();
  const std::size_t steps = static_cast<std::size_t>(grid.steps());

  RiccatiSolution sol;
  if (keep_series) {
    sol.pi.reserve(2 * steps + 1);
    sol.covariance.reserve(steps + 1);
    sol.pi.push_back(pi0);
    sol.covariance.push_back(s0);
  }
  Matrix pi = symmetrized(pi0);
  Matrix sigma = symmetrized(s0);
  Matrix dpi_start = riccati_rhs(prep, 0, pi);

  for (std::size_t i = 0; i < steps; ++i) {
    Matrix pi_next = rk4_step(pi, h, [&](const Matrix& p, Stage stage) {
      return riccati_rhs(prep, sample_index(i, stage), p);
    });
    pi_next = symmetrized(pi_next);
    if (!pi_next.allFinite() || pi_next.norm() > kEscapeNorm) return std::nullopt;
    const Matrix dpi_end = riccati_rhs(prep, 2 * i + 2, pi_next);
    const Matrix pi_mid = symmetrized(hermite_mid(pi, pi_next, dpi_start, dpi_end, h));

    const Matrix* pis[3] = {&pi, &pi_mid, &pi_next};
    sigma = rk4_step(sigma, h, [&](const Matrix& s, Stage stage) {
      const std::size_t idx = sample_index(i, stage);
      const Matrix& p = *pis[static_cast<int>(stage)];
      const Matrix acl = terms.a_mat[idx] - prep.bbt[idx] * p;
      const Matrix as = acl * s;
      return Matrix(as + as.transpose() + prep.diffusion[idx]);
    });
    sigma = symmetrized(sigma);
    if (!sigma.allFinite()) return std::nullopt;

    if (keep_series) {
      sol.pi.push_back(pi_mid);
      sol.pi.push_back(pi_next);
      sol.covariance.push_back(sigma);
    }
    pi = std::move(pi_next);
    dpi_start = dpi_end;
  }
  if (!keep_series) sol.covariance.push_back(sigma);
  return sol;
}

// Pi(0) of the problem without state cost, where the noise enters through B
// with intensity eps. With Psi = Phi(0, T) and M the controllability Gramian
// int Phi(0, t) B B^T Phi(0, t)^T dt, the terminal condition reduces to
// Y S0h Y + eps Y = STh in M^{-1/2}-whitened coordinates, whose SPD-shifted
// root gives the escape-free solution Pi(0) = M^{-1/2} (I - Y) M^{-1/2}.
std::optional<Matrix> closed_form_guess(const PreparedTerms& prep, const Matrix& s0, const Matrix& sT, double eps) {
  const LqDrivingTerms& terms = *prep.terms;
  const int n = terms.state_dim();
  const double h = terms.grid.dt();
  Matrix z(n, 2 * n);
  z.leftCols(n).setIdentity();
  z.rightCols(n).setZero();
  for (std::size_t i = 0; i < static_cast<std::size_t>(terms.grid.steps()); ++i) {
    z = rk4_step(z, h, [&](const Matrix& y, Stage stage) {
      const std::size_t idx = sample_index(i, stage);
      Matrix dz(n, 2 * n);
      dz.leftCols(n) = -y.leftCols(n) * terms.a_mat[idx];
      dz.rightCols(n) = y.leftCols(n) * prep.bbt[idx] * y.leftCols(n).transpose();
      return dz;
    });
  }
  if (!z.allFinite()) return std::nullopt;
  const Matrix psi = z.leftCols(n);
  const Matrix gram = symmetrized(z.rightCols(n));
  const Eigen::SelfAdjointEigenSolver<Matrix> gram_eig(gram);
  if (gram_eig.eigenvalues().minCoeff() <= 1e-12 * std::max(1.0, gram_eig.eigenvalues().maxCoeff()))
    return std::nullopt;
  const Matrix gram_isqrt = gram_eig.operatorInverseSqrt();
  const Matrix s0h = symmetrized(gram_isqrt * s0 * gram_isqrt);
  const Matrix sTh = symmetrized(gram_isqrt * psi * sT * psi.transpose() * gram_isqrt);
  const Eigen::SelfAdjointEigenSolver<Matrix> s0_eig(s0h);
  const Matrix r = s0_eig.operatorSqrt();
  const Matrix r_inv = s0_eig.operatorInverseSqrt();
  const Matrix inner = symmetrized(r * sTh * r) + 0.25 * eps * eps * Matrix::Identity(n, n);
  const Matrix v = Eigen::SelfAdjointEigenSolver<Matrix>(inner).operatorSqrt();
  const Matrix y = r_inv * v * r_inv - 0.5 * eps * r_inv * r_inv;
  const Matrix pi0 = symmetrized(gram_isqrt * (Matrix::Identity(n, n) - y) * gram_isqrt);
  if (!pi0.allFinite()) return std::nullopt;
  return pi0;
}

// Terminal mismatch vector for Pi(0) = from_vech(theta); nullopt on escape.
std::optional<Vector> shooting_residual(const PreparedTerms& prep, const Vector& theta, const Matrix& s0,
                                        const Matrix& sT) {
  const auto sol = integrate_pair(prep, from_vech(theta, static_cast<int>(s0.rows())), s0, false);
  if (!sol) return std::nullopt;
  return mismatch_vector(sol->covariance.back() - sT);
}

void check_terms(const LqDrivingTerms& terms) {
  const std::size_t count = half_grid_size(terms.grid);
  require(terms.a_mat.size() == count && terms.a_vec.size() == count && terms.b_mat.size() == count &&
              terms.q_mat.size() == count && terms.r_vec.size() == count,
          "lq terms: every series needs 2N+1 half-grid samples");
  require(terms.diffusion.empty() || terms.diffusion.size() == count, "lq terms: diffusion series has wrong length");
  const int n = static_cast<int>(terms.a_mat.front().rows());
  for (std::size_t s = 0; s < count; ++s) {
    require(terms.a_mat[s].rows() == n && terms.a_mat[s].cols() == n, "lq terms: A has wrong shape");
    require(terms.a_vec[s].size() == n, "lq terms: a has wrong shape");
    require(terms.b_mat[s].rows() == n, "lq terms: B has wrong shape");
    require(terms.q_mat[s].rows() == n && terms.q_mat[s].cols() == n, "lq terms: Q has wrong shape");
    require(terms.r_vec[s].size() == n, "lq terms: r has wrong shape");
    require(terms.a_mat[s].allFinite() && terms.a_vec[s].allFinite() && terms.b_mat[s].allFinite() &&
                terms.q_mat[s].allFinite() && terms.r_vec[s].allFinite(),
            "lq terms: non-finite entries");
  }
  require(std::isfinite(terms.noise_intensity) && terms.noise_intensity >= 0.0, "lq terms: eps must be >= 0");
}

}  // namespace

Matrix LqDrivingTerms::diffusion_at(std::size_t sample) const {
  if (!diffusion.empty()) return diffusion[sample];
  return noise_intensity * b_mat[sample] * b_mat[sample].transpose();
}

LqDrivingTerms LqDrivingTerms::normalized() const {
  check_terms(*this);
  LqDrivingTerms out = *this;
  for (auto& q : out.q_mat) {
    q = symmetrized(q);
    // Clamp only when needed; eigen-decomposition would perturb exact zeros.
    if (!q.isZero(0.0) && min_eigenvalue(q) < 0.0) q = clamp_psd(q);
  }
  return out;
}

LqDrivingTerms LqDrivingTerms::constant(const TimeGrid& grid, const Matrix& a_mat, const Vector& a_vec,
                                        const Matrix& b_mat, const Matrix& q_mat, const Vector& r_vec,
                                        double noise_intensity) {
  const std::size_t count = half_grid_size(grid);
  LqDrivingTerms terms;
  terms.grid = grid;
  terms.a_mat.assign(count, a_mat);
  terms.a_vec.assign(count, a_vec);
  terms.b_mat.assign(count, b_mat);
  terms.q_mat.assign(count, q_mat);
  terms.r_vec.assign(count, r_vec);
  terms.noise_intensity = noise_intensity;
  return terms;
}

MeanSolution solve_mean_bvp(const LqDrivingTerms& input, const Vector& m0, const Vector& mT) {
  const LqDrivingTerms terms = input.normalized();
  const int n = terms.state_dim();
  require(m0.size() == n && mT.size() == n, "solve_mean_bvp: boundary means have wrong dimension");
  const TimeGrid& grid = terms.grid;
  const double h = grid.dt();
  const std::size_t steps = static_cast<std::size_t>(grid.steps());

  // Column 0 carries the forced response from [m0; 0]; columns 1..n the
  // homogeneous responses to unit initial costates.
  auto rhs = [&](const Matrix& z, std::size_t s) {
    const Matrix& a = terms.a_mat[s];
    const Matrix& b = terms.b_mat[s];
    Matrix dz(2 * n, n + 1);
    dz.topRows(n) = a * z.topRows(n) - b * (b.transpose() * z.bottomRows(n));
    dz.bottomRows(n) = -terms.q_mat[s] * z.topRows(n) - a.transpose() * z.bottomRows(n);
    dz.col(0).head(n) += terms.a_vec[s];
    dz.col(0).tail(n) -= terms.r_vec[s];
    return dz;
  };

  Matrix z = Matrix::Zero(2 * n, n + 1);
  z.col(0).head(n) = m0;
  z.bottomRightCorner(n, n).setIdentity();
  std::vector<Matrix> knots;
  knots.reserve(steps + 1);
  knots.push_back(z);
  for (std::size_t i = 0; i < steps; ++i) {
    z = rk4_step(z, h, [&](const Matrix& y, Stage stage) { return rhs(y, sample_index(i, stage)); });
    knots.push_back(z);
  }
  if (!z.allFinite()) throw Error(Failure::kNumerical, "solve_mean_bvp: transition matrix is not finite");

  const Matrix reach = z.topRightCorner(n, n);
  Eigen::JacobiSVD<Matrix> svd(reach);
  const Vector sv = svd.singularValues();
  if (sv.size() == 0 || sv.minCoeff() <= 1e-12 * std::max(1.0, sv.maxCoeff())) {
    throw Error(Failure::kInfeasible,
                "solve_mean_bvp: reachability block is singular (uncontrollable over the horizon)");
  }
  Eigen::PartialPivLU<Matrix> lu(reach);
  Vector lambda0 = lu.solve(mT - z.col(0).head(n));
  // One refinement pass against the same factorization.
  lambda0 += lu.solve(mT - (z.col(0).head(n) + reach * lambda0));

  Vector coeff(n + 1);
  coeff[0] = 1.0;
  coeff.tail(n) = lambda0;

  MeanSolution sol;
  sol.mean.reserve(steps + 1);
  sol.feedforward.reserve(steps + 1);
  std::vector<Vector> path;
  std::vector<Vector> dpath;
  for (std::size_t i = 0; i <= steps; ++i) {
    path.push_back(knots[i] * coeff);
    dpath.push_back(rhs(knots[i], 2 * i) * coeff);
  }
  for (std::size_t i = 0; i <= steps; ++i) {
    const Vector x = path[i].head(n);
    const Vector lam = path[i].tail(n);
    sol.mean.push_back(x);
    sol.feedforward.push_back(-terms.b_mat[2 * i].transpose() * lam);
    sol.mean_half.push_back(x);
    sol.costate_half.push_back(lam);
    if (i < steps) {
      const Vector mid = hermite_mid(path[i], path[i + 1], dpath[i], dpath[i + 1], h);
      sol.mean_half.push_back(mid.head(n));
      sol.costate_half.push_back(mid.tail(n));
    }
  }
  return sol;
}

std::optional<RiccatiSolution> integrate_riccati_pair(const LqDrivingTerms& terms, const Matrix& pi0,
                                                      const Matrix& s0) {
  const LqDrivingTerms normalized = terms.normalized();
  const PreparedTerms prep = prepare(normalized);
  return integrate_pair(prep, pi0, s0, true);
}

RiccatiSolution solve_coupled_riccati(const LqDrivingTerms& input, const Matrix& s0, const Matrix& sT,
                                      const ShootingOptions& options, const std::optional<Matrix>& warm_start) {
  const LqDrivingTerms terms = input.normalized();
  const int n = terms.state_dim();
  require(s0.rows() == n && s0.cols() == n && sT.rows() == n && sT.cols() == n,
          "solve_coupled_riccati: boundary covariances have wrong shape");
  if (!is_spd(s0)) throw Error(Failure::kInvalidInput, "solve_coupled_riccati: initial covariance is not SPD");
  if (!is_spd(sT)) throw Error(Failure::kInvalidInput, "solve_coupled_riccati: terminal covariance is not SPD");
  const PreparedTerms prep = prepare(terms);
  const double tol = options.tolerance * std::max(1.0, sT.norm());

  std::vector<Matrix> guesses;
  if (warm_start) {
    require(warm_start->rows() == n && warm_start->cols() == n, "solve_coupled_riccati: warm start has wrong shape");
    guesses.push_back(symmetrized(*warm_start));
  }
  if (auto g = closed_form_guess(prep, s0, sT, terms.noise_intensity)) guesses.push_back(*g);
  guesses.push_back(0.5 * terms.noise_intensity * s0.llt().solve(Matrix::Identity(n, n)));

  // Starts Newton from a guess whose propagation stays finite.
  Vector theta;
  auto start_from = [&](const Matrix& guess) {
    theta = to_vech(guess);
    std::optional<Vector> resid = shooting_residual(prep, theta, s0, sT);
    for (int shrink = 0; !resid && shrink < 40; ++shrink) {
      theta *= 0.5;
      resid = shooting_residual(prep, theta, s0, sT);
    }
    if (!resid) {
      theta.setZero();
      resid = shooting_residual(prep, theta, s0, sT);
    }
    if (!resid) throw Error(Failure::kNumerical, "solve_coupled_riccati: zero-gain propagation is not finite");
  };

  const int dim = vech_size(n);
  int iterations = 0;

  // Damped Newton on theta toward `target`; returns the final mismatch norm.
  auto newton = [&](const Matrix& target, int budget) {
    std::optional<Vector> res = shooting_residual(prep, theta, s0, target);
    if (!res) return std::numeric_limits<double>::infinity();
    double norm = res->norm();
    Matrix jac(dim, dim);
    bool have_jacobian = false;
    bool jacobian_fresh = false;
    auto compute_jacobian = [&]() {
      for (int j = 0; j < dim; ++j) {
        const double step = options.fd_step * std::max(1.0, std::abs(theta[j]));
        Vector probe = theta;
        probe[j] += step;
        auto r = shooting_residual(prep, probe, s0, target);
        if (!r) {
          probe[j] = theta[j] - step;
          r = shooting_residual(prep, probe, s0, target);
          if (!r) return false;
          jac.col(j) = (*res - *r) / step;
        } else {
          jac.col(j) = (*r - *res) / step;
        }
      }
      have_jacobian = true;
      jacobian_fresh = true;
      return true;
    };
    for (int it = 0; norm > tol && it < budget; ++it) {
      ++iterations;
      if (!have_jacobian && !compute_jacobian()) break;
      const Vector delta = -jac.colPivHouseholderQr().solve(*res);
      bool accepted = false;
      for (double lambda = 1.0; lambda >= 1.0 / 1024.0; lambda *= 0.5) {
        const Vector trial = theta + lambda * delta;
        auto r = shooting_residual(prep, trial, s0, target);
        if (r && r->norm() < (1.0 - 1e-4 * lambda) * norm) {
          const double ratio = r->norm() / norm;
          theta = trial;
          res = std::move(r);
          norm = res->norm();
          accepted = true;
          // Keep reusing the Jacobian while it contracts fast enough.
          if (ratio > 0.5) have_jacobian = false;
          jacobian_fresh = false;
          break;
        }
      }
      if (!accepted) {
        if (jacobian_fresh) break;
        have_jacobian = false;
      }
    }
    return norm;
  };

  double norm = std::numeric_limits<double>::infinity();
  for (const Matrix& guess : guesses) {
    start_from(guess);
    norm = newton(sT, options.max_iterations);
    if (norm <= tol) break;
  }
  if (!(norm <= tol)) {
    // Continuation in the target from the covariance the last guess reaches.
    start_from(guesses.back());
    const Matrix reached = integrate_pair(prep, from_vech(theta, n), s0, false)->covariance.back();
    double done = 0.0;
    double step = 0.25;
    while (done < 1.0 && step >= 1.0 / 4096.0 && iterations < 20 * options.max_iterations) {
      const double next = std::min(1.0, done + step);
      const Vector saved = theta;
      const Matrix target = (1.0 - next) * reached + next * sT;
      if (newton(target, options.max_iterations) <= tol) {
        done = next;
        step = std::min(2.0 * step, 0.5);
      } else {
        theta = saved;
        step *= 0.5;
      }
    }
    norm = newton(sT, options.max_iterations);
  }

  if (!(norm <= tol)) {
    throw Error(Failure::kInfeasible, "solve_coupled_riccati: shooting did not converge (terminal mismatch " +
                                          std::to_string(norm) + " after " + std::to_string(iterations) +
                                          " iterations)");
  }
  auto sol = integrate_pair(prep, from_vech(theta, n), s0, true);
  if (!sol) throw Error(Failure::kNumerical, "solve_coupled_riccati: converged Riccati solution is not finite");
  sol->terminal_mismatch = norm;
  sol->iterations = iterations;
  return *sol;
}

namespace {

// RK4 for X' = A X + C with matrix-valued state; returns knot values.
std::vector<Matrix> propagate_affine(const TimeGrid& grid, const HalfGridSeries<Matrix>& a_mat,
                                     const HalfGridSeries<Matrix>& forcing, const Matrix& x0) {
  const double h = grid.dt();
  const std::size_t steps = static_cast<std::size_t>(grid.steps());
  std::vector<Matrix> out;
  out.reserve(steps + 1);
  Matrix x = x0;
  out.push_back(x);
  for (std::size_t i = 0; i < steps; ++i) {
    x = rk4_step(x, h, [&](const Matrix& y, Stage stage) {
      const std::size_t s = sample_index(i, stage);
      return Matrix(a_mat[s] * y + forcing[s]);
    });
    out.push_back(x);
  }
  return out;
}

}  // namespace

Moments propagate_linear(const TimeGrid& grid, const HalfGridSeries<Matrix>& a_mat, const HalfGridSeries<Vector>& c_vec,
                         const HalfGridSeries<Matrix>& diffusion, const Vector& m0, const Matrix& s0) {
  const std::size_t count = half_grid_size(grid);
  require(a_mat.size() == count && c_vec.size() == count && diffusion.size() == count,
          "propagate: series need 2N+1 half-grid samples");
  const int n = static_cast<int>(m0.size());
  require(s0.rows() == n && s0.cols() == n, "propagate: covariance has wrong shape");
  const double h = grid.dt();
  const std::size_t steps = static_cast<std::size_t>(grid.steps());

  Moments out;
  out.mean.reserve(steps + 1);
  out.covariance.reserve(steps + 1);
  Vector x = m0;
  Matrix s = symmetrized(s0);
  out.mean.push_back(x);
  out.covariance.push_back(s);
  for (std::size_t i = 0; i < steps; ++i) {
    x = rk4_step(x, h, [&](const Vector& y, Stage stage) {
      const std::size_t k = sample_index(i, stage);
      return Vector(a_mat[k] * y + c_vec[k]);
    });
    s = rk4_step(s, h, [&](const Matrix& y, Stage stage) {
      const std::size_t k = sample_index(i, stage);
      const Matrix as = a_mat[k] * y;
      return Matrix(as + as.transpose() + diffusion[k]);
    });
    s = symmetrized(s);
    if (!x.allFinite() || !s.allFinite()) {
      throw Error(Failure::kNumerical, "propagate: moments became non-finite at knot " + std::to_string(i + 1));
    }
    if (!is_psd(s, 1e-10)) {
      throw Error(Failure::kNumerical, "propagate: covariance lost positive definiteness at knot " +
                                           std::to_string(i + 1) + "; use a finer time grid");
    }
    out.mean.push_back(x);
    out.covariance.push_back(s);
  }
  return out;
}

Moments propagate_closed_loop(const LqDrivingTerms& terms, const FeedbackPolicy& policy, const Vector& m0,
                              const Matrix& s0) {
  require(policy.grid == terms.grid, "propagate_closed_loop: policy grid differs from the problem grid");
  const std::size_t count = half_grid_size(terms.grid);
  require(policy.gain.size() == count && policy.feedforward.size() == count,
          "propagate_closed_loop: policy needs 2N+1 half-grid samples");
  HalfGridSeries<Matrix> acl(count);
  HalfGridSeries<Vector> forcing(count);
  HalfGridSeries<Matrix> diffusion(count);
  for (std::size_t s = 0; s < count; ++s) {
    acl[s] = terms.a_mat[s] + terms.b_mat[s] * policy.gain[s];
    forcing[s] = terms.a_vec[s] + terms.b_mat[s] * policy.feedforward[s];
    diffusion[s] = terms.diffusion_at(s);
  }
  return propagate_linear(terms.grid, acl, forcing, diffusion, m0, s0);
}

SteeringResult steer_linear(const LqDrivingTerms& input, const BoundaryMoments& boundary,
                            const ShootingOptions& options, const std::optional<Matrix>& warm_start) {
  const LqDrivingTerms terms = input.normalized();
  const int n = terms.state_dim();
  const TimeGrid& grid = terms.grid;
  const std::size_t count = half_grid_size(grid);
  const std::size_t steps = static_cast<std::size_t>(grid.steps());
  const double h = grid.dt();

  const RiccatiSolution riccati =
      solve_coupled_riccati(terms, boundary.initial_covariance, boundary.terminal_covariance, options, warm_start);
  const MeanSolution mean = solve_mean_bvp(terms, boundary.initial_mean, boundary.terminal_mean);

  FeedbackPolicy policy;
  policy.grid = grid;
  policy.riccati = riccati.pi;
  policy.gain.resize(count);
  policy.feedforward.resize(count);
  HalfGridSeries<Matrix> acl(count);
  for (std::size_t s = 0; s < count; ++s) {
    const Matrix bt = terms.b_mat[s].transpose();
    policy.gain[s] = -bt * riccati.pi[s];
    policy.feedforward[s] = -bt * (mean.costate_half[s] - riccati.pi[s] * mean.mean_half[s]);
    acl[s] = terms.a_mat[s] + terms.b_mat[s] * policy.gain[s];
  }

  // The closed-loop RK4 discretization differs from the Pontryagin one at
  // O(dt^4); remove the terminal mean gap with a minimum-energy correction
  // d += B^T xi, where xi solves the closed-loop adjoint backwards from T.
  auto forced_terminal_mean = [&]() {
    HalfGridSeries<Matrix> forcing(count);
    for (std::size_t s = 0; s < count; ++s) forcing[s] = terms.a_vec[s] + terms.b_mat[s] * policy.feedforward[s];
    return Vector(propagate_affine(grid, acl, forcing, boundary.initial_mean).back());
  };
  Vector gap = boundary.terminal_mean - forced_terminal_mean();
  if (gap.norm() > 0.0) {
    std::vector<Matrix> xi_knots(steps + 1);
    Matrix xi = Matrix::Identity(n, n);
    xi_knots[steps] = xi;
    for (std::size_t i = steps; i-- > 0;) {
      // Backward in time: d xi / d tau = Acl^T xi with tau = T - t.
      xi = rk4_step(xi, h, [&](const Matrix& y, Stage stage) {
        const std::size_t s = stage == Stage::kStart ? 2 * i + 2 : (stage == Stage::kMid ? 2 * i + 1 : 2 * i);
        return Matrix(acl[s].transpose() * y);
      });
      xi_knots[i] = xi;
    }
    HalfGridSeries<Matrix> basis(count);
    for (std::size_t i = 0; i <= steps; ++i) {
      basis[2 * i] = terms.b_mat[2 * i].transpose() * xi_knots[i];
      if (i < steps) {
        const Matrix d0 = -acl[2 * i].transpose() * xi_knots[i];
        const Matrix d1 = -acl[2 * i + 2].transpose() * xi_knots[i + 1];
        basis[2 * i + 1] = terms.b_mat[2 * i + 1].transpose() * hermite_mid(xi_knots[i], xi_knots[i + 1], d0, d1, h);
      }
    }
    HalfGridSeries<Matrix> forcing(count);
    for (std::size_t s = 0; s < count; ++s) forcing[s] = terms.b_mat[s] * basis[s];
    const Matrix response = propagate_affine(grid, acl, forcing, Matrix::Zero(n, n)).back();
    Eigen::ColPivHouseholderQR<Matrix> qr(response);
    if (qr.rank() < n) throw Error(Failure::kInfeasible, "steer_linear: closed-loop system is not controllable");
    const Vector coeff = qr.solve(gap);
    for (std::size_t s = 0; s < count; ++s) policy.feedforward[s] += basis[s] * coeff;
  }

  SteeringResult result;
  result.moments = propagate_closed_loop(terms, policy, boundary.initial_mean, boundary.initial_covariance);
  policy.mean = result.moments.mean;
  policy.nominal_input.reserve(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) policy.nominal_input.push_back(policy.input(i, policy.mean[i]));
  result.policy = std::move(policy);
  result.initial_riccati = riccati.pi.front();
  result.shooting_iterations = riccati.iterations;
  result.terminal_mean_error = (result.moments.mean.back() - boundary.terminal_mean).norm();
  result.terminal_covariance_error =
      relative_frobenius(result.moments.covariance.back(), boundary.terminal_covariance);
  return result;
}

}  // namespace beliefroad
