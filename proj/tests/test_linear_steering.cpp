#include <doctest.h>

#include <Eigen/Sparse>
#include <chrono>

#include "beliefroad/linear_steering.hpp"
#include "oracles.hpp"

using namespace beliefroad;

namespace {

Matrix di_a(int d) {
  Matrix a = Matrix::Zero(2 * d, 2 * d);
  a.topRightCorner(d, d).setIdentity();
  return a;
}

Matrix di_b(int d) {
  Matrix b = Matrix::Zero(2 * d, d);
  b.bottomRows(d).setIdentity();
  return b;
}

LqDrivingTerms di_terms(const TimeGrid& grid, const Matrix& q, const Vector& r, double eps) {
  return LqDrivingTerms::constant(grid, di_a(2), Vector::Zero(4), di_b(2), q, r, eps);
}

// Trapezoidal-collocation discretization of the deterministic LQ transfer,
// solved as one sparse KKT system. Returns the mean at every fine knot.
std::vector<Vector> dense_qp_mean(const Matrix& a, const Vector& av, const Matrix& b, const Matrix& q, const Vector& r,
                                  const Vector& m0, const Vector& mT, double horizon, int m) {
  const int n = static_cast<int>(a.rows());
  const int p = static_cast<int>(b.cols());
  const double h = horizon / m;
  const int per = n + p;
  const int nvar = (m + 1) * per;
  const int ncon = m * n + 2 * n;
  std::vector<Eigen::Triplet<double>> trip;
  Vector rhs = Vector::Zero(nvar + ncon);
  auto xi = [&](int k, int i) { return k * per + i; };
  auto vi = [&](int k, int j) { return k * per + n + j; };
  for (int k = 0; k <= m; ++k) {
    const double w = (k == 0 || k == m) ? 0.5 * h : h;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j)
        if (q(i, j) != 0.0) trip.emplace_back(xi(k, i), xi(k, j), w * q(i, j));
      rhs[xi(k, i)] = -w * r[i];
    }
    for (int j = 0; j < p; ++j) trip.emplace_back(vi(k, j), vi(k, j), w);
  }
  int row = nvar;
  auto add_con = [&](int row_index, int col, double val) {
    trip.emplace_back(row_index, col, val);
    trip.emplace_back(col, row_index, val);
  };
  for (int k = 0; k < m; ++k) {
    for (int i = 0; i < n; ++i, ++row) {
      // x_{k+1} - x_k - h/2 (A x_k + B v_k + A x_{k+1} + B v_{k+1} + 2 a) = 0
      add_con(row, xi(k + 1, i), 1.0);
      add_con(row, xi(k, i), -1.0);
      for (int j = 0; j < n; ++j) {
        if (a(i, j) == 0.0) continue;
        add_con(row, xi(k, j), -0.5 * h * a(i, j));
        add_con(row, xi(k + 1, j), -0.5 * h * a(i, j));
      }
      for (int j = 0; j < p; ++j) {
        if (b(i, j) == 0.0) continue;
        add_con(row, vi(k, j), -0.5 * h * b(i, j));
        add_con(row, vi(k + 1, j), -0.5 * h * b(i, j));
      }
      rhs[row] = h * av[i];
    }
  }
  for (int i = 0; i < n; ++i, ++row) {
    add_con(row, xi(0, i), 1.0);
    rhs[row] = m0[i];
  }
  for (int i = 0; i < n; ++i, ++row) {
    add_con(row, xi(m, i), 1.0);
    rhs[row] = mT[i];
  }
  Eigen::SparseMatrix<double> kkt(nvar + ncon, nvar + ncon);
  kkt.setFromTriplets(trip.begin(), trip.end());
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(kkt);
  REQUIRE(lu.info() == Eigen::Success);
  const Vector sol = lu.solve(rhs);
  std::vector<Vector> path;
  for (int k = 0; k <= m; ++k) path.push_back(sol.segment(k * per, n));
  return path;
}

// Scalar dx = u dt + sqrt(eps) dW on [0, 1]: closed-loop variance under the
// Riccati feedback with pi(0) = p0, integrated by fine explicit Euler.
double scalar_terminal_variance(double p0, double sigma2, double eps, int steps) {
  double pi = p0;
  double s = sigma2;
  const double h = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    const double dpi = pi * pi;
    const double ds = -2.0 * pi * s + eps;
    pi += h * dpi;
    s += h * ds;
  }
  return s;
}

}  // namespace

TEST_CASE("solve_mean_bvp") {
  SUBCASE("stationary solution") {
    const TimeGrid grid(1.0, 20);
    Vector m0(4);
    m0 << 1, -2, 0, 0;
    const auto terms = di_terms(grid, Matrix::Zero(4, 4), Vector::Zero(4), 0.1);
    const auto sol = solve_mean_bvp(terms, m0, m0);
    for (std::size_t i = 0; i < grid.knots(); ++i) {
      CHECK((sol.mean[i] - m0).norm() < 1e-12);
      CHECK(sol.feedforward[i].norm() < 1e-12);
    }
  }
  SUBCASE("scalar integrator moves along a straight line") {
    const TimeGrid grid(1.0, 10);
    const auto terms = LqDrivingTerms::constant(grid, Matrix::Zero(1, 1), Vector::Zero(1), Matrix::Ones(1, 1),
                                                Matrix::Zero(1, 1), Vector::Zero(1), 0.0);
    const auto sol = solve_mean_bvp(terms, Vector::Zero(1), Vector::Ones(1));
    for (std::size_t i = 0; i < grid.knots(); ++i) {
      CHECK(sol.mean[i][0] == doctest::Approx(grid.time(i)).epsilon(1e-12));
      CHECK(sol.feedforward[i][0] == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("double integrator with state cost matches a dense QP") {
    const TimeGrid grid(1.0, 50);
    Matrix q = Matrix::Zero(4, 4);
    q(0, 0) = 4.0;
    q(1, 1) = 2.0;
    q(0, 1) = q(1, 0) = 0.5;
    Vector r(4);
    r << 0.3, -0.2, 0.1, 0.0;
    Vector m0(4), mT(4);
    m0 << 0, 0, 0, 0;
    mT << 2, 1, 0, 0.5;
    const auto terms = di_terms(grid, q, r, 0.1);
    const auto sol = solve_mean_bvp(terms, m0, mT);
    CHECK((sol.mean.back() - mT).norm() <= 1e-8 * (1 + mT.norm()));
    const auto coarse = dense_qp_mean(di_a(2), Vector::Zero(4), di_b(2), q, r, m0, mT, 1.0, 400);
    const auto fine = dense_qp_mean(di_a(2), Vector::Zero(4), di_b(2), q, r, m0, mT, 1.0, 800);
    double worst = 0.0;
    for (std::size_t i = 0; i < grid.knots(); ++i) {
      const Vector extrapolated = (4.0 * fine[16 * i] - coarse[8 * i]) / 3.0;
      worst = std::max(worst, (sol.mean[i] - extrapolated).norm() / mT.norm());
    }
    CHECK(worst < 1e-5);
  }
  SUBCASE("uncontrollable pair is reported infeasible") {
    const TimeGrid grid(1.0, 10);
    Matrix b(2, 1);
    b << 1, 0;
    const auto terms = LqDrivingTerms::constant(grid, Matrix::Zero(2, 2), Vector::Zero(2), b, Matrix::Zero(2, 2),
                                                Vector::Zero(2), 0.1);
    try {
      solve_mean_bvp(terms, Vector::Zero(2), Vector::Ones(2));
      FAIL("expected infeasibility");
    } catch (const Error& e) {
      CHECK(e.kind() == Failure::kInfeasible);
    }
  }
}

TEST_CASE("solve_coupled_riccati") {
  SUBCASE("zero noise with equal covariances needs no feedback") {
    const TimeGrid grid(1.0, 20);
    const auto terms = LqDrivingTerms::constant(grid, Matrix::Zero(2, 2), Vector::Zero(2), Matrix::Identity(2, 2),
                                                Matrix::Zero(2, 2), Vector::Zero(2), 0.0);
    Matrix s(2, 2);
    s << 1.0, 0.2, 0.2, 0.5;
    const auto sol = solve_coupled_riccati(terms, s, s);
    for (const auto& pi : sol.pi) CHECK(pi.norm() < 1e-12);
  }
  SUBCASE("scalar system reproduces the shooting oracle") {
    const double eps = 1.0;
    const double sigma2 = 1.0;
    const TimeGrid grid(1.0, 50);
    const auto terms = LqDrivingTerms::constant(grid, Matrix::Zero(1, 1), Vector::Zero(1), Matrix::Ones(1, 1),
                                                Matrix::Zero(1, 1), Vector::Zero(1), eps);
    const auto sol = solve_coupled_riccati(terms, Matrix::Constant(1, 1, sigma2), Matrix::Constant(1, 1, sigma2));
    // Bisection on pi(0) against a fine explicit-Euler integration.
    double lo = 0.0, hi = 0.99;
    for (int k = 0; k < 60; ++k) {
      const double mid = 0.5 * (lo + hi);
      // Terminal variance decreases in pi(0) on this bracket.
      if (scalar_terminal_variance(mid, sigma2, eps, 200000) > sigma2) lo = mid; else hi = mid;
    }
    CHECK(sol.pi.front()(0, 0) == doctest::Approx(0.5 * (lo + hi)).epsilon(1e-4));
    // Closed form: (1 - p0) solves sigma2 y^2 + eps y - sigma2 = 0.
    const double y = (-eps + std::sqrt(eps * eps + 4 * sigma2 * sigma2)) / (2 * sigma2);
    CHECK(sol.pi.front()(0, 0) == doctest::Approx(1 - y).epsilon(1e-7));
    CHECK(sol.covariance.back()(0, 0) == doctest::Approx(sigma2).epsilon(1e-9));
  }
  SUBCASE("random boundary covariances on the double integrator") {
    std::mt19937_64 rng(7);
    const TimeGrid grid(1.0, 50);
    const TimeGrid fine(1.0, 500);
    Matrix q = Matrix::Zero(4, 4);
    Vector g(2);
    g << 0.6, -0.8;
    q.topLeftCorner(2, 2) = 2.0 * 5.0 * g * g.transpose();
    for (int trial = 0; trial < 3; ++trial) {
      const Matrix s0 = testing::random_spd(rng, 4, 0.05, 0.5);
      const Matrix sT = testing::random_spd(rng, 4, 0.05, 0.5);
      const auto sol = solve_coupled_riccati(di_terms(grid, q, Vector::Zero(4), 0.1), s0, sT);
      CHECK(relative_frobenius(sol.covariance.back(), sT) <= 1e-6);
      for (const auto& pi : sol.pi) CHECK((pi - pi.transpose()).norm() <= 1e-10);
      const auto fine_sol = solve_coupled_riccati(di_terms(fine, q, Vector::Zero(4), 0.1), s0, sT);
      CHECK(relative_frobenius(sol.pi.front(), fine_sol.pi.front()) < 1e-5);
    }
  }
  SUBCASE("growing covariance over long horizons stays escape-free") {
    // Roots of the terminal condition whose Riccati solution escapes exist
    // next to the admissible one; the solver must land on the admissible one.
    Matrix sT = 0.1 * Matrix::Identity(4, 4);
    sT.topLeftCorner(2, 2) -= 0.014 * Matrix::Identity(2, 2);
    sT.bottomRightCorner(2, 2) -= 0.014 * Matrix::Identity(2, 2);
    sT.topRightCorner(2, 2) = sT.bottomLeftCorner(2, 2) = -0.0099 * Matrix::Identity(2, 2);
    for (double horizon : {3.0, 4.0, 5.0, 8.0}) {
      for (int steps : {30, 50, 100}) {
        const auto terms = di_terms(TimeGrid(horizon, steps), Matrix::Zero(4, 4), Vector::Zero(4), 0.01);
        const auto sol = solve_coupled_riccati(terms, 0.015 * Matrix::Identity(4, 4), sT);
        CHECK(relative_frobenius(sol.covariance.back(), sT) <= 1e-6);
        for (const auto& pi : sol.pi) CHECK(pi.allFinite());
      }
    }
  }
  SUBCASE("invalid covariances are rejected") {
    const TimeGrid grid(1.0, 10);
    const auto terms = di_terms(grid, Matrix::Zero(4, 4), Vector::Zero(4), 0.1);
    Matrix bad = Matrix::Identity(4, 4);
    bad(3, 3) = -1;
    CHECK_THROWS_AS(solve_coupled_riccati(terms, bad, Matrix::Identity(4, 4)), Error);
  }
}

TEST_CASE("propagate_closed_loop") {
  SUBCASE("pure diffusion") {
    const TimeGrid grid(2.0, 10);
    const auto terms = di_terms(grid, Matrix::Zero(4, 4), Vector::Zero(4), 0.3);
    auto zero_a = terms;
    for (auto& a : zero_a.a_mat) a.setZero();
    FeedbackPolicy policy;
    policy.grid = grid;
    policy.gain.assign(half_grid_size(grid), Matrix::Zero(2, 4));
    policy.feedforward.assign(half_grid_size(grid), Vector::Zero(2));
    Vector m0(4);
    m0 << 1, 2, 3, 4;
    const Matrix s0 = 0.5 * Matrix::Identity(4, 4);
    const auto moments = propagate_closed_loop(zero_a, policy, m0, s0);
    const Matrix bbt = di_b(2) * di_b(2).transpose();
    for (std::size_t i = 0; i < grid.knots(); ++i) {
      CHECK((moments.mean[i] - m0).norm() == 0.0);
      CHECK((moments.covariance[i] - (s0 + 0.3 * bbt * grid.time(i))).norm() < 1e-13);
    }
  }
  SUBCASE("steered policy reproduces the boundary moments") {
    std::mt19937_64 rng(17);
    const TimeGrid grid(1.0, 50);
    BoundaryMoments bm{testing::random_vector(rng, 4, -1, 1), testing::random_spd(rng, 4, 0.05, 0.4),
                       testing::random_vector(rng, 4, -1, 1), testing::random_spd(rng, 4, 0.05, 0.4)};
    const auto terms = di_terms(grid, Matrix::Zero(4, 4), Vector::Zero(4), 0.1);
    const auto result = steer_linear(terms, bm);
    const auto moments = propagate_closed_loop(terms, result.policy, bm.initial_mean, bm.initial_covariance);
    CHECK((moments.mean.back() - bm.terminal_mean).norm() <= 1e-8 * (1 + bm.terminal_mean.norm()));
    CHECK(relative_frobenius(moments.covariance.back(), bm.terminal_covariance) <= 1e-6);
    for (std::size_t s = 0; s < half_grid_size(grid); ++s) {
      CHECK((result.policy.gain[s] + di_b(2).transpose() * result.policy.riccati[s]).norm() == 0.0);
    }
    for (std::size_t i = 0; i < grid.knots(); ++i) {
      const Vector v = result.policy.nominal_input[i];
      const Vector d = v + di_b(2).transpose() * result.policy.riccati[2 * i] * result.policy.mean[i];
      CHECK((d - result.policy.feedforward[2 * i]).norm() < 1e-10 * (1 + d.norm()));
    }
  }
  SUBCASE("Monte-Carlo rollouts agree with propagated moments") {
    std::mt19937_64 rng(23);
    const TimeGrid grid(1.0, 50);
    Vector m0(4), mT(4);
    m0 << 0, 0, 0, 0;
    mT << 1, 0.5, 0, 0;
    Matrix s0 = 0.2 * Matrix::Identity(4, 4);
    Matrix sT = 0.1 * Matrix::Identity(4, 4);
    sT(0, 1) = sT(1, 0) = 0.02;
    const double eps = 0.2;
    const auto terms = di_terms(grid, Matrix::Zero(4, 4), Vector::Zero(4), eps);
    const auto result = steer_linear(terms, {m0, s0, mT, sT});
    const auto& moments = result.moments;

    const int rollouts = 10000;
    const int sub = 20;
    const double h = grid.dt() / sub;
    std::normal_distribution<double> gauss(0.0, 1.0);
    const Matrix l0 = s0.llt().matrixL();
    const Matrix a = di_a(2);
    const Matrix b = di_b(2);
    std::vector<Vector> finals;
    finals.reserve(rollouts);
    for (int k = 0; k < rollouts; ++k) {
      Vector z(4);
      for (int j = 0; j < 4; ++j) z[j] = gauss(rng);
      Vector x = m0 + l0 * z;
      for (int i = 0; i < grid.steps(); ++i) {
        for (int s = 0; s < sub; ++s) {
          // Linear interpolation of the policy across the half-grid samples.
          const double frac = 2.0 * s / sub;
          const std::size_t lo = 2 * i + (frac >= 1.0 ? 1 : 0);
          const double w = frac - std::floor(frac);
          const Matrix kk = (1 - w) * result.policy.gain[lo] + w * result.policy.gain[lo + 1];
          const Vector dd = (1 - w) * result.policy.feedforward[lo] + w * result.policy.feedforward[lo + 1];
          Vector dw(2);
          dw << gauss(rng), gauss(rng);
          x += (a * x + b * (kk * x + dd)) * h + b * std::sqrt(eps * h) * dw;
        }
      }
      finals.push_back(x);
    }
    Vector mean = Vector::Zero(4);
    for (const auto& x : finals) mean += x;
    mean /= rollouts;
    Matrix cov = Matrix::Zero(4, 4);
    for (const auto& x : finals) cov += (x - mean) * (x - mean).transpose();
    cov /= (rollouts - 1);
    const Matrix& st = moments.covariance.back();
    for (int i = 0; i < 4; ++i) {
      const double se = std::sqrt(st(i, i) / rollouts);
      CHECK(std::abs(mean[i] - moments.mean.back()[i]) <= 3 * se);
      for (int j = 0; j < 4; ++j) {
        const double se_cov = std::sqrt((st(i, i) * st(j, j) + st(i, j) * st(i, j)) / rollouts);
        CHECK(std::abs(cov(i, j) - st(i, j)) <= 3 * se_cov);
      }
    }
  }
  SUBCASE("grid refinement follows fourth order") {
    std::mt19937_64 rng(31);
    const Matrix s0 = testing::random_spd(rng, 4, 0.1, 0.5);
    const Matrix sT = testing::random_spd(rng, 4, 0.1, 0.5);
    const TimeGrid reference_grid(1.0, 1600);
    double mismatch[2];
    int idx = 0;
    for (int steps : {20, 40}) {
      const TimeGrid grid(1.0, steps);
      const auto sol = solve_coupled_riccati(di_terms(grid, Matrix::Zero(4, 4), Vector::Zero(4), 0.1), s0, sT);
      const auto ref = integrate_riccati_pair(di_terms(reference_grid, Matrix::Zero(4, 4), Vector::Zero(4), 0.1),
                                              sol.pi.front(), s0);
      REQUIRE(ref.has_value());
      mismatch[idx++] = relative_frobenius(ref->covariance.back(), sT);
    }
    CHECK(mismatch[0] / mismatch[1] > 8.0);
  }
}
