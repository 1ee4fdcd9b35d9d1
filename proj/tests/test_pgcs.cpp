#include <doctest.h>

#include "beliefroad/pgcs.hpp"
#include "oracles.hpp"

using namespace beliefroad;

namespace {

ControlAffineModel linear_model(double eps, double r) {
  ControlAffineModel model;
  model.dynamics = LinearDynamics::double_integrator(2);
  model.observation = LinearObservation::position_only(4, 2);
  model.noise_intensity = eps;
  model.measurement_noise = r * Matrix::Identity(2, 2);
  return model;
}

SdfMap empty_map() {
  ObstacleSet set;
  GridSpec grid;
  grid.origin = Vector::Constant(2, -2.0);
  grid.cell_size = 0.25;
  grid.extents = {37, 21};
  return build_sdf(set, grid);
}

// Half-space obstacle {x >= 2}: S(p) = 2 - p_x, exactly representable.
SdfMap ramp_map() {
  const long nx = 21, ny = 17;
  std::vector<double> values(nx * ny);
  for (long i = 0; i < nx; ++i)
    for (long j = 0; j < ny; ++j) values[i * ny + j] = 2.0 - (-1.0 + 0.25 * i);
  return SdfMap(2, Vector::Constant(2, -1.0), 0.25, {nx, ny}, values);
}

HalfGridSeries<Vector> constant_series(const TimeGrid& grid, const Vector& x) {
  return HalfGridSeries<Vector>(half_grid_size(grid), x);
}

ProximalDrift drift_at_linearization(const ControlAffineModel& model, const HalfGridSeries<Vector>& nominal) {
  ProximalDrift drift;
  for (const auto& x : nominal) {
    const Linearization lin = linearize(model, x, 0.0);
    drift.a_mat.push_back(lin.a_mat);
    drift.a_vec.push_back(lin.a_vec);
    drift.lin_mat.push_back(lin.a_mat);
    drift.lin_vec.push_back(lin.a_vec);
    drift.b_mat.push_back(model.dynamics->input_matrix(0.0));
  }
  return drift;
}

Vector state(double px, double py, double vx, double vy) {
  Vector x(4);
  x << px, py, vx, vy;
  return x;
}

}  // namespace

TEST_CASE("ekf riccati") {
  const TimeGrid grid(2.0, 40);
  SUBCASE("no noise and a perfect prior keep P at zero") {
    const auto model = linear_model(0.0, 0.01);
    const auto p = ekf_riccati(model, grid, constant_series(grid, Vector::Zero(4)), Matrix::Zero(4, 4));
    for (const auto& m : p.knots) CHECK(m.norm() == 0.0);
  }
  SUBCASE("without measurements and F = 0, P grows by eps B B^T t") {
    ControlAffineModel model;
    model.dynamics = std::make_shared<LinearDynamics>(Matrix::Zero(2, 2), Vector::Zero(2), Matrix::Identity(2, 2), 2);
    model.noise_intensity = 0.3;
    const Matrix p0 = 0.1 * Matrix::Identity(2, 2);
    const auto p = ekf_riccati(model, grid, constant_series(grid, Vector::Zero(2)), p0);
    for (std::size_t i = 0; i < grid.knots(); ++i) {
      CHECK((p.knots[i] - (p0 + 0.3 * grid.time(i) * Matrix::Identity(2, 2))).norm() < 1e-14);
    }
  }
  SUBCASE("discrete Kalman recursion converges at first order") {
    struct Case {
      Matrix f, b, h, r, p0;
      double eps;
    };
    std::vector<Case> cases;
    {
      Matrix f(1, 1), b(1, 1), h(1, 1), r(1, 1), p0(1, 1);
      f << -0.4;
      b << 1.0;
      h << 1.0;
      r << 0.05;
      p0 << 0.8;
      cases.push_back({f, b, h, r, p0, 0.2});
    }
    {
      Matrix f = Matrix::Zero(4, 4);
      f.topRightCorner(2, 2).setIdentity();
      Matrix b = Matrix::Zero(4, 2);
      b.bottomRows(2).setIdentity();
      Matrix h = Matrix::Zero(2, 4);
      h.leftCols(2).setIdentity();
      std::mt19937_64 rng(17);
      cases.push_back({f, b, h, 0.02 * Matrix::Identity(2, 2), testing::random_spd(rng, 4, 0.05, 0.5), 0.05});
    }
    for (const auto& c : cases) {
      const int n = static_cast<int>(c.f.rows());
      ControlAffineModel model;
      model.dynamics = std::make_shared<LinearDynamics>(c.f, Vector::Zero(n), c.b, n == 1 ? 1 : 2);
      model.observation = std::make_shared<LinearObservation>(c.h);
      model.noise_intensity = c.eps;
      model.measurement_noise = c.r;
      const TimeGrid fine(1.0, 200);
      const Matrix cont = ekf_riccati(model, fine, constant_series(fine, Vector::Zero(n)), c.p0).knots.back();
      const double e1 = (testing::discrete_kalman(c.f, c.b, c.eps, c.h, c.r, c.p0, 1.0, 200) - cont).norm();
      const double e2 = (testing::discrete_kalman(c.f, c.b, c.eps, c.h, c.r, c.p0, 1.0, 400) - cont).norm();
      const double e3 = (testing::discrete_kalman(c.f, c.b, c.eps, c.h, c.r, c.p0, 1.0, 800) - cont).norm();
      CHECK(e1 / e2 == doctest::Approx(2.0).epsilon(0.15));
      CHECK(e2 / e3 == doctest::Approx(2.0).epsilon(0.15));
    }
  }
  SUBCASE("larger measurement noise never shrinks P(T)") {
    Matrix f(1, 1), b(1, 1), h(1, 1);
    f << 0.3;
    b << 1.0;
    h << 1.0;
    double previous = 0.0;
    for (double r : {0.01, 0.03, 0.1, 0.3, 1.0, 3.0}) {
      ControlAffineModel model;
      model.dynamics = std::make_shared<LinearDynamics>(f, Vector::Zero(1), b, 1);
      model.observation = std::make_shared<LinearObservation>(h);
      model.noise_intensity = 0.1;
      model.measurement_noise = r * Matrix::Identity(1, 1);
      const double pt = ekf_riccati(model, grid, constant_series(grid, Vector::Zero(1)), 0.2 * Matrix::Identity(1, 1))
                            .knots.back()(0, 0);
      CHECK(pt >= previous);
      previous = pt;
    }
  }
  SUBCASE("accurate measurements stay PSD and match a fine grid") {
    // R = 1e-4 makes the measurement term stiff at dt = 0.05.
    const auto model = linear_model(0.01, 1e-4);
    const Matrix p0 = 0.05 * Matrix::Identity(4, 4);
    const auto coarse = ekf_riccati(model, grid, constant_series(grid, Vector::Zero(4)), p0);
    const TimeGrid fine(2.0, 1280);
    const auto reference = ekf_riccati(model, fine, constant_series(fine, Vector::Zero(4)), p0);
    for (const auto& m : coarse.knots) CHECK(is_psd(m));
    for (const auto& m : coarse.half) CHECK(is_psd(m));
    CHECK(relative_frobenius(coarse.knots.back(), reference.knots.back()) < 1e-6);
    CHECK(relative_frobenius(coarse.knots[20], reference.knots[640]) < 1e-6);
  }
  SUBCASE("error covariance stays symmetric PSD") {
    const auto model = linear_model(0.05, 0.01);
    std::mt19937_64 rng(3);
    const Matrix p0 = testing::random_spd(rng, 4, 0.0, 0.3);
    const auto p = ekf_riccati(model, grid, constant_series(grid, Vector::Zero(4)), p0);
    for (const auto& m : p.knots) {
      CHECK((m - m.transpose()).norm() == 0.0);
      CHECK(is_psd(m));
    }
  }
}

TEST_CASE("quadratic weights") {
  const auto model = linear_model(0.01, 0.01);
  const TimeGrid grid(1.0, 10);
  CollisionCostParams params;
  params.margin = 0.5;
  params.weight = 3.0;
  const auto map = ramp_map();
  const double eta = 1e-3;
  const double w = eta / (1 + eta);

  SUBCASE("nominal outside the margin gives zero weights") {
    const auto nominal = constant_series(grid, state(0.0, 0.0, 1.0, 0.0));
    const auto weights = build_quadratic_weights(map, params, nominal, drift_at_linearization(model, nominal), eta);
    for (std::size_t s = 0; s < nominal.size(); ++s) {
      CHECK(weights.q_mat[s].norm() == 0.0);
      CHECK(weights.r_vec[s].norm() == 0.0);
    }
  }
  SUBCASE("single in-margin sample gives a rank-one weight there only") {
    auto nominal = constant_series(grid, state(0.0, 0.0, 0.0, 0.0));
    nominal[7] = state(1.75, 0.3, 0.0, 0.0);
    const auto weights = build_quadratic_weights(map, params, nominal, drift_at_linearization(model, nominal), eta);
    for (std::size_t s = 0; s < nominal.size(); ++s) {
      if (s == 7) {
        Eigen::SelfAdjointEigenSolver<Matrix> eig(weights.q_mat[s]);
        CHECK(eig.eigenvalues()[3] > 0.0);
        CHECK(std::abs(eig.eigenvalues()[2]) < 1e-15);
      } else {
        CHECK(weights.q_mat[s].norm() == 0.0);
      }
    }
  }
  SUBCASE("quadratic model matches the hinge expansion to third order") {
    std::mt19937_64 rng(21);
    for (int k = 0; k < 50; ++k) {
      const Vector xbar = state(1.6 + 0.3 * k / 50.0, -0.5 + k / 50.0, 0.2, -0.1);
      const auto nominal = constant_series(grid, xbar);
      const auto weights = build_quadratic_weights(map, params, nominal, drift_at_linearization(model, nominal), eta);
      const Matrix& q = weights.q_mat[0];
      const Vector& r = weights.r_vec[0];
      auto model_cost = [&](const Vector& x) { return 0.5 * x.dot(q * x) + r.dot(x); };
      for (double scale : {1e-3, 5e-4}) {
        const Vector delta = scale * testing::random_vector(rng, 4, -1, 1).normalized();
        const double exact = w * (hinge_cost(map, params, xbar + delta).value - hinge_cost(map, params, xbar).value);
        const double approx = model_cost(xbar + delta) - model_cost(xbar);
        CHECK(std::abs(exact - approx) <= std::pow(delta.norm(), 3) + 1e-15);
      }
    }
  }
  SUBCASE("drift mismatch term equals its direct evaluation") {
    std::mt19937_64 rng(8);
    const auto nominal = constant_series(grid, state(-0.5, 0.0, 0.0, 0.0));
    ProximalDrift drift = drift_at_linearization(model, nominal);
    const Matrix b = drift.b_mat[0];
    const Matrix gain = testing::random_vector(rng, 8, -1, 1).reshaped(2, 4);
    const Vector ff = testing::random_vector(rng, 2, -1, 1);
    for (std::size_t s = 0; s < nominal.size(); ++s) {
      drift.a_mat[s] += b * gain;
      drift.a_vec[s] += b * ff;
    }
    const auto weights = build_quadratic_weights(map, params, nominal, drift, eta);
    const double mix = eta / ((1 + eta) * (1 + eta));
    auto direct = [&](const Vector& x) { return 0.5 * mix * (gain * x + ff).squaredNorm(); };
    auto model_cost = [&](const Vector& x) { return 0.5 * x.dot(weights.q_mat[0] * x) + weights.r_vec[0].dot(x); };
    for (int k = 0; k < 20; ++k) {
      const Vector x = testing::random_vector(rng, 4, -2, 2);
      const Vector y = testing::random_vector(rng, 4, -2, 2);
      CHECK((model_cost(x) - model_cost(y)) == doctest::Approx(direct(x) - direct(y)).epsilon(1e-12));
    }
    CHECK(min_eigenvalue(weights.q_mat[0]) >= -1e-15);
  }
}

TEST_CASE("propagate_nominal") {
  const auto model = linear_model(0.2, 0.01);
  const TimeGrid grid(1.5, 30);
  const std::size_t count = half_grid_size(grid);
  SUBCASE("pure diffusion") {
    const Matrix s0 = 0.1 * Matrix::Identity(4, 4);
    const Vector m0 = state(1, 2, 0, 0);
    const auto moments = propagate_nominal(model, grid, HalfGridSeries<Matrix>(count, Matrix::Zero(4, 4)),
                                           HalfGridSeries<Vector>(count, Vector::Zero(4)), m0, s0);
    Matrix bbt = Matrix::Zero(4, 4);
    bbt.bottomRightCorner(2, 2).setIdentity();
    for (std::size_t i = 0; i < grid.knots(); ++i) {
      CHECK((moments.mean[i] - m0).norm() == 0.0);
      CHECK((moments.covariance[i] - (s0 + 0.2 * grid.time(i) * bbt)).norm() < 1e-14);
    }
  }
  SUBCASE("divergent iterate is rejected") {
    HalfGridSeries<Matrix> a(count, 40.0 * Matrix::Identity(4, 4));
    CHECK_THROWS_AS(propagate_nominal(model, grid, a, HalfGridSeries<Vector>(count, Vector::Zero(4)),
                                      Vector::Ones(4), Matrix::Identity(4, 4), 1e6),
                    Error);
  }
}

TEST_CASE("pgcs_connect") {
  PgcsParams params;
  params.grid = TimeGrid(4.0, 40);
  const GaussianBelief start{state(0, 0, 0, 0), 0.1 * Matrix::Identity(4, 4)};
  const GaussianBelief goal{state(3, 1, 0, 0), 0.12 * Matrix::Identity(4, 4)};
  const Matrix p0 = 0.25 * start.covariance;

  SUBCASE("obstacle-free linear model reduces to linear steering") {
    const auto model = linear_model(0.02, 0.01);
    const auto result = pgcs_connect(model, empty_map(), params, start, p0, goal);
    // The first solve is already the fixed point; the second only confirms it.
    CHECK(result.converged);
    CHECK(result.iterations == 2);
    CHECK(result.diagnostics[1].nominal_change < 1e-9);

    const auto& grid = params.grid;
    const auto p = ekf_riccati(model, grid, constant_series(grid, Vector::Zero(4)), p0);
    const Matrix a = model.dynamics->drift_jacobian(0.0, Vector::Zero(4));
    const auto terms = LqDrivingTerms::constant(grid, a, Vector::Zero(4), model.dynamics->input_matrix(0.0),
                                                Matrix::Zero(4, 4), Vector::Zero(4), model.noise_intensity);
    const auto direct =
        steer_linear(terms, {start.mean, start.covariance - p0, goal.mean, goal.covariance - p.knots.back()});
    for (std::size_t i = 0; i < grid.knots(); ++i) {
      CHECK((result.trajectory.mean[i] - direct.moments.mean[i]).norm() < 1e-8);
      CHECK((result.trajectory.estimate_covariance[i] - direct.moments.covariance[i]).norm() < 1e-8);
      CHECK((result.trajectory.error_covariance[i] - p.knots[i]).norm() < 1e-12);
      CHECK((result.trajectory.nominal_input[i] - direct.policy.nominal_input[i]).norm() < 1e-6);
    }
    CHECK(result.terminal_mean_error < 1e-8);
    CHECK(result.terminal_covariance_error < 1e-6);
  }
  SUBCASE("reported covariance is estimate plus error covariance") {
    const auto model = linear_model(0.02, 0.01);
    const auto result = pgcs_connect(model, empty_map(), params, start, p0, goal);
    const auto& t = result.trajectory;
    for (std::size_t i = 0; i < t.mean.size(); ++i) {
      CHECK(t.covariance[i] == t.estimate_covariance[i] + t.error_covariance[i]);
      CHECK(is_spd(t.estimate_covariance[i], 1e-10));
      CHECK(is_psd(t.error_covariance[i], 1e-10));
    }
  }
  SUBCASE("goal covariance below the estimation error is infeasible") {
    const auto model = linear_model(0.02, 0.01);
    const GaussianBelief tight{goal.mean, 1e-4 * Matrix::Identity(4, 4)};
    try {
      pgcs_connect(model, empty_map(), params, start, p0, tight);
      FAIL("expected an infeasibility error");
    } catch (const Error& e) {
      CHECK(e.kind() == Failure::kInfeasible);
      CHECK(std::string(e.what()) == "terminal covariance below estimation error");
    }
  }
  SUBCASE("start covariance must exceed its error covariance") {
    const auto model = linear_model(0.02, 0.01);
    CHECK_THROWS_AS(pgcs_connect(model, empty_map(), params, start, 2.0 * start.covariance, goal), Error);
  }
  SUBCASE("a converged iterate is a fixed point") {
    ControlAffineModel model = linear_model(0.02, 0.01);
    model.dynamics = std::make_shared<DragDoubleIntegrator>(2, 0.1);
    params.max_iterations = 100;
    const auto result = pgcs_connect(model, empty_map(), params, start, p0, goal);
    REQUIRE(result.converged);
    CHECK(result.diagnostics.back().nominal_change < params.tolerance);
    CHECK(result.terminal_covariance_error < params.residual_tolerance);
    // The exported input drives the model drift onto the closed loop.
    const auto& t = result.trajectory;
    const Matrix b = model.dynamics->input_matrix(0.0);
    for (std::size_t i = 0; i < t.mean.size(); ++i) {
      const Vector closed = t.closed_loop_a[i] * t.mean[i] + t.closed_loop_a_vec[i];
      const Vector open = eval_drift(model, 0.0, t.mean[i]) + b * (t.gain[i] * t.mean[i] + t.feedforward[i]);
      CHECK((closed - open).norm() < 1e-9 * (1 + closed.norm()));
    }
  }
  SUBCASE("obstacle pushes the mean path clear") {
    ControlAffineModel model = linear_model(0.01, 0.01);
    model.dynamics = std::make_shared<DragDoubleIntegrator>(2, 0.1);
    ObstacleSet set;
    set.obstacles.push_back(Sphere{Vector::Constant(2, 0.0) + (Vector(2) << 1.5, 0.3).finished(), 0.4});
    GridSpec spec;
    spec.origin = Vector::Constant(2, -2.0);
    spec.cell_size = 0.05;
    spec.extents = {141, 91};
    const auto map = build_sdf(set, spec);
    params.collision.margin = 0.3;
    params.collision.weight = 1000.0;
    const GaussianBelief to{state(3, 0.5, 0, 0), goal.covariance};
    const auto result = pgcs_connect(model, map, params, start, p0, to);
    CHECK(collision_free(map, params.collision, result.trajectory.mean));
    CHECK(result.diagnostics.back().hinge_integral < 0.05 * result.diagnostics.front().hinge_integral);
    CHECK(result.terminal_covariance_error < 1e-3);
  }
}
