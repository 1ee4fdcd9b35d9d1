#include "beliefroad/dynamics.hpp"

#include <cmath>

namespace beliefroad {

namespace {

void check_state(const Vector& x, int n, const char* what) {
  if (x.size() != n) {
    throw Error(Failure::kInvalidInput, std::string(what) + ": expected state of dimension " +
                                            std::to_string(n) + ", got " + std::to_string(x.size()));
  }
}

}  // namespace

LinearDynamics::LinearDynamics(Matrix a_mat, Vector a_vec, Matrix b_mat, int position_dim, std::string name)
    : a_mat_(std::move(a_mat)),
      a_vec_(std::move(a_vec)),
      b_mat_(std::move(b_mat)),
      position_dim_(position_dim),
      name_(std::move(name)) {
  require(a_mat_.rows() == a_mat_.cols(), "linear dynamics: A must be square");
  require(a_vec_.size() == a_mat_.rows(), "linear dynamics: a has wrong dimension");
  require(b_mat_.rows() == a_mat_.rows(), "linear dynamics: B has wrong row count");
  require(position_dim_ >= 1 && position_dim_ <= a_mat_.rows(), "linear dynamics: bad position dimension");
}

std::shared_ptr<LinearDynamics> LinearDynamics::double_integrator(int dim) {
  require(dim >= 1 && dim <= 3, "double integrator dimension must be 1, 2 or 3");
  Matrix a = Matrix::Zero(2 * dim, 2 * dim);
  a.topRightCorner(dim, dim).setIdentity();
  Matrix b = Matrix::Zero(2 * dim, dim);
  b.bottomRows(dim).setIdentity();
  return std::make_shared<LinearDynamics>(a, Vector::Zero(2 * dim), b, dim, "double_integrator");
}

Vector LinearDynamics::drift(double, const Vector& x) const {
  check_state(x, state_dim(), "drift");
  return a_mat_ * x + a_vec_;
}

Matrix LinearDynamics::drift_jacobian(double, const Vector& x) const {
  check_state(x, state_dim(), "drift_jacobian");
  return a_mat_;
}

Matrix LinearDynamics::input_matrix(double) const { return b_mat_; }

DragDoubleIntegrator::DragDoubleIntegrator(int dim, double drag_coefficient) : dim_(dim), drag_(drag_coefficient) {
  require(dim >= 1 && dim <= 3, "drag double integrator dimension must be 1, 2 or 3");
  require(std::isfinite(drag_coefficient) && drag_coefficient >= 0.0, "drag coefficient must be >= 0");
}

Vector DragDoubleIntegrator::drift(double, const Vector& x) const {
  check_state(x, state_dim(), "drift");
  Vector f(state_dim());
  const auto vel = x.tail(dim_);
  f.head(dim_) = vel;
  f.tail(dim_) = -drag_ * vel.norm() * vel;
  return f;
}

Matrix DragDoubleIntegrator::drift_jacobian(double, const Vector& x) const {
  check_state(x, state_dim(), "drift_jacobian");
  Matrix jac = Matrix::Zero(state_dim(), state_dim());
  jac.topRightCorner(dim_, dim_).setIdentity();
  const Vector vel = x.tail(dim_);
  const double speed = vel.norm();
  if (speed > 0.0) {
    jac.bottomRightCorner(dim_, dim_) =
        -drag_ * (speed * Matrix::Identity(dim_, dim_) + vel * vel.transpose() / speed);
  }
  return jac;
}

Matrix DragDoubleIntegrator::input_matrix(double) const {
  Matrix b = Matrix::Zero(state_dim(), dim_);
  b.bottomRows(dim_).setIdentity();
  return b;
}

LinearObservation::LinearObservation(Matrix h, std::string name) : h_(std::move(h)), name_(std::move(name)) {
  require(h_.rows() >= 1 && h_.cols() >= 1, "linear observation: empty matrix");
}

std::shared_ptr<LinearObservation> LinearObservation::full_state(int state_dim) {
  return std::make_shared<LinearObservation>(Matrix::Identity(state_dim, state_dim), "full");
}

std::shared_ptr<LinearObservation> LinearObservation::position_only(int state_dim, int position_dim) {
  require(position_dim >= 1 && position_dim <= state_dim, "position observation: bad dimensions");
  Matrix h = Matrix::Zero(position_dim, state_dim);
  h.leftCols(position_dim).setIdentity();
  return std::make_shared<LinearObservation>(h, "position");
}

Vector LinearObservation::measure(const Vector& x) const {
  check_state(x, state_dim(), "measure");
  return h_ * x;
}

Matrix LinearObservation::jacobian(const Vector& x) const {
  check_state(x, state_dim(), "measurement jacobian");
  return h_;
}

RangeObservation::RangeObservation(int state_dim, int position_dim)
    : state_dim_(state_dim), position_dim_(position_dim) {
  require(position_dim >= 1 && position_dim <= state_dim, "range observation: bad dimensions");
}

Vector RangeObservation::measure(const Vector& x) const {
  check_state(x, state_dim_, "measure");
  return Vector::Constant(1, x.head(position_dim_).norm());
}

Matrix RangeObservation::jacobian(const Vector& x) const {
  check_state(x, state_dim_, "measurement jacobian");
  Matrix jac = Matrix::Zero(1, state_dim_);
  const double range = x.head(position_dim_).norm();
  if (range > 0.0) jac.leftCols(position_dim_) = x.head(position_dim_).transpose() / range;
  return jac;
}

void ControlAffineModel::validate() const {
  require(dynamics != nullptr, "model has no dynamics");
  require(std::isfinite(noise_intensity) && noise_intensity >= 0.0, "noise intensity must be >= 0");
  const Matrix b = dynamics->input_matrix(0.0);
  require(b.rows() == state_dim() && b.cols() == input_dim(), "input matrix has wrong shape");
  Eigen::ColPivHouseholderQR<Matrix> qr(b);
  require(qr.rank() == input_dim(), "input matrix must have full column rank");
  if (observation) {
    require(observation->state_dim() == state_dim(), "observation state dimension mismatch");
    const int m = observation->measurement_dim();
    require(measurement_noise.rows() == m && measurement_noise.cols() == m,
            "measurement noise covariance has wrong shape");
    require(is_spd(measurement_noise), "measurement noise covariance must be SPD");
  }
}

Vector eval_drift(const ControlAffineModel& model, double t, const Vector& x) {
  return model.dynamics->drift(t, x);
}

Linearization linearize(const ControlAffineModel& model, const Vector& nominal, double t) {
  Linearization lin;
  lin.a_mat = model.dynamics->drift_jacobian(t, nominal);
  if (!lin.a_mat.allFinite()) throw Error(Failure::kNumerical, "linearize: non-finite Jacobian");
  lin.a_vec = model.dynamics->drift(t, nominal) - lin.a_mat * nominal;
  return lin;
}

Matrix measurement_jacobian(const ControlAffineModel& model, const Vector& nominal) {
  require(model.observation != nullptr, "measurement_jacobian: model has no observation");
  Matrix h = model.observation->jacobian(nominal);
  if (!h.allFinite()) throw Error(Failure::kNumerical, "measurement_jacobian: non-finite entries");
  return h;
}

}  // namespace beliefroad
