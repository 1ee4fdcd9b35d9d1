#pragma once

#include <memory>
#include <string>

#include "beliefroad/types.hpp"

namespace beliefroad {

/// Drift and input channel of a control-affine system
///   dX = f(t, X) dt + B(t) (u dt + sqrt(eps) dW).
/// States are laid out as [position; velocity] when position_dim() * 2 ==
/// state_dim(); the position block always leads.
class Dynamics {
 public:
  virtual ~Dynamics() = default;

  virtual int state_dim() const = 0;
  virtual int input_dim() const = 0;
  virtual int position_dim() const = 0;
  virtual std::string name() const = 0;

  virtual Vector drift(double t, const Vector& x) const = 0;
  virtual Matrix drift_jacobian(double t, const Vector& x) const = 0;
  virtual Matrix input_matrix(double t) const = 0;

  bool has_velocity_block() const { return 2 * position_dim() == state_dim(); }
};

/// f(t, x) = A x + a with constant A, a, B.
class LinearDynamics final : public Dynamics {
 public:
  LinearDynamics(Matrix a_mat, Vector a_vec, Matrix b_mat, int position_dim, std::string name = "linear");

  /// [0 I; 0 0] state matrix, [0; I] input matrix, `dim` in {1, 2, 3}.
  static std::shared_ptr<LinearDynamics> double_integrator(int dim);

  int state_dim() const override { return static_cast<int>(a_mat_.rows()); }
  int input_dim() const override { return static_cast<int>(b_mat_.cols()); }
  int position_dim() const override { return position_dim_; }
  std::string name() const override { return name_; }

  Vector drift(double t, const Vector& x) const override;
  Matrix drift_jacobian(double t, const Vector& x) const override;
  Matrix input_matrix(double t) const override;

 private:
  Matrix a_mat_;
  Vector a_vec_;
  Matrix b_mat_;
  int position_dim_;
  std::string name_;
};

/// Double integrator with quadratic drag on the velocity block:
///   d pos = vel dt,  d vel = (u - c_d |vel| vel) dt + sqrt(eps) dW.
/// The drag Jacobian at vel = 0 is defined as zero.
class DragDoubleIntegrator final : public Dynamics {
 public:
  DragDoubleIntegrator(int dim, double drag_coefficient);

  int state_dim() const override { return 2 * dim_; }
  int input_dim() const override { return dim_; }
  int position_dim() const override { return dim_; }
  std::string name() const override { return "drag_double_integrator"; }
  double drag_coefficient() const { return drag_; }

  Vector drift(double t, const Vector& x) const override;
  Matrix drift_jacobian(double t, const Vector& x) const override;
  Matrix input_matrix(double t) const override;

 private:
  int dim_;
  double drag_;
};

/// Measurement map z = h(x) + v.
class Observation {
 public:
  virtual ~Observation() = default;
  virtual int measurement_dim() const = 0;
  virtual int state_dim() const = 0;
  virtual std::string name() const = 0;
  virtual Vector measure(const Vector& x) const = 0;
  virtual Matrix jacobian(const Vector& x) const = 0;
};

class LinearObservation final : public Observation {
 public:
  LinearObservation(Matrix h, std::string name = "linear");
  static std::shared_ptr<LinearObservation> full_state(int state_dim);
  /// Selects the leading `position_dim` entries.
  static std::shared_ptr<LinearObservation> position_only(int state_dim, int position_dim);

  int measurement_dim() const override { return static_cast<int>(h_.rows()); }
  int state_dim() const override { return static_cast<int>(h_.cols()); }
  std::string name() const override { return name_; }
  Vector measure(const Vector& x) const override;
  Matrix jacobian(const Vector& x) const override;

 private:
  Matrix h_;
  std::string name_;
};

/// Euclidean range to the workspace origin, h(x) = |pos(x)|.
class RangeObservation final : public Observation {
 public:
  RangeObservation(int state_dim, int position_dim);
  int measurement_dim() const override { return 1; }
  int state_dim() const override { return state_dim_; }
  std::string name() const override { return "range"; }
  Vector measure(const Vector& x) const override;
  Matrix jacobian(const Vector& x) const override;

 private:
  int state_dim_;
  int position_dim_;
};

/// Dynamics plus sensor model. A null observation means no measurements are
/// taken (the EKF Riccati reduces to open-loop covariance propagation).
struct ControlAffineModel {
  std::shared_ptr<const Dynamics> dynamics;
  std::shared_ptr<const Observation> observation;
  double noise_intensity = 0.0;
  Matrix measurement_noise;

  int state_dim() const { return dynamics->state_dim(); }
  int input_dim() const { return dynamics->input_dim(); }
  int position_dim() const { return dynamics->position_dim(); }
  int measurement_dim() const { return observation ? observation->measurement_dim() : 0; }
  bool has_measurements() const { return observation != nullptr; }

  /// Throws Error(kInvalidInput) when the model violates its invariants:
  /// B(0) rank-deficient, R not SPD, eps negative, dimension mismatches.
  void validate() const;
};

struct Linearization {
  Matrix a_mat;  // df/dx at the nominal point
  Vector a_vec;  // f(nominal) - a_mat * nominal
};

Vector eval_drift(const ControlAffineModel& model, double t, const Vector& x);
Linearization linearize(const ControlAffineModel& model, const Vector& nominal, double t);
Matrix measurement_jacobian(const ControlAffineModel& model, const Vector& nominal);

}  // namespace beliefroad
