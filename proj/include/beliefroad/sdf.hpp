#pragma once

#include <filesystem>
#include <variant>
#include <vector>

#include "beliefroad/types.hpp"

namespace beliefroad {

struct Box {
  Vector min_corner;
  Vector max_corner;
};

struct Sphere {
  Vector center;
  double radius = 0.0;
};

using Obstacle = std::variant<Box, Sphere>;

/// Exact signed distance to one primitive: positive outside, negative inside.
double signed_distance(const Obstacle& obstacle, const Vector& pos);

struct ObstacleSet {
  int dim = 2;
  std::vector<Obstacle> obstacles;

  /// Throws on min >= max, non-positive radius, or dimension mismatch.
  void validate() const;
  /// Min over primitives of the exact signed distance; `empty_value` if none.
  double signed_distance(const Vector& pos, double empty_value) const;
};

struct GridSpec {
  Vector origin;
  double cell_size = 0.0;
  std::vector<long> extents;  // node counts per axis
};

struct SdfSample {
  double value = 0.0;
  Vector gradient;
  bool out_of_bounds = false;
};

/// Signed distance values on a regular grid of nodes, stored row-major
/// (first axis slowest). Queries use multilinear interpolation.
class SdfMap {
 public:
  SdfMap(int dim, Vector origin, double cell_size, std::vector<long> extents, std::vector<double> values);

  int dim() const { return dim_; }
  const Vector& origin() const { return origin_; }
  double cell_size() const { return cell_size_; }
  const std::vector<long>& extents() const { return extents_; }
  const std::vector<double>& values() const { return values_; }

  Vector lower_bound() const { return origin_; }
  Vector upper_bound() const;
  bool contains(const Vector& pos) const;

  double node_value(const std::vector<long>& index) const;
  Vector node_position(const std::vector<long>& index) const;

  /// Interpolated value and the analytic gradient of the interpolant. On a
  /// grid plane the gradient component across that plane is the average of
  /// the two adjacent cells. Positions outside the box are clamped onto it
  /// and flagged.
  SdfSample evaluate(const Vector& pos) const;

 private:
  std::size_t flat_index(const std::vector<long>& index) const;
  double cell_value(const std::vector<long>& cell, const std::vector<double>& frac) const;
  double cell_derivative(const std::vector<long>& cell, const std::vector<double>& frac, int axis) const;

  int dim_;
  Vector origin_;
  double cell_size_;
  std::vector<long> extents_;
  std::vector<double> values_;
};

inline constexpr double kEmptyMapDistance = 1.0e6;

SdfMap build_sdf(const ObstacleSet& obstacles, const GridSpec& grid, double empty_value = kEmptyMapDistance);

inline SdfSample sdf_value_grad(const SdfMap& map, const Vector& pos) { return map.evaluate(pos); }

/// Binary sidecar: int64 dim, int64 extents[dim], f64 origin[dim], f64 cell
/// size, then f64 values row-major. All little-endian.
void save_sdf(const SdfMap& map, const std::filesystem::path& path);
SdfMap load_sdf(const std::filesystem::path& path);

struct CollisionCostParams {
  double margin = 0.5;      // hinge activates when S < margin
  double weight = 1.0;      // sigma_obs
  double threshold = 0.0;   // collision when S <= threshold
  void validate() const;
};

struct HingeCost {
  double value = 0.0;      // weight * hinge^2
  double hinge = 0.0;      // max(margin - S, 0)
  double distance = 0.0;   // S(pos)
  Vector gradient;         // d value / d state
  Matrix gn_hessian;       // 2 weight grad_S grad_S^T, lifted; zero when hinge == 0
  bool out_of_bounds = false;
};

/// Collision cost on the leading position block of `state`.
HingeCost hinge_cost(const SdfMap& map, const CollisionCostParams& params, const Vector& state);

/// True iff S(pos) > threshold at every knot and every midpoint between
/// consecutive knots. Out-of-bounds positions count as collisions.
bool collision_free(const SdfMap& map, const CollisionCostParams& params, const std::vector<Vector>& mean_path);

}  // namespace beliefroad
