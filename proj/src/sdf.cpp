#include "beliefroad/sdf.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

namespace beliefroad {

namespace {

// Slack when deciding whether a query lies outside the grid box.
constexpr double kBoundsSlack = 1e-12;

template <typename T>
T to_little_endian(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    std::reverse(bytes, bytes + sizeof(T));
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }
}

template <typename T>
void write_le(std::ofstream& out, T value) {
  value = to_little_endian(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error(Failure::kInvalidInput, "sdf sidecar: truncated file");
  return to_little_endian(value);
}

}  // namespace

double signed_distance(const Obstacle& obstacle, const Vector& pos) {
  if (const auto* sphere = std::get_if<Sphere>(&obstacle)) {
    return (pos - sphere->center).norm() - sphere->radius;
  }
  const auto& box = std::get<Box>(obstacle);
  const Vector center = 0.5 * (box.min_corner + box.max_corner);
  const Vector half = 0.5 * (box.max_corner - box.min_corner);
  const Vector q = (pos - center).cwiseAbs() - half;
  const double outside = q.cwiseMax(0.0).norm();
  const double inside = std::min(q.maxCoeff(), 0.0);
  return outside + inside;
}

void ObstacleSet::validate() const {
  require(dim == 2 || dim == 3, "obstacle set dimension must be 2 or 3");
  for (const auto& obstacle : obstacles) {
    if (const auto* sphere = std::get_if<Sphere>(&obstacle)) {
      require(sphere->center.size() == dim, "sphere center has wrong dimension");
      require(std::isfinite(sphere->radius) && sphere->radius > 0.0, "sphere radius must be > 0");
    } else {
      const auto& box = std::get<Box>(obstacle);
      require(box.min_corner.size() == dim && box.max_corner.size() == dim, "box corners have wrong dimension");
      require((box.min_corner.array() < box.max_corner.array()).all(), "box min corner must be < max corner");
    }
  }
}

double ObstacleSet::signed_distance(const Vector& pos, double empty_value) const {
  double best = empty_value;
  for (const auto& obstacle : obstacles) best = std::min(best, beliefroad::signed_distance(obstacle, pos));
  return best;
}

SdfMap::SdfMap(int dim, Vector origin, double cell_size, std::vector<long> extents, std::vector<double> values)
    : dim_(dim),
      origin_(std::move(origin)),
      cell_size_(cell_size),
      extents_(std::move(extents)),
      values_(std::move(values)) {
  require(dim_ == 2 || dim_ == 3, "sdf dimension must be 2 or 3");
  require(origin_.size() == dim_, "sdf origin has wrong dimension");
  require(std::isfinite(cell_size_) && cell_size_ > 0.0, "sdf cell size must be positive");
  require(static_cast<int>(extents_.size()) == dim_, "sdf extents have wrong dimension");
  std::size_t count = 1;
  for (long e : extents_) {
    require(e >= 2, "sdf extents must be >= 2 per axis");
    count *= static_cast<std::size_t>(e);
  }
  require(values_.size() == count, "sdf value count does not match extents");
  for (double v : values_) require(std::isfinite(v), "sdf values must be finite");
}

Vector SdfMap::upper_bound() const {
  Vector upper = origin_;
  for (int k = 0; k < dim_; ++k) upper[k] += static_cast<double>(extents_[k] - 1) * cell_size_;
  return upper;
}

bool SdfMap::contains(const Vector& pos) const {
  const Vector upper = upper_bound();
  for (int k = 0; k < dim_; ++k) {
    if (pos[k] < origin_[k] - kBoundsSlack || pos[k] > upper[k] + kBoundsSlack) return false;
  }
  return true;
}

std::size_t SdfMap::flat_index(const std::vector<long>& index) const {
  std::size_t flat = 0;
  for (int k = 0; k < dim_; ++k) {
    flat = flat * static_cast<std::size_t>(extents_[k]) + static_cast<std::size_t>(index[k]);
  }
  return flat;
}

double SdfMap::node_value(const std::vector<long>& index) const { return values_[flat_index(index)]; }

Vector SdfMap::node_position(const std::vector<long>& index) const {
  Vector pos = origin_;
  for (int k = 0; k < dim_; ++k) pos[k] += static_cast<double>(index[k]) * cell_size_;
  return pos;
}

double SdfMap::cell_value(const std::vector<long>& cell, const std::vector<double>& frac) const {
  double sum = 0.0;
  std::vector<long> corner(dim_);
  for (int mask = 0; mask < (1 << dim_); ++mask) {
    double weight = 1.0;
    for (int k = 0; k < dim_; ++k) {
      const bool upper = (mask >> k) & 1;
      corner[k] = cell[k] + (upper ? 1 : 0);
      weight *= upper ? frac[k] : 1.0 - frac[k];
    }
    sum += weight * node_value(corner);
  }
  return sum;
}

double SdfMap::cell_derivative(const std::vector<long>& cell, const std::vector<double>& frac, int axis) const {
  double sum = 0.0;
  std::vector<long> corner(dim_);
  for (int mask = 0; mask < (1 << dim_); ++mask) {
    double weight = 1.0;
    for (int k = 0; k < dim_; ++k) {
      const bool upper = (mask >> k) & 1;
      corner[k] = cell[k] + (upper ? 1 : 0);
      if (k == axis) {
        weight *= upper ? 1.0 : -1.0;
      } else {
        weight *= upper ? frac[k] : 1.0 - frac[k];
      }
    }
    sum += weight * node_value(corner);
  }
  return sum / cell_size_;
}

SdfSample SdfMap::evaluate(const Vector& pos) const {
  require(pos.size() >= dim_, "sdf query has too few coordinates");
  SdfSample sample;
  sample.gradient = Vector::Zero(dim_);
  std::vector<long> cell(dim_);
  std::vector<double> frac(dim_);
  for (int k = 0; k < dim_; ++k) {
    const double top = static_cast<double>(extents_[k] - 1);
    double u = (pos[k] - origin_[k]) / cell_size_;
    if (!(u >= -kBoundsSlack && u <= top + kBoundsSlack)) sample.out_of_bounds = true;
    if (!std::isfinite(u)) u = 0.0;
    u = std::clamp(u, 0.0, top);
    const long i = std::min(static_cast<long>(std::floor(u)), extents_[k] - 2);
    cell[k] = i;
    frac[k] = u - static_cast<double>(i);
  }
  sample.value = cell_value(cell, frac);
  for (int k = 0; k < dim_; ++k) {
    double g = cell_derivative(cell, frac, k);
    if (frac[k] == 0.0 && cell[k] > 0) {
      std::vector<long> left = cell;
      std::vector<double> left_frac = frac;
      left[k] -= 1;
      left_frac[k] = 1.0;
      g = 0.5 * (g + cell_derivative(left, left_frac, k));
    }
    sample.gradient[k] = g;
  }
  return sample;
}

SdfMap build_sdf(const ObstacleSet& obstacles, const GridSpec& grid, double empty_value) {
  obstacles.validate();
  require(std::isfinite(grid.cell_size) && grid.cell_size > 0.0, "build_sdf: cell size must be positive");
  require(static_cast<int>(grid.extents.size()) == obstacles.dim, "build_sdf: extents dimension mismatch");
  require(grid.origin.size() == obstacles.dim, "build_sdf: origin dimension mismatch");
  std::size_t count = 1;
  for (long e : grid.extents) {
    require(e >= 2, "build_sdf: extents must be >= 2 per axis");
    count *= static_cast<std::size_t>(e);
  }
  const int dim = obstacles.dim;
  std::vector<double> values(count);
  std::vector<long> index(dim, 0);
  Vector pos(dim);
  for (std::size_t flat = 0; flat < count; ++flat) {
    std::size_t rem = flat;
    for (int k = dim - 1; k >= 0; --k) {
      index[k] = static_cast<long>(rem % static_cast<std::size_t>(grid.extents[k]));
      rem /= static_cast<std::size_t>(grid.extents[k]);
      pos[k] = grid.origin[k] + static_cast<double>(index[k]) * grid.cell_size;
    }
    values[flat] = obstacles.signed_distance(pos, empty_value);
  }
  return SdfMap(dim, grid.origin, grid.cell_size, grid.extents, std::move(values));
}

void save_sdf(const SdfMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Failure::kInvalidInput, "cannot write sdf sidecar " + path.string());
  write_le<std::int64_t>(out, map.dim());
  for (long e : map.extents()) write_le<std::int64_t>(out, e);
  for (int k = 0; k < map.dim(); ++k) write_le<double>(out, map.origin()[k]);
  write_le<double>(out, map.cell_size());
  for (double v : map.values()) write_le<double>(out, v);
}

SdfMap load_sdf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Failure::kInvalidInput, "cannot read sdf sidecar " + path.string());
  const auto dim = read_le<std::int64_t>(in);
  require(dim == 2 || dim == 3, "sdf sidecar: bad dimension");
  std::vector<long> extents(static_cast<std::size_t>(dim));
  std::size_t count = 1;
  for (auto& e : extents) {
    e = static_cast<long>(read_le<std::int64_t>(in));
    require(e >= 2 && e < (1L << 24), "sdf sidecar: bad extent");
    count *= static_cast<std::size_t>(e);
  }
  Vector origin(dim);
  for (int k = 0; k < dim; ++k) origin[k] = read_le<double>(in);
  const double cell = read_le<double>(in);
  std::vector<double> values(count);
  for (auto& v : values) v = read_le<double>(in);
  return SdfMap(static_cast<int>(dim), origin, cell, std::move(extents), std::move(values));
}

void CollisionCostParams::validate() const {
  require(std::isfinite(margin) && margin >= 0.0, "collision margin must be >= 0");
  require(std::isfinite(weight) && weight >= 0.0, "obstacle weight must be >= 0");
  require(std::isfinite(threshold), "collision threshold must be finite");
}

HingeCost hinge_cost(const SdfMap& map, const CollisionCostParams& params, const Vector& state) {
  const int n = static_cast<int>(state.size());
  const int d = map.dim();
  require(n >= d, "hinge_cost: state has fewer entries than the workspace dimension");
  const SdfSample s = map.evaluate(state.head(d));
  HingeCost cost;
  cost.distance = s.value;
  cost.out_of_bounds = s.out_of_bounds;
  cost.hinge = std::max(params.margin - s.value, 0.0);
  cost.value = params.weight * cost.hinge * cost.hinge;
  cost.gradient = Vector::Zero(n);
  cost.gn_hessian = Matrix::Zero(n, n);
  if (cost.hinge > 0.0) {
    cost.gradient.head(d) = -2.0 * params.weight * cost.hinge * s.gradient;
    cost.gn_hessian.topLeftCorner(d, d) = 2.0 * params.weight * s.gradient * s.gradient.transpose();
  }
  return cost;
}

bool collision_free(const SdfMap& map, const CollisionCostParams& params, const std::vector<Vector>& mean_path) {
  if (mean_path.empty()) return true;
  const int d = map.dim();
  auto clear = [&](const Vector& pos) {
    const SdfSample s = map.evaluate(pos);
    return !s.out_of_bounds && s.value > params.threshold;
  };
  for (std::size_t i = 0; i < mean_path.size(); ++i) {
    if (!clear(mean_path[i].head(d))) return false;
    if (i + 1 < mean_path.size()) {
      const Vector mid = 0.5 * (mean_path[i].head(d) + mean_path[i + 1].head(d));
      if (!clear(mid)) return false;
    }
  }
  return true;
}

}  // namespace beliefroad
