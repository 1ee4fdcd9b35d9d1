#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "beliefroad/pgcs.hpp"

namespace beliefroad {

/// Quantile of the chi-square distribution with integer `dof`, from the
/// closed-form CDF inverted by bisection.
double chi_square_quantile(double probability, int dof);
double chi_square_cdf(double x, int dof);

struct SamplerParams {
  double confidence = 0.95;          // P_conf
  double clearance = 0.1;            // node requires S(pos) > clearance
  double velocity_variance = 0.05;   // sigma_v^2
  double error_fraction = 0.25;      // beta, P0 = beta * Sigma
  double confidence_margin = 0.2;    // quantile taken at P_conf + margin (1 - P_conf)
  int neighbors = 4;                 // k
  double radius = 0.0;               // neighbor radius, 0 disables the filter
  int rejection_budget = 10000;

  void validate() const;
  /// Probability at which the chi-square quantile is evaluated.
  double effective_confidence() const { return confidence + confidence_margin * (1.0 - confidence); }
};

struct BeliefNode {
  int id = 0;
  Vector mean;
  Matrix covariance;
  Matrix error_covariance;
  bool feasible = false;

  Vector position(int dim) const { return mean.head(dim); }
};

/// Belief at `position` with zero velocity. d_obs is the smaller of the SDF
/// value and the distance to the map boundary; the position covariance is
/// max(d_obs^2 / q, 1e-6 d_obs^2) I with q the chi-square quantile.
BeliefNode make_node(const ControlAffineModel& model, const SdfMap& map, const SamplerParams& params, int id,
                     const Vector& position);

/// Uniform in [0, 1) from the top 53 bits of one engine draw.
double uniform01(std::mt19937_64& rng);

/// Rejection-samples a node whose position clears the obstacles. Throws
/// Error(kInfeasible) when the rejection budget is exhausted.
BeliefNode sample_belief(const ControlAffineModel& model, const SdfMap& map, const SamplerParams& params, int id,
                         std::mt19937_64& rng);

/// Indices of the k nodes nearest to nodes[index] by position distance,
/// ties by id, optionally restricted to the radius.
std::vector<int> nearest_neighbors(const std::vector<BeliefNode>& nodes, int index, int position_dim,
                                   const SamplerParams& params);

struct EdgeCost {
  double control = 0.0;  // 1/2 int |K x + d|^2 dt along the mean
  double hinge = 0.0;    // int hinge^2 dt
  double entropy = 0.0;  // -int log det Sigma dt
  double total(double alpha) const { return control + hinge + alpha * entropy; }
};

/// Trapezoid integrals over the knots of the trajectory grid.
EdgeCost edge_cost(const TrajectoryDistribution& trajectory, const SdfMap& map, const CollisionCostParams& params);

struct BeliefEdge {
  int source = 0;
  int target = 0;
  TrajectoryDistribution trajectory;
  EdgeCost cost;
  bool converged = false;
  int iterations = 0;
};

struct RejectedEdge {
  int source = 0;
  int target = 0;
  std::string reason;
};

struct BuildTiming {
  double total_seconds = 0.0;
  double edge_mean_seconds = 0.0;
  double edge_max_seconds = 0.0;
  std::size_t attempted = 0;
  std::size_t retained = 0;
};

struct BuildOptions {
  double alpha = 0.4;
  int samples = 30;
  std::uint64_t seed = 1;
  int workers = 1;  // 0 uses the hardware concurrency
};

struct BeliefGraph {
  std::vector<BeliefNode> nodes;  // id == index; start is 0, goal is 1
  std::vector<BeliefEdge> edges;  // sorted by (source, target)
  std::vector<RejectedEdge> rejected;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  BuildTiming timing;

  /// Edge indices leaving each node.
  std::vector<std::vector<std::size_t>> adjacency() const;
};

/// Samples nodes, connects every node with its neighbors in both directions
/// and keeps edges whose mean path is collision-free and whose terminal
/// moments are within the pgcs residual tolerance. The output does not
/// depend on the worker count.
BeliefGraph build_graph(const ControlAffineModel& model, const SdfMap& map, const SamplerParams& sampler,
                        const PgcsParams& pgcs, const BuildOptions& options, const Vector& start_position,
                        const Vector& goal_position);

/// Graph construction over caller-supplied nodes (ids must equal indices).
BeliefGraph connect_nodes(const ControlAffineModel& model, const SdfMap& map, const SamplerParams& sampler,
                          const PgcsParams& pgcs, const BuildOptions& options, std::vector<BeliefNode> nodes);

struct PathResult {
  bool found = false;
  std::string reason;
  std::vector<int> nodes;
  std::vector<std::size_t> edges;
  EdgeCost cost;
  double total = 0.0;
  std::vector<double> times;
  std::vector<Vector> mean;
  std::vector<Matrix> covariance;
  std::vector<Matrix> error_covariance;
};

struct SearchOptions {
  double heuristic_scale = 0.0;  // > 0 enables a Euclidean heuristic, not necessarily admissible
  int position_dim = 2;
};

/// Minimum total-cost path under edge totals control + hinge + alpha entropy.
/// Dijkstra (A* with a heuristic) for nonnegative costs, Bellman-Ford
/// otherwise; a reachable negative cycle throws Error(kNumerical).
PathResult search_path(const BeliefGraph& graph, int start, int goal, double alpha, const SearchOptions& options = {});

}  // namespace beliefroad
