#include "beliefroad/brm.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <queue>
#include <set>
#include <thread>
#include <tuple>
#include <utility>

namespace beliefroad {

double chi_square_cdf(double x, int dof) {
  require(dof >= 1, "chi_square_cdf: dof must be positive");
  if (x <= 0.0) return 0.0;
  const double half = 0.5 * x;
  if (dof % 2 == 0) {
    double term = 1.0;
    double sum = 1.0;
    for (int j = 1; j < dof / 2; ++j) {
      term *= half / j;
      sum += term;
    }
    return 1.0 - std::exp(-half) * sum;
  }
  const double root = std::sqrt(x);
  double term = root;  // x^{(2j-1)/2} / (1 * 3 * ... * (2j-1)) at j = 1
  double sum = 0.0;
  for (int j = 1; j <= (dof - 1) / 2; ++j) {
    if (j > 1) term *= x / (2 * j - 1);
    sum += term;
  }
  return std::erf(std::sqrt(half)) - std::sqrt(2.0 / M_PI) * std::exp(-half) * sum;
}

double chi_square_quantile(double probability, int dof) {
  require(probability > 0.0 && probability < 1.0, "chi_square_quantile: probability must lie in (0, 1)");
  require(dof >= 1, "chi_square_quantile: dof must be positive");
  double lo = 0.0;
  double hi = static_cast<double>(dof);
  while (chi_square_cdf(hi, dof) < probability) hi *= 2.0;
  for (int k = 0; k < 200 && hi - lo > 1e-15 * hi; ++k) {
    const double mid = 0.5 * (lo + hi);
    (chi_square_cdf(mid, dof) < probability ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

void SamplerParams::validate() const {
  require(confidence > 0.0 && confidence < 1.0, "sampler: confidence must lie in (0, 1)");
  require(confidence_margin >= 0.0 && confidence_margin < 1.0, "sampler: confidence margin must lie in [0, 1)");
  require(clearance >= 0.0, "sampler: clearance must be nonnegative");
  require(velocity_variance > 0.0, "sampler: velocity variance must be positive");
  require(error_fraction > 0.0 && error_fraction < 1.0, "sampler: error fraction must lie in (0, 1)");
  require(neighbors >= 1 || radius > 0.0, "sampler: need a neighbor count or a radius");
  require(radius >= 0.0, "sampler: radius must be nonnegative");
  require(rejection_budget >= 1, "sampler: rejection budget must be positive");
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

namespace {

double boundary_distance(const SdfMap& map, const Vector& pos) {
  const Vector lo = map.lower_bound();
  const Vector hi = map.upper_bound();
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < pos.size(); ++i) best = std::min({best, pos[i] - lo[i], hi[i] - pos[i]});
  return best;
}

}  // namespace

BeliefNode make_node(const ControlAffineModel& model, const SdfMap& map, const SamplerParams& params, int id,
                     const Vector& position) {
  const int d = model.position_dim();
  const int n = model.state_dim();
  require(position.size() == d && map.dim() == d, "make_node: position dimension mismatch");
  BeliefNode node;
  node.id = id;
  node.mean = Vector::Zero(n);
  node.mean.head(d) = position;
  const double clear = map.contains(position) ? map.evaluate(position).value : -1.0;
  const double d_obs = std::min(clear, boundary_distance(map, position));
  node.feasible = clear > params.clearance && d_obs > 0.0;
  const double radius = std::max(d_obs, 0.0);
  const double q = chi_square_quantile(params.effective_confidence(), d);
  const double variance = std::max(radius * radius / q, 1e-6 * radius * radius);
  node.covariance = Matrix::Zero(n, n);
  node.covariance.topLeftCorner(d, d) = variance * Matrix::Identity(d, d);
  if (n > d) {
    node.covariance.bottomRightCorner(n - d, n - d) = params.velocity_variance * Matrix::Identity(n - d, n - d);
  }
  node.error_covariance = params.error_fraction * node.covariance;
  node.feasible = node.feasible && is_spd(node.covariance - node.error_covariance);
  return node;
}

BeliefNode sample_belief(const ControlAffineModel& model, const SdfMap& map, const SamplerParams& params, int id,
                         std::mt19937_64& rng) {
  const Vector lo = map.lower_bound();
  const Vector span = map.upper_bound() - lo;
  for (int attempt = 0; attempt < params.rejection_budget; ++attempt) {
    Vector pos(map.dim());
    for (int i = 0; i < map.dim(); ++i) pos[i] = lo[i] + uniform01(rng) * span[i];
    BeliefNode node = make_node(model, map, params, id, pos);
    if (node.feasible) return node;
  }
  throw Error(Failure::kInfeasible, "sample_belief: rejection budget exhausted, free space not found");
}

std::vector<int> nearest_neighbors(const std::vector<BeliefNode>& nodes, int index, int position_dim,
                                   const SamplerParams& params) {
  const Vector here = nodes[index].position(position_dim);
  std::vector<std::pair<double, int>> ranked;
  for (const auto& other : nodes) {
    if (other.id == nodes[index].id) continue;
    const double dist = (other.position(position_dim) - here).norm();
    if (params.radius > 0.0 && dist > params.radius) continue;
    ranked.emplace_back(dist, other.id);
  }
  std::sort(ranked.begin(), ranked.end());
  if (params.neighbors >= 1 && ranked.size() > static_cast<std::size_t>(params.neighbors)) {
    ranked.resize(params.neighbors);
  }
  std::vector<int> out;
  for (const auto& r : ranked) out.push_back(r.second);
  return out;
}

EdgeCost edge_cost(const TrajectoryDistribution& trajectory, const SdfMap& map, const CollisionCostParams& params) {
  const std::size_t count = trajectory.mean.size();
  require(count >= 2 && trajectory.covariance.size() == count, "edge_cost: trajectory is incomplete");
  const bool have_gain = trajectory.gain.size() == count && trajectory.feedforward.size() == count;
  EdgeCost cost;
  for (std::size_t i = 0; i < count; ++i) {
    const double weight = (i == 0 || i + 1 == count ? 0.5 : 1.0) * trajectory.grid.dt();
    const Eigen::LLT<Matrix> llt(trajectory.covariance[i]);
    if (llt.info() != Eigen::Success) {
      throw Error(Failure::kNumerical, "edge_cost: covariance is not positive definite");
    }
    const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    Vector input = Vector::Zero(0);
    if (have_gain) input = trajectory.gain[i] * trajectory.mean[i] + trajectory.feedforward[i];
    const double hinge = hinge_cost(map, params, trajectory.mean[i]).hinge;
    cost.control += weight * 0.5 * input.squaredNorm();
    cost.hinge += weight * hinge * hinge;
    cost.entropy -= weight * log_det;
  }
  return cost;
}

std::vector<std::vector<std::size_t>> BeliefGraph::adjacency() const {
  std::vector<std::vector<std::size_t>> out(nodes.size());
  for (std::size_t e = 0; e < edges.size(); ++e) out[edges[e].source].push_back(e);
  return out;
}

BeliefGraph connect_nodes(const ControlAffineModel& model, const SdfMap& map, const SamplerParams& sampler,
                          const PgcsParams& pgcs, const BuildOptions& options, std::vector<BeliefNode> nodes) {
  sampler.validate();
  pgcs.validate();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    require(nodes[i].id == static_cast<int>(i), "connect_nodes: ids must equal indices");
  }

  std::set<std::pair<int, int>> directed;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (int j : nearest_neighbors(nodes, static_cast<int>(i), model.position_dim(), sampler)) {
      directed.emplace(static_cast<int>(i), j);
      directed.emplace(j, static_cast<int>(i));
    }
  }
  const std::vector<std::pair<int, int>> tasks(directed.begin(), directed.end());

  struct Outcome {
    std::optional<BeliefEdge> edge;
    std::string reason;
    double seconds = 0.0;
  };
  std::vector<Outcome> outcomes(tasks.size());
  auto run = [&](std::size_t t) {
    const auto clock_start = std::chrono::steady_clock::now();
    const BeliefNode& src = nodes[tasks[t].first];
    const BeliefNode& dst = nodes[tasks[t].second];
    Outcome& out = outcomes[t];
    try {
      EdgeConnectionResult result =
          pgcs_connect(model, map, pgcs, {src.mean, src.covariance}, src.error_covariance, {dst.mean, dst.covariance});
      if (!collision_free(map, pgcs.collision, result.trajectory.mean)) {
        out.reason = "mean path in collision";
      } else if (result.terminal_mean_error > pgcs.residual_tolerance ||
                 result.terminal_covariance_error > pgcs.residual_tolerance) {
        out.reason = "terminal moments outside tolerance";
      } else {
        BeliefEdge edge;
        edge.source = src.id;
        edge.target = dst.id;
        edge.cost = edge_cost(result.trajectory, map, pgcs.collision);
        edge.converged = result.converged;
        edge.iterations = result.iterations;
        edge.trajectory = std::move(result.trajectory);
        out.edge = std::move(edge);
      }
    } catch (const Error& e) {
      out.reason = e.what();
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  };

  int workers = options.workers > 0 ? options.workers : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::max(1, std::min<int>(workers, static_cast<int>(std::max<std::size_t>(tasks.size(), 1))));
  const auto build_start = std::chrono::steady_clock::now();
  if (workers == 1) {
    for (std::size_t t = 0; t < tasks.size(); ++t) run(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < tasks.size(); t = next++) run(t);
      });
    }
    for (auto& th : pool) th.join();
  }

  BeliefGraph graph;
  graph.timing.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - build_start).count();
  graph.nodes = std::move(nodes);
  graph.seed = options.seed;
  graph.alpha = options.alpha;
  graph.timing.attempted = tasks.size();
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    graph.timing.edge_mean_seconds += outcomes[t].seconds;
    graph.timing.edge_max_seconds = std::max(graph.timing.edge_max_seconds, outcomes[t].seconds);
    if (outcomes[t].edge) {
      graph.edges.push_back(std::move(*outcomes[t].edge));
    } else {
      graph.rejected.push_back({tasks[t].first, tasks[t].second, outcomes[t].reason});
    }
  }
  if (!tasks.empty()) graph.timing.edge_mean_seconds /= static_cast<double>(tasks.size());
  graph.timing.retained = graph.edges.size();
  return graph;
}

BeliefGraph build_graph(const ControlAffineModel& model, const SdfMap& map, const SamplerParams& sampler,
                        const PgcsParams& pgcs, const BuildOptions& options, const Vector& start_position,
                        const Vector& goal_position) {
  sampler.validate();
  require(options.samples >= 0, "build_graph: sample count must be nonnegative");
  std::vector<BeliefNode> nodes;
  nodes.push_back(make_node(model, map, sampler, 0, start_position));
  nodes.push_back(make_node(model, map, sampler, 1, goal_position));
  if (!nodes[0].feasible) throw Error(Failure::kInfeasible, "start position is not in free space");
  if (!nodes[1].feasible) throw Error(Failure::kInfeasible, "goal position is not in free space");
  std::mt19937_64 rng(options.seed);
  for (int i = 0; i < options.samples; ++i) nodes.push_back(sample_belief(model, map, sampler, i + 2, rng));
  return connect_nodes(model, map, sampler, pgcs, options, std::move(nodes));
}

namespace {

void concatenate(const BeliefGraph& graph, PathResult& path) {
  double offset = 0.0;
  for (std::size_t k = 0; k < path.edges.size(); ++k) {
    const TrajectoryDistribution& traj = graph.edges[path.edges[k]].trajectory;
    for (std::size_t i = (k == 0 ? 0 : 1); i < traj.mean.size(); ++i) {
      path.times.push_back(offset + traj.grid.time(i));
      path.mean.push_back(traj.mean[i]);
      path.covariance.push_back(traj.covariance[i]);
      path.error_covariance.push_back(traj.error_covariance[i]);
    }
    offset += traj.grid.horizon();
  }
}

}  // namespace

PathResult search_path(const BeliefGraph& graph, int start, int goal, double alpha, const SearchOptions& options) {
  const int count = static_cast<int>(graph.nodes.size());
  require(start >= 0 && start < count && goal >= 0 && goal < count, "search_path: node id out of range");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> weight(graph.edges.size());
  bool negative = false;
  for (std::size_t e = 0; e < graph.edges.size(); ++e) {
    weight[e] = graph.edges[e].cost.total(alpha);
    require(std::isfinite(weight[e]), "search_path: non-finite edge cost");
    negative = negative || weight[e] < 0.0;
  }
  std::vector<double> dist(count, inf);
  std::vector<long> via(count, -1);
  dist[start] = 0.0;

  if (!negative) {
    const auto adjacency = graph.adjacency();
    auto heuristic = [&](int node) {
      if (options.heuristic_scale <= 0.0) return 0.0;
      const int d = options.position_dim;
      return options.heuristic_scale * (graph.nodes[node].mean.head(d) - graph.nodes[goal].mean.head(d)).norm();
    };
    // Entries are (f, node, g); an entry is stale once dist[node] < g.
    using Entry = std::tuple<double, int, double>;
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> open;
    open.emplace(heuristic(start), start, 0.0);
    while (!open.empty()) {
      const auto [f, node, g_node] = open.top();
      open.pop();
      if (g_node > dist[node]) continue;
      if (node == goal) break;
      for (std::size_t e : adjacency[node]) {
        const int next = graph.edges[e].target;
        const double g = g_node + weight[e];
        if (g < dist[next]) {
          dist[next] = g;
          via[next] = static_cast<long>(e);
          open.emplace(g + heuristic(next), next, g);
        }
      }
    }
  } else {
    for (int round = 0; round < count; ++round) {
      bool changed = false;
      for (std::size_t e = 0; e < graph.edges.size(); ++e) {
        const auto& edge = graph.edges[e];
        if (dist[edge.source] == inf) continue;
        const double g = dist[edge.source] + weight[e];
        if (g < dist[edge.target]) {
          if (round == count - 1) throw Error(Failure::kNumerical, "search_path: negative cycle in edge costs");
          dist[edge.target] = g;
          via[edge.target] = static_cast<long>(e);
          changed = true;
        }
      }
      if (!changed) break;
    }
  }

  PathResult path;
  if (dist[goal] == inf) {
    path.reason = "no path from start to goal";
    return path;
  }
  path.found = true;
  for (int node = goal; node != start;) {
    const auto& edge = graph.edges[via[node]];
    path.edges.push_back(static_cast<std::size_t>(via[node]));
    node = edge.source;
  }
  std::reverse(path.edges.begin(), path.edges.end());
  path.nodes.push_back(start);
  for (std::size_t e : path.edges) {
    const auto& edge = graph.edges[e];
    path.nodes.push_back(edge.target);
    path.cost.control += edge.cost.control;
    path.cost.hinge += edge.cost.hinge;
    path.cost.entropy += edge.cost.entropy;
    path.total += weight[e];
  }
  concatenate(graph, path);
  return path;
}

}  // namespace beliefroad
