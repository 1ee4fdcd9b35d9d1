#include "beliefroad/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace beliefroad {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& what) { throw Error(Failure::kInvalidInput, what); }

// Reads optional keys of one object and rejects any key nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) bad(where_ + ": expected an object");
  }

  template <typename T>
  bool get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return false;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      bad(where_ + "." + key + ": " + e.what());
    }
    return true;
  }

  template <typename T>
  T required(const std::string& key) {
    T out{};
    if (!get(key, out)) bad(where_ + ": missing key \"" + key + "\"");
    return out;
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& required_child(const std::string& key) {
    const json* c = child(key);
    if (!c) bad(where_ + ": missing key \"" + key + "\"");
    return *c;
  }

  const std::string& where() const { return where_; }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) bad(where_ + ": unknown key \"" + item.key() + "\"");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void check_schema(ObjectReader& reader) {
  const int version = reader.required<int>("schema_version");
  if (version != kSchemaVersion)
    bad(reader.where() + ": unsupported schema_version " + std::to_string(version));
}

json vec_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

json mat_json(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

Vector vec_from(const json& j, const std::string& where) {
  if (!j.is_array()) bad(where + ": expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) bad(where + ": expected an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

Matrix mat_from(const json& j, const std::string& where) {
  if (!j.is_array()) bad(where + ": expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows == 0 ? 0 : static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Vector row = vec_from(j[static_cast<std::size_t>(r)], where);
    if (row.size() != cols) bad(where + ": ragged matrix");
    m.row(r) = row.transpose();
  }
  return m;
}

template <typename T, typename F>
json list_json(const std::vector<T>& items, F&& f) {
  json out = json::array();
  for (const auto& item : items) out.push_back(f(item));
  return out;
}

template <typename T, typename F>
std::vector<T> list_from(const json& j, const std::string& where, F&& f) {
  if (!j.is_array()) bad(where + ": expected an array");
  std::vector<T> out;
  out.reserve(j.size());
  for (const auto& item : j) out.push_back(f(item));
  return out;
}

json cost_json(const EdgeCost& c) { return {{"control", c.control}, {"hinge", c.hinge}, {"entropy", c.entropy}}; }

EdgeCost cost_from(const json& j, const std::string& where) {
  ObjectReader r(j, where);
  EdgeCost c;
  c.control = r.required<double>("control");
  c.hinge = r.required<double>("hinge");
  c.entropy = r.required<double>("entropy");
  r.finish();
  return c;
}

json obstacle_json(const Obstacle& obstacle) {
  if (const auto* box = std::get_if<Box>(&obstacle))
    return {{"type", "box"}, {"min", vec_json(box->min_corner)}, {"max", vec_json(box->max_corner)}};
  const auto& sphere = std::get<Sphere>(obstacle);
  return {{"type", "sphere"}, {"center", vec_json(sphere.center)}, {"radius", sphere.radius}};
}

Obstacle obstacle_from(const json& j) {
  ObjectReader r(j, "obstacle");
  const auto type = r.required<std::string>("type");
  if (type == "box") {
    Box box{vec_from(r.required_child("min"), "obstacle.min"), vec_from(r.required_child("max"), "obstacle.max")};
    r.finish();
    return box;
  }
  if (type == "sphere" || type == "circle") {
    Sphere sphere{vec_from(r.required_child("center"), "obstacle.center"), r.required<double>("radius")};
    r.finish();
    return sphere;
  }
  bad("obstacle: unknown type \"" + type + "\"");
}

}  // namespace

PlannerConfig::PlannerConfig() {
  pgcs.collision.margin = 0.3;
  pgcs.collision.weight = 1000.0;
}

void PlannerConfig::validate() const {
  require(model.type == "double_integrator" || model.type == "drag_double_integrator",
          "config: unknown model type \"" + model.type + "\"");
  require(model.dim >= 1 && model.dim <= 3, "config: model.dim must be 1, 2 or 3");
  require(model.type != "drag_double_integrator" || model.drag_coefficient >= 0.0,
          "config: drag_coefficient must be nonnegative");
  require(model.noise_intensity >= 0.0, "config: noise_intensity must be nonnegative");
  require(model.observation == "position" || model.observation == "full" || model.observation == "range" ||
              model.observation == "none",
          "config: unknown observation \"" + model.observation + "\"");
  require(model.observation == "none" || model.measurement_noise > 0.0, "config: measurement_noise must be positive");
  pgcs.validate();
  sampler.validate();
  require(samples >= 0, "config: samples must be nonnegative");
  require(std::isfinite(alpha), "config: alpha must be finite");
  require(workers >= 0, "config: workers must be nonnegative");
  require(start.size() == 0 || start.size() == model.dim, "config: start has the wrong dimension");
  require(goal.size() == 0 || goal.size() == model.dim, "config: goal has the wrong dimension");
}

ControlAffineModel PlannerConfig::make_model() const {
  validate();
  ControlAffineModel m;
  if (model.type == "double_integrator")
    m.dynamics = LinearDynamics::double_integrator(model.dim);
  else
    m.dynamics = std::make_shared<DragDoubleIntegrator>(model.dim, model.drag_coefficient);
  const int n = m.dynamics->state_dim();
  if (model.observation == "position")
    m.observation = LinearObservation::position_only(n, model.dim);
  else if (model.observation == "full")
    m.observation = LinearObservation::full_state(n);
  else if (model.observation == "range")
    m.observation = std::make_shared<RangeObservation>(n, model.dim);
  m.noise_intensity = model.noise_intensity;
  if (m.observation)
    m.measurement_noise = model.measurement_noise * Matrix::Identity(m.measurement_dim(), m.measurement_dim());
  m.validate();
  return m;
}

BuildOptions PlannerConfig::build_options() const {
  BuildOptions options;
  options.alpha = alpha;
  options.samples = samples;
  options.seed = seed;
  options.workers = workers;
  return options;
}

json to_json(const PlannerConfig& c) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["model"] = {{"type", c.model.type},
                {"dim", c.model.dim},
                {"drag_coefficient", c.model.drag_coefficient},
                {"noise_intensity", c.model.noise_intensity},
                {"observation", c.model.observation},
                {"measurement_noise", c.model.measurement_noise}};
  j["grid"] = {{"horizon", c.pgcs.grid.horizon()}, {"steps", c.pgcs.grid.steps()}};
  j["pgcs"] = {{"step_size", c.pgcs.step_size},
               {"max_iterations", c.pgcs.max_iterations},
               {"tolerance", c.pgcs.tolerance},
               {"residual_tolerance", c.pgcs.residual_tolerance},
               {"divergence_bound", c.pgcs.divergence_bound},
               {"innovation_diffusion", c.pgcs.innovation_diffusion},
               {"shooting_max_iterations", c.pgcs.shooting.max_iterations},
               {"shooting_tolerance", c.pgcs.shooting.tolerance}};
  j["collision"] = {{"margin", c.pgcs.collision.margin},
                    {"weight", c.pgcs.collision.weight},
                    {"threshold", c.pgcs.collision.threshold}};
  j["sampler"] = {{"confidence", c.sampler.confidence},
                  {"clearance", c.sampler.clearance},
                  {"velocity_variance", c.sampler.velocity_variance},
                  {"error_fraction", c.sampler.error_fraction},
                  {"confidence_margin", c.sampler.confidence_margin},
                  {"neighbors", c.sampler.neighbors},
                  {"radius", c.sampler.radius},
                  {"rejection_budget", c.sampler.rejection_budget},
                  {"samples", c.samples}};
  j["alpha"] = c.alpha;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  if (c.start.size() > 0) j["start"] = vec_json(c.start);
  if (c.goal.size() > 0) j["goal"] = vec_json(c.goal);
  return j;
}

PlannerConfig config_from_json(const json& j) {
  PlannerConfig c;
  ObjectReader top(j, "config");
  check_schema(top);
  if (const json* m = top.child("model")) {
    ObjectReader r(*m, "config.model");
    r.get("type", c.model.type);
    r.get("dim", c.model.dim);
    r.get("drag_coefficient", c.model.drag_coefficient);
    r.get("noise_intensity", c.model.noise_intensity);
    r.get("observation", c.model.observation);
    r.get("measurement_noise", c.model.measurement_noise);
    r.finish();
  }
  if (const json* g = top.child("grid")) {
    ObjectReader r(*g, "config.grid");
    double horizon = c.pgcs.grid.horizon();
    int steps = c.pgcs.grid.steps();
    r.get("horizon", horizon);
    r.get("steps", steps);
    r.finish();
    c.pgcs.grid = TimeGrid(horizon, steps);
  }
  if (const json* p = top.child("pgcs")) {
    ObjectReader r(*p, "config.pgcs");
    r.get("step_size", c.pgcs.step_size);
    r.get("max_iterations", c.pgcs.max_iterations);
    r.get("tolerance", c.pgcs.tolerance);
    r.get("residual_tolerance", c.pgcs.residual_tolerance);
    r.get("divergence_bound", c.pgcs.divergence_bound);
    r.get("innovation_diffusion", c.pgcs.innovation_diffusion);
    r.get("shooting_max_iterations", c.pgcs.shooting.max_iterations);
    r.get("shooting_tolerance", c.pgcs.shooting.tolerance);
    r.finish();
  }
  if (const json* p = top.child("collision")) {
    ObjectReader r(*p, "config.collision");
    r.get("margin", c.pgcs.collision.margin);
    r.get("weight", c.pgcs.collision.weight);
    r.get("threshold", c.pgcs.collision.threshold);
    r.finish();
  }
  if (const json* p = top.child("sampler")) {
    ObjectReader r(*p, "config.sampler");
    r.get("confidence", c.sampler.confidence);
    r.get("clearance", c.sampler.clearance);
    r.get("velocity_variance", c.sampler.velocity_variance);
    r.get("error_fraction", c.sampler.error_fraction);
    r.get("confidence_margin", c.sampler.confidence_margin);
    r.get("neighbors", c.sampler.neighbors);
    r.get("radius", c.sampler.radius);
    r.get("rejection_budget", c.sampler.rejection_budget);
    r.get("samples", c.samples);
    r.finish();
  }
  top.get("alpha", c.alpha);
  top.get("seed", c.seed);
  top.get("workers", c.workers);
  if (const json* s = top.child("start")) c.start = vec_from(*s, "config.start");
  if (const json* s = top.child("goal")) c.goal = vec_from(*s, "config.goal");
  top.finish();
  c.validate();
  return c;
}

json to_json(const MapFile& map) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["dim"] = map.obstacles.dim;
  j["obstacles"] = list_json(map.obstacles.obstacles, obstacle_json);
  j["grid"] = {{"origin", vec_json(map.grid.origin)},
               {"cell_size", map.grid.cell_size},
               {"extents", map.grid.extents}};
  if (map.sdf_cache) j["sdf_cache"] = *map.sdf_cache;
  return j;
}

MapFile map_from_json(const json& j) {
  MapFile map;
  ObjectReader top(j, "map");
  check_schema(top);
  map.obstacles.dim = top.required<int>("dim");
  if (const json* obstacles = top.child("obstacles"))
    map.obstacles.obstacles = list_from<Obstacle>(*obstacles, "map.obstacles", obstacle_from);
  ObjectReader g(top.required_child("grid"), "map.grid");
  map.grid.origin = vec_from(g.required_child("origin"), "map.grid.origin");
  map.grid.cell_size = g.required<double>("cell_size");
  map.grid.extents = g.required<std::vector<long>>("extents");
  g.finish();
  std::string cache;
  if (top.get("sdf_cache", cache)) map.sdf_cache = cache;
  top.finish();
  map.obstacles.validate();
  require(map.grid.origin.size() == map.obstacles.dim, "map.grid.origin: wrong dimension");
  require(static_cast<int>(map.grid.extents.size()) == map.obstacles.dim, "map.grid.extents: wrong dimension");
  return map;
}

SdfMap load_sdf_for(const MapFile& map, const std::filesystem::path& map_path) {
  if (!map.sdf_cache) return build_sdf(map.obstacles, map.grid);
  const auto cache = map_path.parent_path() / *map.sdf_cache;
  if (std::filesystem::exists(cache)) {
    SdfMap cached = load_sdf(cache);
    if (cached.dim() == map.obstacles.dim && cached.extents() == map.grid.extents &&
        cached.origin() == map.grid.origin && cached.cell_size() == map.grid.cell_size)
      return cached;
  }
  SdfMap built = build_sdf(map.obstacles, map.grid);
  save_sdf(built, cache);
  return built;
}

json to_json(const TrajectoryDistribution& t) {
  json j;
  j["horizon"] = t.grid.horizon();
  j["steps"] = t.grid.steps();
  j["mean"] = list_json(t.mean, vec_json);
  j["covariance"] = list_json(t.covariance, mat_json);
  j["error_covariance"] = list_json(t.error_covariance, mat_json);
  j["gain"] = list_json(t.gain, mat_json);
  j["feedforward"] = list_json(t.feedforward, vec_json);
  return j;
}

TrajectoryDistribution trajectory_from_json(const json& j) {
  ObjectReader r(j, "trajectory");
  TrajectoryDistribution t;
  const double horizon = r.required<double>("horizon");
  t.grid = TimeGrid(horizon, r.required<int>("steps"));
  auto vecs = [&](const char* key) {
    return list_from<Vector>(r.required_child(key), key, [&](const json& v) { return vec_from(v, key); });
  };
  auto mats = [&](const char* key) {
    return list_from<Matrix>(r.required_child(key), key, [&](const json& m) { return mat_from(m, key); });
  };
  t.mean = vecs("mean");
  t.covariance = mats("covariance");
  t.error_covariance = mats("error_covariance");
  t.gain = mats("gain");
  t.feedforward = vecs("feedforward");
  r.finish();
  const std::size_t knots = t.grid.knots();
  require(t.mean.size() == knots && t.covariance.size() == knots && t.error_covariance.size() == knots &&
              t.gain.size() == knots && t.feedforward.size() == knots,
          "trajectory: series length differs from the knot count");
  for (std::size_t i = 0; i < knots; ++i) t.estimate_covariance.push_back(t.covariance[i] - t.error_covariance[i]);
  return t;
}

json to_json(const GraphFile& file) {
  const BeliefGraph& g = file.graph;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "graph";
  j["seed"] = g.seed;
  j["alpha"] = g.alpha;
  j["position_dim"] = file.position_dim;
  j["map"] = to_json(file.map);
  j["nodes"] = list_json(g.nodes, [](const BeliefNode& n) {
    return json{{"id", n.id},
                {"feasible", n.feasible},
                {"mean", vec_json(n.mean)},
                {"covariance", mat_json(n.covariance)},
                {"error_covariance", mat_json(n.error_covariance)}};
  });
  j["edges"] = list_json(g.edges, [](const BeliefEdge& e) {
    return json{{"source", e.source},
                {"target", e.target},
                {"converged", e.converged},
                {"iterations", e.iterations},
                {"cost", cost_json(e.cost)},
                {"trajectory", to_json(e.trajectory)}};
  });
  j["rejected"] = list_json(g.rejected, [](const RejectedEdge& e) {
    return json{{"source", e.source}, {"target", e.target}, {"reason", e.reason}};
  });
  return j;
}

GraphFile graph_from_json(const json& j) {
  GraphFile file;
  ObjectReader top(j, "graph");
  check_schema(top);
  if (top.required<std::string>("kind") != "graph") bad("graph: kind is not \"graph\"");
  BeliefGraph& g = file.graph;
  g.seed = top.required<std::uint64_t>("seed");
  g.alpha = top.required<double>("alpha");
  file.position_dim = top.required<int>("position_dim");
  file.map = map_from_json(top.required_child("map"));
  g.nodes = list_from<BeliefNode>(top.required_child("nodes"), "graph.nodes", [](const json& n) {
    ObjectReader r(n, "graph.nodes[]");
    BeliefNode node;
    node.id = r.required<int>("id");
    node.feasible = r.required<bool>("feasible");
    node.mean = vec_from(r.required_child("mean"), "node.mean");
    node.covariance = mat_from(r.required_child("covariance"), "node.covariance");
    node.error_covariance = mat_from(r.required_child("error_covariance"), "node.error_covariance");
    r.finish();
    return node;
  });
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    require(g.nodes[i].id == static_cast<int>(i), "graph.nodes: ids must equal positions");
  g.edges = list_from<BeliefEdge>(top.required_child("edges"), "graph.edges", [&](const json& e) {
    ObjectReader r(e, "graph.edges[]");
    BeliefEdge edge;
    edge.source = r.required<int>("source");
    edge.target = r.required<int>("target");
    edge.converged = r.required<bool>("converged");
    edge.iterations = r.required<int>("iterations");
    edge.cost = cost_from(r.required_child("cost"), "edge.cost");
    edge.trajectory = trajectory_from_json(r.required_child("trajectory"));
    r.finish();
    const int n = static_cast<int>(g.nodes.size());
    require(edge.source >= 0 && edge.source < n && edge.target >= 0 && edge.target < n,
            "graph.edges: endpoint out of range");
    return edge;
  });
  if (const json* rejected = top.child("rejected"))
    g.rejected = list_from<RejectedEdge>(*rejected, "graph.rejected", [](const json& e) {
      ObjectReader r(e, "graph.rejected[]");
      RejectedEdge edge{r.required<int>("source"), r.required<int>("target"), r.required<std::string>("reason")};
      r.finish();
      return edge;
    });
  top.finish();
  return file;
}

json timing_json(const BuildTiming& t) {
  return {{"schema_version", kSchemaVersion},
          {"total_seconds", t.total_seconds},
          {"edge_mean_seconds", t.edge_mean_seconds},
          {"edge_max_seconds", t.edge_max_seconds},
          {"attempted_edges", t.attempted},
          {"retained_edges", t.retained}};
}

PathReport make_path_report(const BeliefGraph& graph, PathResult path, double alpha, int start, int goal) {
  PathReport report;
  for (std::size_t e : path.edges) {
    const auto& edge = graph.edges.at(e);
    report.edges.push_back({edge.source, edge.target, edge.cost});
  }
  report.path = std::move(path);
  report.alpha = alpha;
  report.start = start;
  report.goal = goal;
  return report;
}

json to_json(const PathReport& report) {
  const PathResult& p = report.path;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "path";
  j["found"] = p.found;
  j["reason"] = p.reason;
  j["alpha"] = report.alpha;
  j["start"] = report.start;
  j["goal"] = report.goal;
  j["nodes"] = p.nodes;
  j["edges"] = list_json(report.edges, [&](const PathEdge& e) {
    return json{{"source", e.source}, {"target", e.target}, {"cost", cost_json(e.cost)},
                {"total", e.cost.total(report.alpha)}};
  });
  j["cost"] = cost_json(p.cost);
  j["total"] = p.total;
  json knots = json::array();
  for (std::size_t i = 0; i < p.times.size(); ++i)
    knots.push_back({{"t", p.times[i]},
                     {"mean", vec_json(p.mean[i])},
                     {"covariance", mat_json(p.covariance[i])},
                     {"error_covariance", mat_json(p.error_covariance[i])}});
  j["knots"] = std::move(knots);
  j["timing"] = {{"search_seconds", report.search_seconds}};
  if (report.map) j["map"] = to_json(*report.map);
  return j;
}

PathReport path_report_from_json(const json& j) {
  PathReport report;
  PathResult& p = report.path;
  ObjectReader top(j, "path");
  check_schema(top);
  if (top.required<std::string>("kind") != "path") bad("path: kind is not \"path\"");
  p.found = top.required<bool>("found");
  p.reason = top.required<std::string>("reason");
  report.alpha = top.required<double>("alpha");
  report.start = top.required<int>("start");
  report.goal = top.required<int>("goal");
  p.nodes = top.required<std::vector<int>>("nodes");
  report.edges = list_from<PathEdge>(top.required_child("edges"), "path.edges", [](const json& e) {
    ObjectReader r(e, "path.edges[]");
    PathEdge edge{r.required<int>("source"), r.required<int>("target"), cost_from(r.required_child("cost"), "cost")};
    r.required<double>("total");
    r.finish();
    return edge;
  });
  p.cost = cost_from(top.required_child("cost"), "path.cost");
  p.total = top.required<double>("total");
  for (const auto& k : list_from<json>(top.required_child("knots"), "path.knots", [](const json& k) { return k; })) {
    ObjectReader r(k, "path.knots[]");
    p.times.push_back(r.required<double>("t"));
    p.mean.push_back(vec_from(r.required_child("mean"), "knot.mean"));
    p.covariance.push_back(mat_from(r.required_child("covariance"), "knot.covariance"));
    p.error_covariance.push_back(mat_from(r.required_child("error_covariance"), "knot.error_covariance"));
    r.finish();
  }
  if (const json* timing = top.child("timing")) {
    ObjectReader r(*timing, "path.timing");
    r.get("search_seconds", report.search_seconds);
    r.finish();
  }
  if (const json* map = top.child("map")) report.map = map_from_json(*map);
  top.finish();
  return report;
}

void MomentTable::append(int segment_id, double t, const Vector& m, const Matrix& s, const Matrix& p) {
  segment.push_back(segment_id);
  time.push_back(t);
  mean.push_back(m);
  covariance.push_back(s);
  error_covariance.push_back(p);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) bad("csv: cannot parse number \"" + text + "\"");
  return v;
}

void write_csv(std::ostream& out, const MomentTable& table) {
  const Eigen::Index n = table.size() == 0 ? 0 : table.mean.front().size();
  out << "segment,t";
  for (Eigen::Index i = 0; i < n; ++i) out << ",m" << i;
  for (const char* name : {"S", "P"})
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < n; ++c) out << ',' << name << r << '_' << c;
  out << '\n';
  for (std::size_t k = 0; k < table.size(); ++k) {
    out << table.segment[k] << ',' << format_double(table.time[k]);
    for (Eigen::Index i = 0; i < n; ++i) out << ',' << format_double(table.mean[k][i]);
    for (const Matrix* m : {&table.covariance[k], &table.error_covariance[k]})
      for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < n; ++c) out << ',' << format_double((*m)(r, c));
    out << '\n';
  }
}

MomentTable read_csv(std::istream& in) {
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) bad("csv: missing header");
  const auto header = split(line);
  Eigen::Index n = 0;
  while (2 + n < static_cast<Eigen::Index>(header.size()) && header[2 + n] == "m" + std::to_string(n)) ++n;
  const std::size_t columns = 2 + n + 2 * n * n;
  if (header.size() != columns || header[0] != "segment" || header[1] != "t") bad("csv: unexpected header");
  MomentTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != columns) bad("csv: row has " + std::to_string(cells.size()) + " cells");
    std::size_t c = 2;
    Vector m(n);
    Matrix s(n, n), p(n, n);
    for (Eigen::Index i = 0; i < n; ++i) m[i] = parse_double(cells[c++]);
    for (Matrix* mat : {&s, &p})
      for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index k = 0; k < n; ++k) (*mat)(r, k) = parse_double(cells[c++]);
    table.append(static_cast<int>(parse_double(cells[0])), parse_double(cells[1]), m, s, p);
  }
  return table;
}

void write_convergence_csv(std::ostream& out, const std::vector<PgcsIterate>& diagnostics) {
  out << "iteration,hinge_integral,nominal_change,mean_residual,covariance_residual\n";
  for (const auto& d : diagnostics)
    out << d.iteration << ',' << format_double(d.hinge_integral) << ',' << format_double(d.nominal_change) << ','
        << format_double(d.mean_residual) << ',' << format_double(d.covariance_residual) << '\n';
}

namespace {

// 3-sigma ellipse of the leading 2x2 block: radii and the major-axis angle.
struct Ellipse {
  double rx, ry, degrees;
};

Ellipse three_sigma(const Matrix& covariance) {
  const Eigen::Matrix2d block = symmetrized(covariance.topLeftCorner(2, 2));
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(block);
  const Eigen::Vector2d major = eig.eigenvectors().col(1);
  return {3.0 * std::sqrt(std::max(eig.eigenvalues()[1], 0.0)), 3.0 * std::sqrt(std::max(eig.eigenvalues()[0], 0.0)),
          std::atan2(major.y(), major.x()) * 180.0 / std::numbers::pi};
}

void ellipse_element(std::ostream& out, const Vector& center, const Matrix& covariance, const char* style) {
  const Ellipse e = three_sigma(covariance);
  const auto cx = format_double(center[0]);
  const auto cy = format_double(center[1]);
  out << "<ellipse cx=\"" << cx << "\" cy=\"" << cy << "\" rx=\"" << format_double(e.rx) << "\" ry=\""
      << format_double(e.ry) << "\" transform=\"rotate(" << format_double(e.degrees) << ' ' << cx << ' ' << cy
      << ")\" " << style << "/>\n";
}

}  // namespace

void write_svg(std::ostream& out, const SvgScene& scene) {
  require(scene.map && scene.map->obstacles.dim == 2, "svg: only 2D scenes can be drawn");
  const GridSpec& g = scene.map->grid;
  const double x0 = g.origin[0];
  const double y0 = g.origin[1];
  const double w = g.cell_size * static_cast<double>(g.extents[0] - 1);
  const double h = g.cell_size * static_cast<double>(g.extents[1] - 1);
  constexpr double kPixelsPerUnit = 100.0;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << format_double(w * kPixelsPerUnit)
      << "\" height=\"" << format_double(h * kPixelsPerUnit) << "\" viewBox=\"" << format_double(x0) << ' '
      << format_double(-(y0 + h)) << ' ' << format_double(w) << ' ' << format_double(h) << "\">\n";
  out << "<g transform=\"scale(1,-1)\">\n";
  out << "<rect x=\"" << format_double(x0) << "\" y=\"" << format_double(y0) << "\" width=\"" << format_double(w)
      << "\" height=\"" << format_double(h)
      << "\" fill=\"white\" stroke=\"black\" vector-effect=\"non-scaling-stroke\"/>\n";
  for (const auto& obstacle : scene.map->obstacles.obstacles) {
    if (const auto* box = std::get_if<Box>(&obstacle)) {
      const Vector size = box->max_corner - box->min_corner;
      out << "<rect x=\"" << format_double(box->min_corner[0]) << "\" y=\"" << format_double(box->min_corner[1])
          << "\" width=\"" << format_double(size[0]) << "\" height=\"" << format_double(size[1])
          << "\" fill=\"dimgray\"/>\n";
    } else {
      const auto& s = std::get<Sphere>(obstacle);
      out << "<circle cx=\"" << format_double(s.center[0]) << "\" cy=\"" << format_double(s.center[1]) << "\" r=\""
          << format_double(s.radius) << "\" fill=\"dimgray\"/>\n";
    }
  }
  for (const auto& line : scene.polylines) {
    out << "<polyline fill=\"none\" stroke=\"black\" vector-effect=\"non-scaling-stroke\" points=\"";
    for (std::size_t i = 0; i < line.size(); ++i)
      out << (i ? " " : "") << format_double(line[i][0]) << ',' << format_double(line[i][1]);
    out << "\"/>\n";
  }
  const char* sigma_style =
      "class=\"sigma\" fill=\"none\" stroke=\"steelblue\" vector-effect=\"non-scaling-stroke\"";
  const char* error_style =
      "class=\"error\" fill=\"none\" stroke=\"crimson\" stroke-dasharray=\"4 3\" vector-effect=\"non-scaling-stroke\"";
  for (std::size_t k = 0; k < scene.moments.size(); ++k) {
    ellipse_element(out, scene.moments.mean[k], scene.moments.covariance[k], sigma_style);
    ellipse_element(out, scene.moments.mean[k], scene.moments.error_covariance[k], error_style);
  }
  out << "</g>\n</svg>\n";
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) bad("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    bad(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) bad("cannot write " + path.string());
  out << j.dump(1) << '\n';
  if (!out) bad("write failed for " + path.string());
}

}  // namespace beliefroad
