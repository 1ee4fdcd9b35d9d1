#include "commands.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "beliefroad/io.hpp"

namespace beliefroad::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<int> workers;
};

PlannerConfig load_config(const std::string& path, const Overrides& overrides) {
  PlannerConfig config = config_from_json(read_json_file(path));
  if (const char* env = std::getenv("BELIEFROAD_WORKERS")) {
    try {
      std::size_t used = 0;
      config.workers = std::stoi(env, &used);
      require(used == std::string(env).size(), "");
    } catch (const std::exception&) {
      throw Error(Failure::kInvalidInput, "BELIEFROAD_WORKERS is not an integer: \"" + std::string(env) + "\"");
    }
  }
  if (overrides.seed) config.seed = *overrides.seed;
  if (overrides.alpha) config.alpha = *overrides.alpha;
  if (overrides.workers) config.workers = *overrides.workers;
  config.validate();
  return config;
}

fs::path sidecar(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  return p.replace_extension(suffix);
}

GaussianBelief read_belief(const std::string& path, Matrix* error_covariance) {
  const json j = read_json_file(path);
  require(j.is_object(), path + ": expected an object");
  GaussianBelief belief;
  for (const auto& item : j.items()) {
    const bool known = item.key() == "mean" || item.key() == "covariance" ||
                       (error_covariance && item.key() == "error_covariance");
    require(known, path + ": unknown key \"" + item.key() + "\"");
  }
  const json mean = j.value("mean", json());
  const json cov = j.value("covariance", json());
  require(mean.is_array() && cov.is_array(), path + ": needs mean and covariance");
  belief.mean = Vector(static_cast<Eigen::Index>(mean.size()));
  for (std::size_t i = 0; i < mean.size(); ++i) belief.mean[static_cast<Eigen::Index>(i)] = mean[i].get<double>();
  auto matrix = [&](const json& rows) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), belief.mean.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(rows[r].size() == static_cast<std::size_t>(belief.mean.size()), path + ": matrix shape");
      for (std::size_t c = 0; c < rows[r].size(); ++c)
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<double>();
    }
    require(m.rows() == m.cols(), path + ": matrix must be square");
    return m;
  };
  belief.covariance = matrix(cov);
  if (error_covariance) {
    require(j.contains("error_covariance"), path + ": start belief needs error_covariance");
    *error_covariance = matrix(j["error_covariance"]);
  }
  return belief;
}

void print_cost(std::ostream& out, const EdgeCost& cost, double alpha) {
  out << "total " << format_double(cost.total(alpha)) << " control " << format_double(cost.control) << " hinge "
      << format_double(cost.hinge) << " entropy " << format_double(cost.entropy) << '\n';
}

int build_graph_command(const std::string& config_path, const std::string& map_path, const std::string& out_path,
                        const Overrides& overrides, std::ostream& out, std::ostream& err) {
  const PlannerConfig config = load_config(config_path, overrides);
  require(config.start.size() > 0 && config.goal.size() > 0, "config: build-graph needs start and goal positions");
  const MapFile map_file = map_from_json(read_json_file(map_path));
  require(map_file.obstacles.dim == config.model.dim, "map dimension differs from the model dimension");
  const SdfMap map = load_sdf_for(map_file, map_path);
  const ControlAffineModel model = config.make_model();

  GraphFile file;
  file.map = map_file;
  file.position_dim = model.position_dim();
  file.graph = build_graph(model, map, config.sampler, config.pgcs, config.build_options(), config.start, config.goal);
  write_json_file(out_path, to_json(file));
  write_json_file(sidecar(out_path, ".timing.json"), timing_json(file.graph.timing));

  const BuildTiming& t = file.graph.timing;
  out << "nodes " << file.graph.nodes.size() << " edges " << t.retained << " of " << t.attempted << " build "
      << format_double(t.total_seconds) << " s, per edge mean " << format_double(t.edge_mean_seconds) << " s max "
      << format_double(t.edge_max_seconds) << " s\n";
  SearchOptions search;
  search.position_dim = file.position_dim;
  if (!search_path(file.graph, 0, 1, config.alpha, search).found) {
    err << json{{"status", "no_path"}, {"reason", "start and goal are disconnected"}}.dump() << '\n';
    return kNoPath;
  }
  return kOk;
}

int plan_command(const std::string& graph_path, int start, int goal, std::optional<double> alpha,
                 const std::string& out_path, std::ostream& out, std::ostream& err) {
  const GraphFile file = graph_from_json(read_json_file(graph_path));
  const int n = static_cast<int>(file.graph.nodes.size());
  require(start >= 0 && start < n && goal >= 0 && goal < n, "plan: node id out of range");
  const double a = alpha.value_or(file.graph.alpha);
  SearchOptions search;
  search.position_dim = file.position_dim;
  const auto clock_start = std::chrono::steady_clock::now();
  PathResult path = search_path(file.graph, start, goal, a, search);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  PathReport report = make_path_report(file.graph, std::move(path), a, start, goal);
  report.search_seconds = seconds;
  report.map = file.map;
  write_json_file(out_path, to_json(report));
  if (!report.path.found) {
    err << json{{"status", "no_path"}, {"reason", report.path.reason}}.dump() << '\n';
    return kNoPath;
  }
  out << "path";
  for (int id : report.path.nodes) out << ' ' << id;
  out << '\n';
  print_cost(out, report.path.cost, a);
  return kOk;
}

int steer_edge_command(const std::string& config_path, const std::string& map_path, const std::string& start_path,
                       const std::string& goal_path, const std::string& out_path, const Overrides& overrides,
                       std::ostream& out) {
  const PlannerConfig config = load_config(config_path, overrides);
  const MapFile map_file = map_from_json(read_json_file(map_path));
  require(map_file.obstacles.dim == config.model.dim, "map dimension differs from the model dimension");
  const SdfMap map = load_sdf_for(map_file, map_path);
  const ControlAffineModel model = config.make_model();
  Matrix p0;
  const GaussianBelief start = read_belief(start_path, &p0);
  const GaussianBelief goal = read_belief(goal_path, nullptr);

  const EdgeConnectionResult result = pgcs_connect(model, map, config.pgcs, start, p0, goal);
  const EdgeCost cost = edge_cost(result.trajectory, map, config.pgcs.collision);
  json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "trajectory";
  j["map"] = to_json(map_file);
  j["converged"] = result.converged;
  j["iterations"] = result.iterations;
  j["terminal_mean_error"] = result.terminal_mean_error;
  j["terminal_covariance_error"] = result.terminal_covariance_error;
  j["collision_free"] = collision_free(map, config.pgcs.collision, result.trajectory.mean);
  j["cost"] = {{"control", cost.control}, {"hinge", cost.hinge}, {"entropy", cost.entropy}};
  j["trajectory"] = to_json(result.trajectory);
  write_json_file(out_path, j);
  const fs::path csv_path = sidecar(out_path, ".convergence.csv");
  std::ofstream csv(csv_path);
  require(static_cast<bool>(csv), "cannot write " + csv_path.string());
  write_convergence_csv(csv, result.diagnostics);

  out << (result.converged ? "converged" : "stopped") << " after " << result.iterations
      << " iterations, terminal mean error " << format_double(result.terminal_mean_error)
      << ", covariance error " << format_double(result.terminal_covariance_error) << '\n';
  print_cost(out, cost, config.alpha);
  return kOk;
}

int plot_command(const std::string& input_path, const std::string& out_path, std::ostream& err) {
  const json j = read_json_file(input_path);
  require(j.is_object() && j.contains("kind"), input_path + ": not a graph, path or trajectory file");
  const std::string kind = j["kind"].get<std::string>();
  SvgScene scene;
  MapFile map_file;
  auto add_segment = [&](int id, const std::vector<double>& times, const std::vector<Vector>& mean,
                         const std::vector<Matrix>& cov, const std::vector<Matrix>& error) {
    std::vector<Vector> line;
    for (std::size_t k = 0; k < mean.size(); ++k) {
      scene.moments.append(id, times[k], mean[k], cov[k], error[k]);
      line.push_back(mean[k].head(map_file.obstacles.dim));
    }
    scene.polylines.push_back(std::move(line));
  };
  auto knot_times = [](const TimeGrid& grid) {
    std::vector<double> t;
    for (std::size_t i = 0; i < grid.knots(); ++i) t.push_back(grid.time(i));
    return t;
  };
  if (kind == "graph") {
    const GraphFile file = graph_from_json(j);
    map_file = file.map;
    for (std::size_t e = 0; e < file.graph.edges.size(); ++e) {
      const auto& t = file.graph.edges[e].trajectory;
      add_segment(static_cast<int>(e), knot_times(t.grid), t.mean, t.covariance, t.error_covariance);
    }
  } else if (kind == "path") {
    const PathReport path = path_report_from_json(j);
    require(path.map.has_value(), input_path + ": path report has no map");
    map_file = *path.map;
    add_segment(0, path.path.times, path.path.mean, path.path.covariance, path.path.error_covariance);
  } else if (kind == "trajectory") {
    map_file = map_from_json(j.at("map"));
    const TrajectoryDistribution t = trajectory_from_json(j.at("trajectory"));
    add_segment(0, knot_times(t.grid), t.mean, t.covariance, t.error_covariance);
  } else {
    throw Error(Failure::kInvalidInput, input_path + ": unknown kind \"" + kind + "\"");
  }

  const fs::path csv_path = sidecar(out_path, ".csv");
  std::ofstream csv(csv_path);
  require(static_cast<bool>(csv), "cannot write " + csv_path.string());
  write_csv(csv, scene.moments);
  if (map_file.obstacles.dim != 2) {
    err << "warning: SVG needs a 2D scene; wrote " << csv_path.string() << " only\n";
    return kOk;
  }
  scene.map = &map_file;
  std::ofstream svg(out_path);
  require(static_cast<bool>(svg), "cannot write " + out_path);
  write_svg(svg, scene);
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Belief roadmap planning with proximal-gradient covariance steering", "beliefroad"};
  app.require_subcommand(1);
  Overrides overrides;
  std::string config_path, map_path, out_path, graph_path, input_path, start_path, goal_path;
  int start_id = 0;
  int goal_id = 1;
  std::optional<double> alpha;

  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--seed", overrides.seed, "sampler seed");
    cmd->add_option("--alpha", overrides.alpha, "entropy cost weight");
    cmd->add_option("--workers", overrides.workers, "edge worker threads, 0 for all cores");
  };

  CLI::App* build = app.add_subcommand("build-graph", "sample beliefs and connect them into a roadmap");
  build->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  build->add_option("--map", map_path)->required()->check(CLI::ExistingFile);
  build->add_option("--out", out_path)->required();
  add_overrides(build);

  CLI::App* plan = app.add_subcommand("plan", "search a roadmap for the cheapest path");
  plan->add_option("--graph", graph_path)->required()->check(CLI::ExistingFile);
  plan->add_option("--start", start_id, "start node id");
  plan->add_option("--goal", goal_id, "goal node id");
  plan->add_option("--alpha", alpha, "entropy cost weight, defaults to the graph's");
  plan->add_option("--out", out_path)->required();

  CLI::App* steer = app.add_subcommand("steer-edge", "connect two beliefs and report convergence");
  steer->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  steer->add_option("--map", map_path)->required()->check(CLI::ExistingFile);
  steer->add_option("--start", start_path, "belief file with mean, covariance and error_covariance")
      ->required()
      ->check(CLI::ExistingFile);
  steer->add_option("--goal", goal_path, "belief file with mean and covariance")->required()->check(CLI::ExistingFile);
  steer->add_option("--out", out_path)->required();
  add_overrides(steer);

  CLI::App* plot = app.add_subcommand("plot", "render a graph, path or trajectory file as SVG and CSV");
  plot->add_option("input", input_path)->required()->check(CLI::ExistingFile);
  plot->add_option("--out", out_path)->required();

  std::vector<const char*> argv{"beliefroad"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*build) return build_graph_command(config_path, map_path, out_path, overrides, out, err);
    if (*plan) return plan_command(graph_path, start_id, goal_id, alpha, out_path, out, err);
    if (*steer) return steer_edge_command(config_path, map_path, start_path, goal_path, out_path, overrides, out);
    return plot_command(input_path, out_path, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    switch (e.kind()) {
      case Failure::kInvalidInput: return kUsage;
      case Failure::kInfeasible: return kInfeasible;
      case Failure::kNumerical: return kNumerical;
    }
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

}  // namespace beliefroad::cli
