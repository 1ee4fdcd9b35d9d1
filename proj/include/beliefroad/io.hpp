#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "beliefroad/brm.hpp"

namespace beliefroad {

inline constexpr int kSchemaVersion = 1;

struct ModelConfig {
  std::string type = "double_integrator";  // or "drag_double_integrator"
  int dim = 2;
  double drag_coefficient = 0.1;
  double noise_intensity = 0.01;     // eps
  std::string observation = "position";  // "position", "full", "range" or "none"
  double measurement_noise = 0.01;   // R = r I
};

/// Everything a CLI run needs besides the map. Unknown keys are rejected
/// when parsing; missing keys keep their defaults.
struct PlannerConfig {
  ModelConfig model;
  PgcsParams pgcs;
  SamplerParams sampler;
  int samples = 30;
  double alpha = 0.4;
  std::uint64_t seed = 1;
  int workers = 1;
  Vector start;  // start position
  Vector goal;   // goal position

  PlannerConfig();
  void validate() const;
  ControlAffineModel make_model() const;
  BuildOptions build_options() const;
};

nlohmann::json to_json(const PlannerConfig& config);
PlannerConfig config_from_json(const nlohmann::json& j);

struct MapFile {
  ObstacleSet obstacles;
  GridSpec grid;
  std::optional<std::string> sdf_cache;  // sidecar path, relative to the map file
};

nlohmann::json to_json(const MapFile& map);
MapFile map_from_json(const nlohmann::json& j);

/// Builds the SDF, or loads it from the cache sidecar when the sidecar header
/// matches the grid; a missing sidecar is written after building.
SdfMap load_sdf_for(const MapFile& map, const std::filesystem::path& map_path);

/// Graph file content. Timing is kept out of it and written to a sidecar.
struct GraphFile {
  MapFile map;
  int position_dim = 2;
  BeliefGraph graph;
};

nlohmann::json to_json(const GraphFile& graph);
GraphFile graph_from_json(const nlohmann::json& j);
nlohmann::json timing_json(const BuildTiming& timing);

struct PathEdge {
  int source = 0;
  int target = 0;
  EdgeCost cost;
};

struct PathReport {
  PathResult path;
  std::vector<PathEdge> edges;
  double alpha = 0.0;
  int start = 0;
  int goal = 1;
  double search_seconds = 0.0;
  std::optional<MapFile> map;  // embedded for plotting
};

PathReport make_path_report(const BeliefGraph& graph, PathResult path, double alpha, int start, int goal);
nlohmann::json to_json(const PathReport& report);
PathReport path_report_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrajectoryDistribution& trajectory);
TrajectoryDistribution trajectory_from_json(const nlohmann::json& j);

/// Per-knot moments of one or more trajectory segments.
struct MomentTable {
  std::vector<int> segment;
  std::vector<double> time;
  std::vector<Vector> mean;
  std::vector<Matrix> covariance;
  std::vector<Matrix> error_covariance;

  void append(int segment_id, double t, const Vector& m, const Matrix& s, const Matrix& p);
  std::size_t size() const { return time.size(); }
};

/// Shortest round-trip decimal text; parsing it back gives the same double.
std::string format_double(double v);
double parse_double(const std::string& text);

void write_csv(std::ostream& out, const MomentTable& table);
MomentTable read_csv(std::istream& in);

/// Convergence report of one edge: iteration, hinge integral, nominal change
/// and terminal residuals.
void write_convergence_csv(std::ostream& out, const std::vector<PgcsIterate>& diagnostics);

struct SvgScene {
  const MapFile* map = nullptr;
  std::vector<std::vector<Vector>> polylines;  // mean positions per segment
  MomentTable moments;                         // one Sigma and one P ellipse per row
};

/// 2D scene in workspace units (y up): obstacles, one polyline per segment
/// and 3-sigma ellipses, solid for Sigma and dashed for P.
void write_svg(std::ostream& out, const SvgScene& scene);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace beliefroad
