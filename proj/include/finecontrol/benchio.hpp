#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "finecontrol/composer.hpp"
#include "finecontrol/metrics.hpp"
#include "finecontrol/prompting.hpp"
#include "finecontrol/tiny_denoiser.hpp"

namespace finecontrol::bench {

/// Geometry of a row of standing figures.
struct LayoutParams {
  int height = 64;
  double scale = 1.0;
  double distance = 1.0;
  int width = 0;  // 0: smallest multiple of 16 that fits the row
};

/// Figure height at scale 1 for a canvas of the given height.
double base_figure_height(int canvas_height);
/// Centre-to-centre spacing at distance 1: box width plus the dilated margins
/// and the raster line width on both sides, so dilated regions stay disjoint.
double unit_spacing(int canvas_height, double scale);
/// Canvas width (a multiple of 16) holding `people` figures at the layout.
int row_width(int people, const LayoutParams& layout);

/// Figures placed left to right around the canvas centre.
std::vector<pose::Pose2D> row_poses(int people, const LayoutParams& layout);

/// Scene with one figure per identity (left to right) and the given setting.
prompt::SceneSpec layout_scene(const std::vector<std::string>& identities, const std::string& setting,
                               const LayoutParams& layout, std::uint64_t seed);

struct CountSpec {
  int people = 2;
  int scenes = 1;
};

struct BenchmarkManifest {
  int version = 1;
  std::vector<CountSpec> counts{{2, 20}};
  std::vector<std::string> identity_pool;
  std::vector<std::string> setting_pool;
  std::uint64_t seed = 0;
  LayoutParams layout{64, 0.75, 1.0, 0};
  diffusion::SamplerConfig sampler;
  HarmonyParams harmony;

  nlohmann::json to_json() const;
  static BenchmarkManifest from_json(const nlohmann::json& j);
  static BenchmarkManifest load(const std::filesystem::path& path);
};

/// Palette identities, four settings, 20 two-person scenes.
BenchmarkManifest default_manifest();

struct SyntheticScene {
  std::string id;
  prompt::SceneSpec scene;
};

/// Deterministic scenes: identities drawn without replacement within a
/// scene, a setting from the pool, non-overlapping row placement. Scene k
/// carries seed manifest.seed + k. Throws POOL_EXHAUSTED.
std::vector<SyntheticScene> synth_scenes(const BenchmarkManifest& manifest);

/// One scene per image of a COCO person-keypoints annotation file: every
/// non-crowd person with two or more labelled keypoints, identities drawn
/// without replacement, canvas equal to the image size. Throws SCHEMA_INVALID
/// and POOL_EXHAUSTED.
std::vector<SyntheticScene> import_coco_keypoints(const nlohmann::json& annotations,
                                                 const BenchmarkManifest& manifest);

/// Toy training set: one or two figures with distinct palette identities at
/// random scale and position on a 64-high canvas. Clauses list identities
/// left to right, then the setting.
std::vector<denoise::TrainingExample> make_training_set(int count, std::uint64_t seed,
                                                        const denoise::Palette& palette,
                                                        const std::vector<std::string>& settings,
                                                        int height = 64, int width = 64);

struct ModeResult {
  CompositionMode mode;
  metrics::MetricsReport report;
  std::vector<metrics::SceneRecord> records;  // scene order, paired across modes
};

struct BenchmarkOptions {
  int seeds_per_scene = 1;  // seed s of scene k: scene.seed * 1000003 + s
  int workers = 1;
  std::function<void(const std::string&)> progress;
};

/// Runs every scene under every mode with shared per-scene seeds.
std::vector<ModeResult> run_benchmark(const std::vector<SyntheticScene>& scenes,
                                      const std::vector<CompositionMode>& modes,
                                      const compose::DenoiserFactory& factory,
                                      const metrics::SimilarityOracle& oracle,
                                      const metrics::PoseDetector& detector,
                                      const BenchmarkOptions& options = {});

enum class SweepAxis { kPeopleCount, kPersonScale, kInterDistance };

std::string axis_name(SweepAxis axis);
SweepAxis parse_axis(const std::string& name);
std::vector<double> default_axis_values(SweepAxis axis);

struct SweepConfig {
  SweepAxis axis = SweepAxis::kPeopleCount;
  std::vector<double> values;
  int seeds = 20;
  int height = 64;
  double scale = 0.75;   // figure scale for the count and distance sweeps
  int fixed_people = 3;  // people for the scale and distance sweeps
  CompositionMode mode = CompositionMode::kFineControl;
  std::vector<std::string> identity_pool;  // defaults to the palette tokens
  std::string setting = "indoors";
  diffusion::SamplerConfig sampler;
  HarmonyParams harmony;
};

struct SweepPoint {
  double value = 0.0;
  metrics::MetricsReport report;
};

/// Throws INVALID_AXIS_VALUE on an unusable axis value.
std::vector<prompt::SceneSpec> sweep_scenes(const SweepConfig& config, double value);
std::vector<SweepPoint> robustness_sweep(const SweepConfig& config, const compose::DenoiserFactory& factory,
                                         const metrics::SimilarityOracle& oracle,
                                         const metrics::PoseDetector& detector, int workers = 1);

enum class ReportFormat { kCsv, kMarkdown };

struct ReportRow {
  std::string method;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
};

std::vector<ReportRow> report_rows(const std::vector<ModeResult>& results);
std::vector<ReportRow> sweep_rows(SweepAxis axis, const std::vector<SweepPoint>& points);
std::string render_report(const std::vector<ReportRow>& rows, ReportFormat format);
void write_report(const std::vector<ReportRow>& rows, ReportFormat format, const std::filesystem::path& path);
/// One JSON object per instance, scene order, modes in order.
std::string scene_jsonl(const std::vector<ModeResult>& results);

/// One PNG line plot per metric ("<prefix>_<metric>.png"); returns the paths.
std::vector<std::filesystem::path> emit_plots(SweepAxis axis, const std::vector<SweepPoint>& points,
                                              const std::filesystem::path& dir);

/// Renders a line plot of (x, y) points into an RGB image with axes.
Image line_plot(const std::vector<double>& xs, const std::vector<double>& ys, int width = 320,
                int height = 200);

}  // namespace finecontrol::bench
