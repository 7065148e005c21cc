#include "finecontrol/benchio.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "finecontrol/error.hpp"
#include "finecontrol/figure.hpp"
#include "finecontrol/png_io.hpp"

namespace finecontrol::bench {
namespace {

constexpr double kRasterLineWidth = 1.0;

int dilation_radius(int canvas_height) { return pose::dilation_side(canvas_height) / 2; }

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first error.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  const int count = static_cast<int>(std::min<std::size_t>(n, static_cast<std::size_t>(workers)));
  for (int w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  pool.clear();
  if (error) std::rethrow_exception(error);
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::vector<std::string> rotated(const std::vector<std::string>& pool, std::size_t start, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(pool[(start + i) % pool.size()]);
  return out;
}

}  // namespace

double base_figure_height(int canvas_height) { return 0.875 * canvas_height; }

double unit_spacing(int canvas_height, double scale) {
  const double fig_w = pose::figure_width(base_figure_height(canvas_height) * scale);
  return fig_w + 2.0 * dilation_radius(canvas_height) + 2.0 * kRasterLineWidth;
}

int row_width(int people, const LayoutParams& layout) {
  if (layout.width > 0) return layout.width;
  const double fig_w = pose::figure_width(base_figure_height(layout.height) * layout.scale);
  const double span = (people - 1) * unit_spacing(layout.height, layout.scale) * layout.distance + fig_w;
  const double margin = dilation_radius(layout.height) + 2.0;
  const int needed = static_cast<int>(std::ceil(span + 2.0 * margin));
  return std::max(16, (needed + 15) / 16 * 16);
}

std::vector<pose::Pose2D> row_poses(int people, const LayoutParams& layout) {
  const int width = row_width(people, layout);
  const double fig_h = base_figure_height(layout.height) * layout.scale;
  const double spacing = unit_spacing(layout.height, layout.scale) * layout.distance;
  const double cx = (width - 1) / 2.0;
  const double top = (layout.height - 1 - fig_h) / 2.0;
  std::vector<pose::Pose2D> poses;
  for (int i = 0; i < people; ++i) {
    poses.push_back(pose::standing_figure(cx + (i - (people - 1) / 2.0) * spacing, top, fig_h));
  }
  return poses;
}

prompt::SceneSpec layout_scene(const std::vector<std::string>& identities, const std::string& setting,
                               const LayoutParams& layout, std::uint64_t seed) {
  if (identities.empty()) throw Error(ErrorCode::kEmptyScene, "no identities to place");
  prompt::SceneSpec scene;
  const int people = static_cast<int>(identities.size());
  scene.canvas = {layout.height, row_width(people, layout)};
  scene.setting = setting;
  scene.seed = seed;
  scene.sampler.seed = seed;
  const auto poses = row_poses(people, layout);
  for (int i = 0; i < people; ++i) scene.instances.push_back({poses[i], identities[i], {}, false});
  prompt::assign_prompts(scene);
  return scene;
}

nlohmann::json BenchmarkManifest::to_json() const {
  nlohmann::json counts_json = nlohmann::json::array();
  for (const auto& c : counts) counts_json.push_back({{"people", c.people}, {"scenes", c.scenes}});
  return {{"version", version},
          {"counts", counts_json},
          {"identity_pool", identity_pool},
          {"setting_pool", setting_pool},
          {"seed", seed},
          {"layout", {{"height", layout.height}, {"scale", layout.scale}, {"distance", layout.distance}}},
          {"sampler", {{"steps", sampler.num_steps}, {"eta", sampler.eta}, {"guidance", sampler.guidance_scale}}},
          {"harmony", {{"tau", harmony.tau}, {"hard_fraction", harmony.hard_fraction}}}};
}

BenchmarkManifest BenchmarkManifest::from_json(const nlohmann::json& j) {
  BenchmarkManifest m;
  try {
    m.version = j.value("version", 1);
    if (j.contains("counts")) {
      m.counts.clear();
      for (const auto& c : j.at("counts")) m.counts.push_back({c.at("people").get<int>(), c.at("scenes").get<int>()});
    }
    m.identity_pool = j.value("identity_pool", std::vector<std::string>{});
    m.setting_pool = j.value("setting_pool", std::vector<std::string>{});
    m.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("layout")) {
      const auto& l = j["layout"];
      m.layout.height = l.value("height", m.layout.height);
      m.layout.scale = l.value("scale", m.layout.scale);
      m.layout.distance = l.value("distance", m.layout.distance);
    }
    if (j.contains("sampler")) {
      const auto& s = j["sampler"];
      m.sampler.num_steps = s.value("steps", m.sampler.num_steps);
      m.sampler.eta = s.value("eta", m.sampler.eta);
      m.sampler.guidance_scale = s.value("guidance", m.sampler.guidance_scale);
    }
    if (j.contains("harmony")) {
      m.harmony.tau = j["harmony"].value("tau", m.harmony.tau);
      m.harmony.hard_fraction = j["harmony"].value("hard_fraction", m.harmony.hard_fraction);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kSchemaInvalid, std::string("manifest: ") + e.what());
  }
  if (m.identity_pool.empty() || m.setting_pool.empty()) {
    throw Error(ErrorCode::kSchemaInvalid, "manifest pools must be non-empty");
  }
  int total = 0;
  for (const auto& c : m.counts) {
    if (c.people < 1 || c.scenes < 0) throw Error(ErrorCode::kSchemaInvalid, "manifest counts must be positive");
    total += c.scenes;
  }
  if (total < 1) throw Error(ErrorCode::kSchemaInvalid, "manifest must request at least one scene");
  return m;
}

BenchmarkManifest BenchmarkManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kSchemaInvalid, std::string("manifest: ") + e.what());
  }
  return from_json(j);
}

BenchmarkManifest default_manifest() {
  BenchmarkManifest m;
  m.identity_pool = denoise::default_palette().tokens();
  m.setting_pool = {"indoors", "in a park", "on the beach", "at night"};
  return m;
}

std::vector<SyntheticScene> synth_scenes(const BenchmarkManifest& manifest) {
  std::mt19937_64 rng(manifest.seed);
  std::vector<SyntheticScene> out;
  std::uint64_t index = 0;
  for (const auto& c : manifest.counts) {
    if (static_cast<std::size_t>(c.people) > manifest.identity_pool.size()) {
      throw Error(ErrorCode::kPoolExhausted, std::to_string(c.people) + " people but only " +
                                                 std::to_string(manifest.identity_pool.size()) + " identities");
    }
    for (int k = 0; k < c.scenes; ++k) {
      std::vector<std::string> pool = manifest.identity_pool;
      std::shuffle(pool.begin(), pool.end(), rng);
      pool.resize(c.people);
      std::uniform_int_distribution<std::size_t> pick(0, manifest.setting_pool.size() - 1);
      const std::string setting = manifest.setting_pool[pick(rng)];
      prompt::SceneSpec scene = layout_scene(pool, setting, manifest.layout, manifest.seed + index);
      scene.sampler = manifest.sampler;
      scene.sampler.seed = scene.seed;
      scene.harmony = manifest.harmony;
      char id[32];
      std::snprintf(id, sizeof id, "n%d_%03d", c.people, k);
      out.push_back({id, std::move(scene)});
      ++index;
    }
  }
  return out;
}

std::vector<SyntheticScene> import_coco_keypoints(const nlohmann::json& annotations,
                                                 const BenchmarkManifest& manifest) {
  std::map<long long, std::pair<int, int>> sizes;  // image id -> (height, width)
  std::map<long long, std::vector<pose::Pose2D>> people;
  try {
    for (const auto& im : annotations.at("images")) {
      sizes[im.at("id").get<long long>()] = {im.at("height").get<int>(), im.at("width").get<int>()};
    }
    for (const auto& a : annotations.at("annotations")) {
      if (a.value("iscrowd", 0) != 0 || a.value("category_id", 1) != 1) continue;
      const auto& kp = a.at("keypoints");
      if (kp.size() != 51) throw Error(ErrorCode::kSchemaInvalid, "COCO keypoints need 51 values");
      pose::Pose2D p;
      for (std::size_t i = 0; i < 51; i += 3) {
        p.keypoints.push_back({kp[i].get<double>(), kp[i + 1].get<double>(), kp[i + 2].get<int>() > 0 ? 1 : 0});
      }
      if (p.visible_count() >= 2) people[a.at("image_id").get<long long>()].push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kSchemaInvalid, std::string("COCO annotations: ") + e.what());
  }
  if (manifest.identity_pool.empty() || manifest.setting_pool.empty()) {
    throw Error(ErrorCode::kSchemaInvalid, "identity and setting pools must be non-empty");
  }

  std::mt19937_64 rng(manifest.seed);
  std::vector<SyntheticScene> out;
  for (auto& [image_id, poses] : people) {
    const auto size = sizes.find(image_id);
    if (size == sizes.end()) throw Error(ErrorCode::kSchemaInvalid, "annotation for unknown image");
    if (poses.size() > manifest.identity_pool.size()) {
      throw Error(ErrorCode::kPoolExhausted, std::to_string(poses.size()) + " people but only " +
                                                 std::to_string(manifest.identity_pool.size()) + " identities");
    }
    std::vector<std::string> pool = manifest.identity_pool;
    std::shuffle(pool.begin(), pool.end(), rng);
    std::uniform_int_distribution<std::size_t> pick(0, manifest.setting_pool.size() - 1);
    prompt::SceneSpec scene;
    scene.canvas = {size->second.first, size->second.second};
    scene.setting = manifest.setting_pool[pick(rng)];
    scene.seed = manifest.seed + out.size();
    scene.sampler = manifest.sampler;
    scene.sampler.seed = scene.seed;
    scene.harmony = manifest.harmony;
    for (std::size_t i = 0; i < poses.size(); ++i) scene.instances.push_back({std::move(poses[i]), pool[i], {}, false});
    prompt::assign_prompts(scene);
    out.push_back({"coco_" + std::to_string(image_id), std::move(scene)});
  }
  return out;
}

std::vector<denoise::TrainingExample> make_training_set(int count, std::uint64_t seed,
                                                        const denoise::Palette& palette,
                                                        const std::vector<std::string>& settings,
                                                        int height, int width) {
  if (settings.empty()) throw Error(ErrorCode::kPoolExhausted, "no settings to sample");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::vector<std::string> tokens = palette.tokens();
  const double margin = dilation_radius(height) / 2.0 + 1.0;
  std::vector<denoise::TrainingExample> out;
  out.reserve(count);
  while (static_cast<int>(out.size()) < count) {
    const int people = unit(rng) < 0.5 ? 1 : 2;
    const double scale = people == 1 ? 0.35 + 0.65 * unit(rng) : 0.35 + 0.45 * unit(rng);
    const double fig_h = base_figure_height(height) * scale;
    const double fig_w = pose::figure_width(fig_h);
    const double spacing = unit_spacing(height, scale) * (1.0 + 0.3 * unit(rng));
    const double span = (people - 1) * spacing + fig_w;
    const double free_x = width - 1 - 2 * margin - span;
    if (free_x < 0) continue;
    const double left = margin + fig_w / 2 + free_x * unit(rng);
    const double free_y = height - 1 - fig_h;
    const double top = free_y * unit(rng);

    std::vector<std::string> ids = tokens;
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(people);
    std::uniform_int_distribution<std::size_t> pick(0, settings.size() - 1);
    const std::string setting = settings[pick(rng)];

    std::vector<denoise::RenderItem> items;
    std::vector<denoise::ControlEmbedding> controls;
    for (int i = 0; i < people; ++i) {
      pose::Pose2D p = pose::standing_figure(left + i * spacing, top, fig_h);
      controls.push_back(denoise::pose_control(p, height, width));
      items.push_back({ids[i], std::move(p)});
    }
    denoise::TrainingExample ex;
    ex.image = denoise::render_scene(items, palette, height, width);
    ex.clauses = ids;
    ex.clauses.push_back(setting);
    ex.control = denoise::union_control(controls);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<ModeResult> run_benchmark(const std::vector<SyntheticScene>& scenes,
                                      const std::vector<CompositionMode>& modes,
                                      const compose::DenoiserFactory& factory,
                                      const metrics::SimilarityOracle& oracle,
                                      const metrics::PoseDetector& detector,
                                      const BenchmarkOptions& options) {
  const std::size_t seeds = static_cast<std::size_t>(std::max(1, options.seeds_per_scene));
  const std::size_t runs = scenes.size() * seeds;
  struct Cell {
    metrics::SceneRecord record;
    std::vector<metrics::Detection> detections;
  };
  std::vector<std::vector<Cell>> cells(modes.size(), std::vector<Cell>(runs));
  std::mutex progress_mutex;

  parallel_for(runs, options.workers, [&](std::size_t r) {
    const SyntheticScene& sc = scenes[r / seeds];
    const std::size_t s = r % seeds;
    diffusion::SamplerConfig cfg = sc.scene.sampler;
    cfg.seed = sc.scene.seed * 1000003ULL + s;
    std::vector<pose::Pose2D> poses;
    std::vector<std::string> prompts;
    for (const auto& inst : sc.scene.instances) {
      poses.push_back(inst.pose);
      prompts.push_back(inst.assigned_prompt);
    }
    const std::string run_id = sc.id + "#" + std::to_string(s);
    for (std::size_t m = 0; m < modes.size(); ++m) {
      const compose::GenerationResult g = compose::generate(sc.scene, factory, cfg, sc.scene.harmony, modes[m]);
      Cell& cell = cells[m][r];
      cell.record = metrics::evaluate_scene(run_id, g.image, poses, prompts, oracle, detector, &cell.detections);
    }
    if (options.progress) {
      std::lock_guard lock(progress_mutex);
      options.progress(run_id);
    }
  });

  std::vector<ModeResult> out;
  for (std::size_t m = 0; m < modes.size(); ++m) {
    ModeResult mr{modes[m], {}, {}};
    std::vector<std::vector<pose::Pose2D>> gt;
    std::vector<std::vector<metrics::Detection>> det;
    for (std::size_t r = 0; r < runs; ++r) {
      mr.records.push_back(cells[m][r].record);
      std::vector<pose::Pose2D> poses;
      for (const auto& inst : scenes[r / seeds].scene.instances) poses.push_back(inst.pose);
      gt.push_back(std::move(poses));
      det.push_back(cells[m][r].detections);
    }
    mr.report = metrics::aggregate(mr.records, gt, det);
    out.push_back(std::move(mr));
  }
  return out;
}

std::string axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kPeopleCount: return "PEOPLE_COUNT";
    case SweepAxis::kPersonScale: return "PERSON_SCALE";
    case SweepAxis::kInterDistance: return "INTER_DISTANCE";
  }
  return "PEOPLE_COUNT";
}

SweepAxis parse_axis(const std::string& name) {
  std::string upper = name;
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "PEOPLE_COUNT" || upper == "COUNT" || upper == "PEOPLE") return SweepAxis::kPeopleCount;
  if (upper == "PERSON_SCALE" || upper == "SCALE") return SweepAxis::kPersonScale;
  if (upper == "INTER_DISTANCE" || upper == "DISTANCE") return SweepAxis::kInterDistance;
  throw Error(ErrorCode::kInvalidAxisValue, "unknown sweep axis '" + name + "'");
}

std::vector<double> default_axis_values(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kPeopleCount: return {3, 5, 7};
    case SweepAxis::kPersonScale: return {1, 0.75, 0.5, 0.25, 0.1};
    case SweepAxis::kInterDistance: return {1, 0.75, 0.5, 0.25};
  }
  return {};
}

std::vector<prompt::SceneSpec> sweep_scenes(const SweepConfig& config, double value) {
  std::vector<std::string> pool = config.identity_pool;
  if (pool.empty()) pool = denoise::default_palette().tokens();
  int people = config.fixed_people;
  LayoutParams layout{config.height, config.scale, 1.0, 0};
  switch (config.axis) {
    case SweepAxis::kPeopleCount:
      if (!(value >= 1.0) || value != std::floor(value)) {
        throw Error(ErrorCode::kInvalidAxisValue, "people count must be a positive integer, got " + format_value(value));
      }
      people = static_cast<int>(value);
      break;
    case SweepAxis::kPersonScale: {
      const double max_scale = 1.0 / 0.875;
      if (!(value > 0.0) || value > max_scale) {
        throw Error(ErrorCode::kInvalidAxisValue, "scale must lie in (0, " + format_value(max_scale) + "]");
      }
      layout.scale = 1.0;
      layout.width = row_width(people, layout);  // canvas fixed across scales
      layout.scale = value;
      break;
    }
    case SweepAxis::kInterDistance:
      if (!(value >= 0.0) || !std::isfinite(value)) {
        throw Error(ErrorCode::kInvalidAxisValue, "distance must be non-negative");
      }
      layout.width = row_width(people, layout);  // canvas of the distance-1 row
      layout.distance = value;
      break;
  }
  if (static_cast<std::size_t>(people) > pool.size()) {
    throw Error(ErrorCode::kPoolExhausted, std::to_string(people) + " people but only " +
                                               std::to_string(pool.size()) + " identities");
  }
  std::vector<prompt::SceneSpec> out;
  for (int s = 0; s < config.seeds; ++s) {
    prompt::SceneSpec scene = layout_scene(rotated(pool, s, people), config.setting, layout, s);
    scene.sampler = config.sampler;
    scene.sampler.seed = static_cast<std::uint64_t>(s);
    scene.harmony = config.harmony;
    scene.mode = config.mode;
    out.push_back(std::move(scene));
  }
  return out;
}

std::vector<SweepPoint> robustness_sweep(const SweepConfig& config, const compose::DenoiserFactory& factory,
                                         const metrics::SimilarityOracle& oracle,
                                         const metrics::PoseDetector& detector, int workers) {
  if (config.values.empty()) throw Error(ErrorCode::kInvalidAxisValue, "sweep needs at least one value");
  std::vector<SweepPoint> points;
  for (double value : config.values) {
    const std::vector<prompt::SceneSpec> scenes = sweep_scenes(config, value);
    std::vector<SyntheticScene> named;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      named.push_back({axis_name(config.axis) + "=" + format_value(value) + "/" + std::to_string(s), scenes[s]});
    }
    BenchmarkOptions options;
    options.workers = workers;
    // Each scene already carries its own seed; one sample per scene.
    std::vector<metrics::SceneRecord> records;
    std::vector<std::vector<pose::Pose2D>> gt(scenes.size());
    std::vector<std::vector<metrics::Detection>> det(scenes.size());
    records.resize(scenes.size());
    parallel_for(scenes.size(), workers, [&](std::size_t i) {
      const auto& scene = scenes[i];
      const compose::GenerationResult g = compose::generate(scene, factory, scene.sampler, scene.harmony, config.mode);
      std::vector<std::string> prompts;
      for (const auto& inst : scene.instances) {
        gt[i].push_back(inst.pose);
        prompts.push_back(inst.assigned_prompt);
      }
      records[i] = metrics::evaluate_scene(named[i].id, g.image, gt[i], prompts, oracle, detector, &det[i]);
    });
    points.push_back({value, metrics::aggregate(records, gt, det)});
  }
  return points;
}

std::vector<ReportRow> report_rows(const std::vector<ModeResult>& results) {
  std::vector<ReportRow> rows;
  for (const auto& r : results) {
    const std::string method = mode_name(r.mode);
    const auto& rep = r.report;
    rows.push_back({method, "cio_sim", rep.cio_sim.mean, rep.cio_sim.std});
    rows.push_back({method, "cio_sigma", rep.cio_sigma.mean, rep.cio_sigma.std});
    rows.push_back({method, "cio_diff", rep.cio_diff.mean, rep.cio_diff.std});
    rows.push_back({method, "hnd", rep.hnd.mean, rep.hnd.std});
    rows.push_back({method, "ap", rep.ap.ap, 0.0});
    rows.push_back({method, "ap_m", rep.ap.ap_m, 0.0});
    rows.push_back({method, "ap_l", rep.ap.ap_l, 0.0});
  }
  return rows;
}

std::vector<ReportRow> sweep_rows(SweepAxis axis, const std::vector<SweepPoint>& points) {
  std::vector<ReportRow> rows;
  for (const auto& p : points) {
    const std::string method = axis_name(axis) + "=" + format_value(p.value);
    rows.push_back({method, "cio_sim", p.report.cio_sim.mean, p.report.cio_sim.std});
    rows.push_back({method, "cio_sigma", p.report.cio_sigma.mean, p.report.cio_sigma.std});
    rows.push_back({method, "cio_diff", p.report.cio_diff.mean, p.report.cio_diff.std});
    rows.push_back({method, "hnd", p.report.hnd.mean, p.report.hnd.std});
    rows.push_back({method, "ap", p.report.ap.ap, 0.0});
  }
  return rows;
}

std::string render_report(const std::vector<ReportRow>& rows, ReportFormat format) {
  std::ostringstream out;
  if (format == ReportFormat::kCsv) {
    out << "method,metric,mean,std\n";
    for (const auto& r : rows) {
      out << r.method << ',' << r.metric << ',' << format_number(r.mean) << ',' << format_number(r.std) << '\n';
    }
  } else {
    out << "| method | metric | mean | std |\n|---|---|---:|---:|\n";
    for (const auto& r : rows) {
      out << "| " << r.method << " | " << r.metric << " | " << format_number(r.mean) << " | "
          << format_number(r.std) << " |\n";
    }
  }
  return out.str();
}

void write_report(const std::vector<ReportRow>& rows, ReportFormat format, const std::filesystem::path& path) {
  const std::string text = render_report(rows, format);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

std::string scene_jsonl(const std::vector<ModeResult>& results) {
  std::string out;
  for (const auto& r : results) {
    for (const auto& rec : r.records) {
      for (const auto& inst : rec.instances) {
        nlohmann::json j = metrics::instance_record_json(inst);
        j["mode"] = mode_name(r.mode);
        j["gt_count"] = rec.gt_count;
        j["detected"] = rec.detected;
        out += j.dump();
        out += '\n';
      }
    }
  }
  return out;
}

Image line_plot(const std::vector<double>& xs, const std::vector<double>& ys, int width, int height) {
  Image img(3, height, width, 1.0);
  const int left = 24, right = 12, top = 12, bottom = 24;
  auto set = [&](int x, int y, std::array<double, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    for (int k = 0; k < 3; ++k) img.at(k, y, x) = c[k];
  };
  const std::array<double, 3> black{-1, -1, -1}, blue{-1, -0.4, 0.8}, grey{0.6, 0.6, 0.6};
  for (int x = left; x < width - right; ++x) set(x, height - bottom, black);
  for (int y = top; y <= height - bottom; ++y) set(left, y, black);
  if (xs.empty()) return img;

  std::vector<double> finite_y;
  for (double y : ys) {
    if (std::isfinite(y)) finite_y.push_back(y);
  }
  double x_lo = *std::min_element(xs.begin(), xs.end()), x_hi = *std::max_element(xs.begin(), xs.end());
  double y_lo = finite_y.empty() ? 0.0 : *std::min_element(finite_y.begin(), finite_y.end());
  double y_hi = finite_y.empty() ? 1.0 : *std::max_element(finite_y.begin(), finite_y.end());
  if (x_hi - x_lo < 1e-12) { x_lo -= 1.0; x_hi += 1.0; }
  if (y_hi - y_lo < 1e-12) { y_lo -= 1.0; y_hi += 1.0; }
  const double pad = 0.05 * (y_hi - y_lo);
  y_lo -= pad;
  y_hi += pad;
  auto px = [&](double x) { return left + 6 + (x - x_lo) / (x_hi - x_lo) * (width - left - right - 12); };
  auto py = [&](double y) { return height - bottom - 6 - (y - y_lo) / (y_hi - y_lo) * (height - top - bottom - 12); };

  for (int k = 0; k <= 4; ++k) {
    const int gy = static_cast<int>(std::lround(py(y_lo + pad + k * (y_hi - y_lo - 2 * pad) / 4.0)));
    for (int x = left + 1; x < width - right; x += 3) set(x, gy, grey);
  }
  std::vector<std::size_t> order(xs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  for (std::size_t n = 0; n + 1 < order.size(); ++n) {
    const std::size_t a = order[n], b = order[n + 1];
    if (!std::isfinite(ys[a]) || !std::isfinite(ys[b])) continue;
    const double x0 = px(xs[a]), y0 = py(ys[a]), x1 = px(xs[b]), y1 = py(ys[b]);
    const int samples = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) * 2 + 1;
    for (int s = 0; s <= samples; ++s) {
      const double f = static_cast<double>(s) / samples;
      set(static_cast<int>(std::lround(x0 + f * (x1 - x0))), static_cast<int>(std::lround(y0 + f * (y1 - y0))), blue);
    }
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(ys[i])) continue;
    const int cx = static_cast<int>(std::lround(px(xs[i]))), cy = static_cast<int>(std::lround(py(ys[i])));
    for (int dy = -2; dy <= 2; ++dy) {
      for (int dx = -2; dx <= 2; ++dx) set(cx + dx, cy + dy, black);
    }
  }
  return img;
}

std::vector<std::filesystem::path> emit_plots(SweepAxis axis, const std::vector<SweepPoint>& points,
                                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::vector<std::pair<std::string, std::function<double(const metrics::MetricsReport&)>>> series{
      {"cio_sim", [](const auto& r) { return r.cio_sim.mean; }},
      {"cio_sigma", [](const auto& r) { return r.cio_sigma.mean; }},
      {"cio_diff", [](const auto& r) { return r.cio_diff.mean; }},
      {"hnd", [](const auto& r) { return r.hnd.mean; }},
      {"ap", [](const auto& r) { return r.ap.ap; }},
  };
  std::vector<double> xs;
  for (const auto& p : points) xs.push_back(p.value);
  std::string prefix = axis_name(axis);
  std::transform(prefix.begin(), prefix.end(), prefix.begin(), [](unsigned char c) { return std::tolower(c); });
  std::vector<std::filesystem::path> paths;
  for (const auto& [name, get] : series) {
    std::vector<double> ys;
    for (const auto& p : points) ys.push_back(get(p.report));
    const auto path = dir / (prefix + "_" + name + ".png");
    png::write_file(path, png::encode_image(line_plot(xs, ys)));
    paths.push_back(path);
  }
  return paths;
}

}  // namespace finecontrol::bench
