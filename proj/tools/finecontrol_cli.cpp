#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "finecontrol/benchio.hpp"
#include "finecontrol/composer.hpp"
#include "finecontrol/error.hpp"
#include "finecontrol/metrics.hpp"
#include "finecontrol/png_io.hpp"
#include "finecontrol/service.hpp"
#include "finecontrol/tiny_denoiser.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace finecontrol;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kSchemaInvalid, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

// Tiny network when a checkpoint is given, otherwise the delta renderer.
compose::DenoiserFactory make_factory(const std::string& model) {
  if (model.empty()) return compose::delta_factory(denoise::default_palette(), diffusion::default_schedule());
  auto params = std::make_shared<const denoise::TinyParams>(denoise::TinyParams::load(model));
  return compose::shared_factory(
      std::make_shared<denoise::TinyDenoiser>(std::move(params), diffusion::default_schedule()));
}

std::vector<CompositionMode> parse_modes(const std::vector<std::string>& names) {
  std::vector<CompositionMode> modes;
  for (const auto& n : names) modes.push_back(parse_mode(n));
  return modes;
}

struct GenerateArgs {
  std::string scene;
  std::optional<std::string> mode;
  std::optional<int> steps;
  std::optional<double> tau;
  std::optional<double> hard_frac;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string model;
};

int run_generate(const GenerateArgs& a) {
  prompt::SceneSpec scene = prompt::scene_from_json(read_json(a.scene));
  if (a.mode) scene.mode = parse_mode(*a.mode);
  if (a.steps) scene.sampler.num_steps = *a.steps;
  if (a.tau) scene.harmony.tau = *a.tau;
  if (a.hard_frac) scene.harmony.hard_fraction = *a.hard_frac;
  if (a.seed) scene.sampler.seed = *a.seed;

  const auto g = compose::generate(scene, make_factory(a.model));
  const fs::path out = a.out;
  fs::create_directories(out);
  png::write_file(out / "image.png", png::encode_image(g.image));
  const auto& soft = g.masks.soft.base();
  for (std::size_t i = 0; i < soft.size(); ++i) {
    png::write_file(out / ("mask_" + std::to_string(i) + ".png"), pose::mask_png(soft[i]));
  }
  write_text(out / "trace.json", g.trace.to_json().dump(2));
  write_text(out / "scene.json", prompt::scene_to_json(scene).dump(2));
  std::cout << "wrote " << (out / "image.png").string() << " (" << mode_name(scene.mode) << ", "
            << g.trace.hard_steps << "/" << g.trace.num_steps << " hard steps)\n";
  return 0;
}

struct BenchArgs {
  std::string manifest;
  std::vector<std::string> modes{"FINECONTROL", "X_COMPOSE", "H_V2", "GLOBAL"};
  int seeds = 1;
  int workers = 1;
  std::string model;
  std::string out = "bench_out";
};

int run_bench(const BenchArgs& a) {
  const auto manifest = a.manifest.empty() ? bench::default_manifest() : bench::BenchmarkManifest::load(a.manifest);
  const auto scenes = bench::synth_scenes(manifest);
  bench::BenchmarkOptions opts;
  opts.seeds_per_scene = a.seeds;
  opts.workers = a.workers;
  opts.progress = [](const std::string& msg) { std::cerr << msg << '\n'; };
  const metrics::ToySimilarityOracle oracle;
  const metrics::ToyPoseDetector detector;
  const auto results = bench::run_benchmark(scenes, parse_modes(a.modes), make_factory(a.model), oracle,
                                            detector, opts);
  const auto rows = bench::report_rows(results);
  const fs::path out = a.out;
  bench::write_report(rows, bench::ReportFormat::kCsv, out / "report.csv");
  bench::write_report(rows, bench::ReportFormat::kMarkdown, out / "report.md");
  write_text(out / "scenes.jsonl", bench::scene_jsonl(results));
  json reports = json::object();
  for (const auto& r : results) reports[mode_name(r.mode)] = r.report.to_json();
  write_text(out / "report.json", reports.dump(2));
  std::cout << bench::render_report(rows, bench::ReportFormat::kMarkdown);
  return 0;
}

struct SweepArgs {
  std::string axis = "PEOPLE_COUNT";
  std::vector<double> values;
  int seeds = 20;
  int workers = 1;
  std::string mode = "FINECONTROL";
  std::string model;
  std::string out = "sweep_out";
};

int run_sweep(const SweepArgs& a) {
  bench::SweepConfig cfg;
  cfg.axis = bench::parse_axis(a.axis);
  cfg.values = a.values.empty() ? bench::default_axis_values(cfg.axis) : a.values;
  cfg.seeds = a.seeds;
  cfg.mode = parse_mode(a.mode);
  const metrics::ToySimilarityOracle oracle;
  const metrics::ToyPoseDetector detector;
  const auto points = bench::robustness_sweep(cfg, make_factory(a.model), oracle, detector, a.workers);
  const auto rows = bench::sweep_rows(cfg.axis, points);
  const fs::path out = a.out;
  bench::write_report(rows, bench::ReportFormat::kCsv, out / "sweep.csv");
  bench::write_report(rows, bench::ReportFormat::kMarkdown, out / "sweep.md");
  bench::emit_plots(cfg.axis, points, out);
  std::cout << bench::render_report(rows, bench::ReportFormat::kMarkdown);
  return 0;
}

struct TrainArgs {
  int epochs = 20;
  std::uint64_t seed = 0;
  int examples = 1500;
  std::string out = "tiny.ckpt";
};

int run_train(const TrainArgs& a) {
  const auto data = bench::make_training_set(a.examples, a.seed, denoise::default_palette(),
                                             bench::default_manifest().setting_pool);
  denoise::TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.seed = a.seed;
  const auto start = std::chrono::steady_clock::now();
  const auto result = denoise::train_tiny_denoiser(data, diffusion::default_schedule(), cfg, [&](int e, double loss) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "epoch " << e + 1 << "/" << a.epochs << " loss " << loss << " (" << s << " s)\n";
  });
  result.params.save(a.out);
  std::cout << "saved " << a.out << " (" << result.params.size() << " parameters)\n";
  return 0;
}

// The ground truth is either one scene applied to every PNG in the directory,
// or {"version": 1, "images": [{"file": ..., "scene": {...}}]}.
int run_metrics(const std::string& pred, const std::string& gt_path) {
  const json gt = read_json(gt_path);
  std::vector<std::pair<fs::path, prompt::SceneSpec>> items;
  if (gt.contains("images")) {
    for (const auto& item : gt.at("images")) {
      items.emplace_back(fs::path(pred) / item.at("file").get<std::string>(),
                         prompt::scene_from_json(item.at("scene")));
    }
  } else {
    const auto scene = prompt::scene_from_json(gt);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(pred)) {
      if (e.path().extension() == ".png" && e.path().stem().string().rfind("mask_", 0) != 0) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) items.emplace_back(f, scene);
  }
  if (items.empty()) throw Error(ErrorCode::kEmptyGt, "no prediction images found in " + pred);

  const metrics::ToySimilarityOracle oracle;
  const metrics::ToyPoseDetector detector;
  std::vector<metrics::SceneRecord> records;
  std::vector<std::vector<pose::Pose2D>> gt_poses;
  std::vector<std::vector<metrics::Detection>> dets;
  for (const auto& [file, scene] : items) {
    const Image image = png::decode_image(png::read_file(file));
    std::vector<pose::Pose2D> poses;
    std::vector<std::string> prompts;
    for (const auto& inst : scene.instances) {
      poses.push_back(inst.pose);
      prompts.push_back(inst.assigned_prompt);
    }
    dets.emplace_back();
    records.push_back(metrics::evaluate_scene(file.filename().string(), image, poses, prompts, oracle, detector,
                                              &dets.back()));
    gt_poses.push_back(std::move(poses));
  }
  std::cout << metrics::aggregate(records, gt_poses, dets).to_json().dump(2) << '\n';
  return 0;
}

int run_serve(const std::string& host, int port, int http_threads) {
  service::JobService jobs(service::config_from_env());
  service::ApiServer server(jobs, http_threads);
  const int bound = server.bind(host, port);
  std::cerr << "listening on " << host << ":" << bound << '\n';
  server.listen();
  return 0;
}

int env_int(const char* name, int fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::atoi(v) : fallback;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Per-instance text conditioning for pose-guided diffusion sampling"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Sample one scene");
  g->add_option("--scene", gen.scene, "SceneSpec JSON")->required()->check(CLI::ExistingFile);
  g->add_option("--mode", gen.mode, "FINECONTROL, X_COMPOSE, H_V2 or GLOBAL");
  g->add_option("--steps", gen.steps, "DDIM steps");
  g->add_option("--tau", gen.tau, "Mask softmax temperature");
  g->add_option("--hard-frac", gen.hard_frac, "Fraction of initial steps with hard masks");
  g->add_option("--seed", gen.seed, "Sampler seed");
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--model", gen.model, "Tiny denoiser checkpoint (delta renderer when omitted)");

  BenchArgs bn;
  auto* b = app.add_subcommand("bench", "Run every scene of a manifest under each mode");
  b->add_option("--manifest", bn.manifest, "Manifest JSON (built-in default when omitted)");
  b->add_option("--modes", bn.modes, "Modes to compare")->expected(1, -1);
  b->add_option("--seeds", bn.seeds, "Paired seeds per scene")->check(CLI::PositiveNumber);
  b->add_option("--workers", bn.workers, "Worker threads")->check(CLI::PositiveNumber);
  b->add_option("--model", bn.model, "Tiny denoiser checkpoint");
  b->add_option("--out", bn.out, "Report directory");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Robustness sweep over one layout factor");
  s->add_option("--axis", sw.axis, "PEOPLE_COUNT, PERSON_SCALE or INTER_DISTANCE");
  s->add_option("--values", sw.values, "Axis values")->expected(1, -1);
  s->add_option("--seeds", sw.seeds, "Seeds per value")->check(CLI::PositiveNumber);
  s->add_option("--workers", sw.workers, "Worker threads")->check(CLI::PositiveNumber);
  s->add_option("--mode", sw.mode, "Composition mode");
  s->add_option("--model", sw.model, "Tiny denoiser checkpoint");
  s->add_option("--out", sw.out, "Report and plot directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train-toy", "Train the tiny denoiser on synthetic scenes");
  t->add_option("--epochs", tr.epochs, "Passes over the dataset")->check(CLI::PositiveNumber);
  t->add_option("--seed", tr.seed, "Data and initialisation seed");
  t->add_option("--examples", tr.examples, "Training examples")->check(CLI::PositiveNumber);
  t->add_option("--out", tr.out, "Checkpoint path");

  std::string pred, gt;
  auto* m = app.add_subcommand("metrics", "Score generated images against ground-truth scenes");
  m->add_option("--pred", pred, "Directory of generated PNGs")->required()->check(CLI::ExistingDirectory);
  m->add_option("--gt", gt, "Scene or image list JSON")->required()->check(CLI::ExistingFile);

  std::string host = "0.0.0.0";
  int port = env_int("PORT", 8080);
  int http_threads = 4;
  auto* sv = app.add_subcommand("serve", "HTTP job service (env: PORT, WORKERS, DATA_DIR, MODEL)");
  sv->add_option("--host", host, "Bind address");
  sv->add_option("--port", port, "Port");
  sv->add_option("--http-threads", http_threads, "Request threads")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*g) return run_generate(gen);
    if (*b) return run_bench(bn);
    if (*s) return run_sweep(sw);
    if (*t) return run_train(tr);
    if (*m) return run_metrics(pred, gt);
    if (*sv) return run_serve(host, port, http_threads);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
