#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "finecontrol/benchio.hpp"
#include "finecontrol/png_io.hpp"
#include "support/fixtures.hpp"

using namespace finecontrol;
using namespace finecontrol::bench;
using fixtures::code_of;

namespace {

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("finecontrol_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool dilated_regions_disjoint(const prompt::SceneSpec& s) {
  std::vector<pose::OccupancyMap> occ;
  for (const auto& inst : s.instances) {
    occ.push_back(pose::instance_occupancy(inst.pose, s.canvas.height, s.canvas.width));
  }
  for (int y = 0; y < s.canvas.height; ++y) {
    for (int x = 0; x < s.canvas.width; ++x) {
      int covered = 0;
      for (const auto& o : occ) covered += o.at(y, x);
      if (covered > 1) return false;
    }
  }
  return true;
}

BenchmarkManifest small_manifest() {
  BenchmarkManifest m = default_manifest();
  m.counts = {{2, 2}, {3, 1}};
  m.sampler.num_steps = 4;
  m.seed = 77;
  return m;
}

std::vector<ReportRow> fixture_rows() {
  return {{"FINECONTROL", "cio_sigma", 0.56, 0.21},
          {"FINECONTROL", "ap", 63.2, 0.0},
          {"GLOBAL", "cio_sigma", 0.34, 0.19},
          {"GLOBAL", "ap_l", std::numeric_limits<double>::quiet_NaN(), 0.0}};
}

}  // namespace

TEST_CASE("default rows keep dilated regions apart and fit the canvas") {
  for (int people = 1; people <= 8; ++people) {
    for (double scale : {1.0, 0.75, 0.5, 0.25, 0.1}) {
      CAPTURE(people);
      CAPTURE(scale);
      const LayoutParams layout{64, scale, 1.0, 0};
      std::vector<std::string> ids(people, "red");
      const auto scene = layout_scene(ids, "indoors", layout, 0);
      CHECK(scene.canvas.height == 64);
      CHECK(scene.canvas.width % 16 == 0);
      CHECK_FALSE(prompt::validate_scene_json(prompt::scene_to_json(scene)).has_value());
      CHECK(dilated_regions_disjoint(scene));
      const auto order = prompt::left_to_right_order(row_poses(people, layout));
      for (int i = 0; i < people; ++i) CHECK(order[i] == i);
    }
  }
  CHECK(row_width(2, {64, 0.75, 1.0, 0}) == 64);
  CHECK(row_width(2, {64, 0.75, 1.0, 96}) == 96);
}

TEST_CASE("synthetic scenes are deterministic") {
  const auto m = small_manifest();
  const auto a = synth_scenes(m);
  const auto b = synth_scenes(m);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(prompt::scene_to_json(a[i].scene) == prompt::scene_to_json(b[i].scene));
  }
  CHECK(a[0].id == "n2_000");
  CHECK(a[2].id == "n3_000");
  CHECK(a[1].scene.seed == m.seed + 1);
  auto other = m;
  other.seed = 78;
  CHECK(prompt::scene_to_json(synth_scenes(other)[0].scene) != prompt::scene_to_json(a[0].scene));
}

TEST_CASE("identities are drawn without replacement") {
  auto m = default_manifest();
  m.counts = {{2, 50}, {3, 30}, {8, 20}};
  const auto scenes = synth_scenes(m);
  std::map<int, int> histogram;
  for (const auto& s : scenes) {
    histogram[static_cast<int>(s.scene.instances.size())]++;
    std::set<std::string> ids;
    for (const auto& inst : s.scene.instances) ids.insert(inst.identity);
    CHECK(ids.size() == s.scene.instances.size());
    CHECK(dilated_regions_disjoint(s.scene));
    CHECK_FALSE(prompt::validate_scene_json(prompt::scene_to_json(s.scene)).has_value());
  }
  CHECK(scenes.size() == 100);
  CHECK(histogram == std::map<int, int>{{2, 50}, {3, 30}, {8, 20}});

  m.counts = {{9, 1}};
  CHECK(code_of([&] { synth_scenes(m); }) == ErrorCode::kPoolExhausted);
}

TEST_CASE("manifest json round trip and validation") {
  const auto m = small_manifest();
  const auto back = BenchmarkManifest::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());

  auto j = m.to_json();
  j["identity_pool"] = nlohmann::json::array();
  CHECK(code_of([&] { BenchmarkManifest::from_json(j); }) == ErrorCode::kSchemaInvalid);
  j = m.to_json();
  j["counts"] = {{{"people", 2}, {"scenes", 0}}};
  CHECK(code_of([&] { BenchmarkManifest::from_json(j); }) == ErrorCode::kSchemaInvalid);
  j = m.to_json();
  j["counts"] = "many";
  CHECK(code_of([&] { BenchmarkManifest::from_json(j); }) == ErrorCode::kSchemaInvalid);
  CHECK(code_of([] { BenchmarkManifest::load("/nonexistent/manifest.json"); }) == ErrorCode::kIo);
}

TEST_CASE("training set is deterministic and well formed") {
  const auto& palette = denoise::default_palette();
  const auto a = make_training_set(20, 5, palette, {"indoors", "at night"});
  const auto b = make_training_set(20, 5, palette, {"indoors", "at night"});
  REQUIRE(a.size() == 20);
  int pairs = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(max_abs_diff(a[i].image, b[i].image) == 0.0);
    CHECK(a[i].clauses == b[i].clauses);
    CHECK((a[i].clauses.size() == 2 || a[i].clauses.size() == 3));
    pairs += a[i].clauses.size() == 3 ? 1 : 0;
    CHECK(a[i].image.height() == 64);
    CHECK(a[i].control.field.channels() == 1);
    double peak = 0.0;
    for (double v : a[i].image.data()) peak = std::max(peak, std::abs(v));
    CHECK(peak > 0.5);
  }
  CHECK(pairs > 0);
  CHECK(pairs < 20);
  CHECK(code_of([&] { make_training_set(1, 0, palette, {}); }) == ErrorCode::kPoolExhausted);
}

TEST_CASE("delta benchmark is paired, reproducible and near perfect on disjoint scenes") {
  const auto scenes = synth_scenes(small_manifest());
  const auto factory = compose::delta_factory(denoise::default_palette(), diffusion::default_schedule());
  const metrics::ToySimilarityOracle oracle;
  const metrics::ToyPoseDetector detector;
  const std::vector<CompositionMode> modes{CompositionMode::kFineControl, CompositionMode::kGlobal};
  BenchmarkOptions opts;
  opts.seeds_per_scene = 2;
  const auto r1 = run_benchmark(scenes, modes, factory, oracle, detector, opts);
  opts.workers = 2;
  const auto r2 = run_benchmark(scenes, modes, factory, oracle, detector, opts);
  REQUIRE(r1.size() == 2);
  CHECK(scene_jsonl(r1) == scene_jsonl(r2));
  CHECK(render_report(report_rows(r1), ReportFormat::kCsv) == render_report(report_rows(r2), ReportFormat::kCsv));

  REQUIRE(r1[0].records.size() == 6);
  for (std::size_t i = 0; i < r1[0].records.size(); ++i) {
    CHECK(r1[0].records[i].scene_id == r1[1].records[i].scene_id);
  }
  const auto& fine = r1[0].report;
  CHECK(fine.cio_sigma.mean > 0.999);
  CHECK(fine.cio_sigma.count == 14);
  CHECK(fine.hnd.mean == 0.0);
  CHECK(fine.ap.ap > 50.0);
  CHECK_FALSE(fine.fid.has_value());
}

TEST_CASE("report rendering") {
  CHECK(render_report({}, ReportFormat::kCsv) == "method,metric,mean,std\n");
  const auto rows = fixture_rows();
  const std::filesystem::path golden = FINECONTROL_TEST_DATA_DIR;
  CHECK(render_report(rows, ReportFormat::kCsv) == read_text(golden / "report.csv"));
  CHECK(render_report(rows, ReportFormat::kMarkdown) == read_text(golden / "report.md"));

  const auto dir = scratch_dir("report");
  write_report(rows, ReportFormat::kCsv, dir / "nested" / "r.csv");
  CHECK(read_text(dir / "nested" / "r.csv") == read_text(golden / "report.csv"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("sweep axes and values") {
  CHECK(parse_axis("people_count") == SweepAxis::kPeopleCount);
  CHECK(parse_axis("SCALE") == SweepAxis::kPersonScale);
  CHECK(parse_axis("INTER_DISTANCE") == SweepAxis::kInterDistance);
  CHECK(code_of([] { parse_axis("height"); }) == ErrorCode::kInvalidAxisValue);
  CHECK(default_axis_values(SweepAxis::kPeopleCount) == std::vector<double>{3, 5, 7});

  SweepConfig cfg;
  cfg.seeds = 2;
  cfg.axis = SweepAxis::kPersonScale;
  CHECK(code_of([&] { sweep_scenes(cfg, 0.0); }) == ErrorCode::kInvalidAxisValue);
  cfg.axis = SweepAxis::kInterDistance;
  CHECK(code_of([&] { sweep_scenes(cfg, -0.5); }) == ErrorCode::kInvalidAxisValue);
  cfg.axis = SweepAxis::kPeopleCount;
  CHECK(code_of([&] { sweep_scenes(cfg, 2.5); }) == ErrorCode::kInvalidAxisValue);
  CHECK(code_of([&] { sweep_scenes(cfg, 9); }) == ErrorCode::kPoolExhausted);
}

TEST_CASE("sweeps vary one factor with shared seeds") {
  SweepConfig cfg;
  cfg.seeds = 3;
  cfg.axis = SweepAxis::kInterDistance;
  const auto near = sweep_scenes(cfg, 1.0);
  const auto far = sweep_scenes(cfg, 0.25);
  REQUIRE(near.size() == 3);
  for (std::size_t s = 0; s < near.size(); ++s) {
    CHECK(near[s].sampler.seed == far[s].sampler.seed);
    CHECK(near[s].canvas == far[s].canvas);
    CHECK(near[s].instances.size() == 3);
    CHECK(dilated_regions_disjoint(near[s]));
    CHECK_FALSE(dilated_regions_disjoint(far[s]));
    // The central figure stays put.
    CHECK(near[s].instances[1].pose.centroid().first == doctest::Approx(far[s].instances[1].pose.centroid().first));
    for (std::size_t i = 0; i < 3; ++i) CHECK(near[s].instances[i].identity == far[s].instances[i].identity);
  }
  CHECK(near[0].instances[0].identity != near[1].instances[0].identity);

  cfg.axis = SweepAxis::kPersonScale;
  const auto big = sweep_scenes(cfg, 1.0);
  const auto tiny = sweep_scenes(cfg, 0.1);
  CHECK(big[0].canvas == tiny[0].canvas);
  CHECK(pose::instance_occupancy(big[0].instances[0].pose, 64, big[0].canvas.width).count() >
        pose::instance_occupancy(tiny[0].instances[0].pose, 64, tiny[0].canvas.width).count());

  cfg.axis = SweepAxis::kPeopleCount;
  CHECK(sweep_scenes(cfg, 7)[0].instances.size() == 7);
}

TEST_CASE("hard-phase masks are disjoint at unit distance") {
  SweepConfig cfg;
  cfg.seeds = 1;
  cfg.axis = SweepAxis::kInterDistance;
  const auto scene = sweep_scenes(cfg, 1.0)[0];
  const std::vector<Shape2> none;
  const auto masks = compose::build_scene_masks(scene, none, 0.001);
  const auto& base = masks.hard.base();
  for (int y = 0; y < scene.canvas.height; ++y) {
    for (int x = 0; x < scene.canvas.width; ++x) {
      int ones = 0;
      for (const auto& m : base) ones += m.at(0, y, x) == 1.0 ? 1 : 0;
      double sum = 0.0;
      for (const auto& m : base) sum += m.at(0, y, x);
      CHECK(sum == doctest::Approx(1.0));
      CHECK(ones <= 1);
    }
  }
}

TEST_CASE("robustness sweep and plots") {
  SweepConfig cfg;
  cfg.seeds = 2;
  cfg.axis = SweepAxis::kPeopleCount;
  cfg.values = {3};
  cfg.sampler.num_steps = 3;
  const auto factory = compose::delta_factory(denoise::default_palette(), diffusion::default_schedule());
  const metrics::ToySimilarityOracle oracle;
  const metrics::ToyPoseDetector detector;
  const auto points = robustness_sweep(cfg, factory, oracle, detector);
  REQUIRE(points.size() == 1);
  CHECK(points[0].value == 3);
  CHECK(points[0].report.cio_sigma.count == 6);

  const auto dir = scratch_dir("plots");
  const auto files = emit_plots(cfg.axis, points, dir);
  CHECK(files.size() == 5);
  for (const auto& f : files) {
    const std::string bytes = read_text(f);
    REQUIRE(bytes.size() > 8);
    CHECK(bytes.substr(1, 3) == "PNG");
  }
  CHECK(sweep_rows(cfg.axis, points).front().method == "PEOPLE_COUNT=3");
  std::filesystem::remove_all(dir);

  cfg.values.clear();
  CHECK(code_of([&] { robustness_sweep(cfg, factory, oracle, detector); }) == ErrorCode::kInvalidAxisValue);
}

TEST_CASE("line plot draws the series") {
  const Image img = line_plot({0, 1, 2}, {0.2, 0.5, 0.4}, 120, 80);
  CHECK(img.width() == 120);
  CHECK(img.height() == 80);
  int dark = 0;
  for (int y = 0; y < 80; ++y) {
    for (int x = 0; x < 120; ++x) dark += img.at(0, y, x) < 0.0 ? 1 : 0;
  }
  CHECK(dark > 100);
  CHECK_NOTHROW(line_plot({1.0}, {std::numeric_limits<double>::quiet_NaN()}, 60, 40));
}

TEST_CASE("COCO keypoint import") {
  auto coco_person = [](long long image, double dx, int visible) {
    nlohmann::json kp = nlohmann::json::array();
    const auto p = fixtures::standing_coco(dx);
    for (int i = 0; i < 17; ++i) {
      kp.push_back(p.keypoints[i].x);
      kp.push_back(p.keypoints[i].y);
      kp.push_back(i < visible ? 2 : 0);
    }
    return nlohmann::json{{"image_id", image}, {"category_id", 1}, {"iscrowd", 0}, {"keypoints", kp}};
  };
  nlohmann::json coco = {{"images", {{{"id", 7}, {"height", 64}, {"width", 96}}, {{"id", 9}, {"height", 64}, {"width", 64}}}},
                         {"annotations", {coco_person(7, -10, 17), coco_person(7, 30, 17), coco_person(9, 0, 1),
                                          coco_person(9, 0, 17)}}};
  coco["annotations"].push_back(coco_person(9, 5, 17));
  coco["annotations"].back()["iscrowd"] = 1;

  const auto manifest = default_manifest();
  const auto scenes = import_coco_keypoints(coco, manifest);
  REQUIRE(scenes.size() == 2);
  CHECK(scenes[0].id == "coco_7");
  CHECK(scenes[0].scene.canvas == Shape2{64, 96});
  REQUIRE(scenes[0].scene.instances.size() == 2);
  CHECK(scenes[0].scene.instances[0].identity != scenes[0].scene.instances[1].identity);
  CHECK(scenes[1].scene.instances.size() == 1);  // one-keypoint and crowd people dropped
  CHECK(prompt::validate_scene_json(prompt::scene_to_json(scenes[0].scene)) == std::nullopt);
  CHECK(import_coco_keypoints(coco, manifest).front().scene.instances[0].identity ==
        scenes[0].scene.instances[0].identity);

  auto small = manifest;
  small.identity_pool = {"red"};
  CHECK(code_of([&] { import_coco_keypoints(coco, small); }) == ErrorCode::kPoolExhausted);
  coco["annotations"][0]["keypoints"].erase(0);
  CHECK(code_of([&] { import_coco_keypoints(coco, manifest); }) == ErrorCode::kSchemaInvalid);
  CHECK(code_of([&] { import_coco_keypoints(nlohmann::json::object(), manifest); }) == ErrorCode::kSchemaInvalid);
}
