#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include <httplib.h>

#include "doctest.h"
#include "finecontrol/figure.hpp"
#include "finecontrol/png_io.hpp"
#include "finecontrol/service.hpp"
#include "support/fixtures.hpp"

using namespace finecontrol;
using namespace finecontrol::service;
using nlohmann::json;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("finecontrol_service_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

json two_person_scene(int steps = 8) {
  prompt::SceneSpec s;
  s.setting = "indoors";
  s.sampler.num_steps = steps;
  s.instances.push_back({pose::standing_figure(16, 4, 50), "red", {}, false});
  s.instances.push_back({pose::standing_figure(48, 4, 50), "green", {}, false});
  return prompt::scene_to_json(s);
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  static const std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::vector<std::uint8_t> out;
  std::uint32_t buf = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=') break;
    buf = (buf << 6) | static_cast<std::uint32_t>(alphabet.find(c));
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((buf >> bits) & 0xFF));
    }
  }
  return out;
}

ApiError api_error_of(auto&& fn) {
  try {
    fn();
  } catch (const ApiError& e) {
    return e;
  }
  FAIL("expected an ApiError");
  return {};
}

// Holds every generation until release() is called.
struct Gate {
  std::promise<void> open;
  std::shared_future<void> opened = open.get_future().share();
  void release() { open.set_value(); }

  compose::DenoiserFactory factory() {
    auto inner = compose::delta_factory(denoise::default_palette(), diffusion::default_schedule());
    auto wait = opened;
    return [inner, wait](const compose::BranchRequest& r) {
      wait.wait();
      return inner(r);
    };
  }
};

struct LiveServer {
  JobService& jobs;
  ApiServer server;
  int port = 0;
  std::thread thread;

  explicit LiveServer(JobService& j) : jobs(j), server(j, 2) {
    port = server.bind("127.0.0.1", 0);
    thread = std::thread([this] { server.listen(); });
  }
  ~LiveServer() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(30, 0);
    return c;
  }
};

}  // namespace

TEST_CASE("base64 encoder") {
  const std::string text = "any carnal pleasure.";
  for (std::size_t n : {0u, 1u, 2u, 3u, 17u, 18u, 19u, 20u}) {
    std::vector<std::uint8_t> bytes(text.begin(), text.begin() + n);
    CHECK(base64_decode(base64_encode(bytes)) == bytes);
  }
  const std::vector<std::uint8_t> man{'M', 'a', 'n'};
  CHECK(base64_encode(man) == "TWFu");
  const std::vector<std::uint8_t> ma{'M', 'a'};
  CHECK(base64_encode(ma) == "TWE=");
}

TEST_CASE("job lifecycle through the service object") {
  const auto dir = fresh_dir("lifecycle");
  JobService jobs({dir, 1, {}});
  const SubmitResult r = jobs.submit(two_person_scene());
  CHECK(r.created);
  jobs.wait_idle();
  const auto job = jobs.get(r.id);
  REQUIRE(job);
  CHECK(job->state == JobState::kDone);
  CHECK(job->artifacts.count("image") == 1);

  const Artifact image = jobs.artifact(r.id, "image");
  CHECK(image.content_type == "image/png");
  REQUIRE(image.bytes.size() > 8);
  CHECK(image.bytes[1] == 'P');
  CHECK(jobs.artifact(r.id, "image").bytes == image.bytes);

  const json trace = json::parse(jobs.artifact(r.id, "trace").bytes);
  int hard = 0;
  for (const auto& s : trace["steps"]) hard += s["mask_mode"] == "HARD" ? 1 : 0;
  CHECK(hard == 2);  // ceil(0.25 * 8)
  CHECK(trace["hard_steps"] == 2);

  const json metrics = json::parse(jobs.artifact(r.id, "metrics").bytes);
  CHECK(metrics["available"] == true);
  CHECK(metrics["hnd"] == 0);
  const json masks = json::parse(jobs.artifact(r.id, "masks").bytes);
  CHECK(masks["soft"].size() == 2);

  CHECK(api_error_of([&] { jobs.artifact("nope", "image"); }).status == 404);
  CHECK(api_error_of([&] { jobs.artifact(r.id, "video"); }).status == 404);
  std::filesystem::remove_all(dir);
}

TEST_CASE("invalid scenes are rejected with the field path") {
  const auto dir = fresh_dir("invalid");
  JobService jobs({dir, 1, {}});
  json scene = two_person_scene();
  scene.erase("instances");
  const ApiError e = api_error_of([&] { jobs.submit(scene); });
  CHECK(e.status == 422);
  CHECK(e.code == "SCHEMA_INVALID");
  CHECK(e.path == "/instances");
  std::filesystem::remove_all(dir);
}

TEST_CASE("failed generations carry an error") {
  const auto dir = fresh_dir("failed");
  JobService jobs({dir, 1, {}});
  json scene = two_person_scene();
  scene["instances"][0]["identity"] = "a wizard";
  const auto r = jobs.submit(scene);
  jobs.wait_idle();
  const auto job = jobs.get(r.id);
  CHECK(job->state == JobState::kFailed);
  CHECK(job->error.find("UNKNOWN_TOKEN") != std::string::npos);
  CHECK(api_error_of([&] { jobs.artifact(r.id, "image"); }).status == 409);
  std::filesystem::remove_all(dir);
}

TEST_CASE("http contract") {
  const auto dir = fresh_dir("http");
  Gate gate;
  JobService jobs({dir, 1, gate.factory()});
  LiveServer live(jobs);
  auto cli = live.client();

  httplib::Headers key{{"Idempotency-Key", "abc-1"}};
  auto first = cli.Post("/api/scenes", key, two_person_scene().dump(), "application/json");
  REQUIRE(first);
  CHECK(first->status == 202);
  const std::string id = json::parse(first->body)["id"];
  auto again = cli.Post("/api/scenes", key, two_person_scene().dump(), "application/json");
  REQUIRE(again);
  CHECK(json::parse(again->body)["id"] == id);
  CHECK(json::parse(again->body)["duplicate"] == true);

  auto pending = cli.Get("/api/jobs/" + id + "/artifacts/image");
  REQUIRE(pending);
  CHECK(pending->status == 409);
  CHECK(json::parse(pending->body)["error"]["code"] == "NOT_READY");

  auto status = cli.Get("/api/jobs/" + id);
  REQUIRE(status);
  const std::string state = json::parse(status->body)["state"];
  CHECK((state == "QUEUED" || state == "RUNNING"));

  gate.release();
  jobs.wait_idle();
  status = cli.Get("/api/jobs/" + id);
  const json view = json::parse(status->body);
  CHECK(view["state"] == "DONE");
  CHECK(view["version"] == 1);
  CHECK(view["artifacts"]["image"] == "/api/jobs/" + id + "/artifacts/image");

  auto image = cli.Get("/api/jobs/" + id + "/artifacts/image");
  REQUIRE(image);
  CHECK(image->status == 200);
  CHECK(image->get_header_value("Content-Type") == "image/png");
  CHECK(image->body.substr(1, 3) == "PNG");
  auto image_again = cli.Get("/api/jobs/" + id + "/artifacts/image");
  CHECK(image_again->body == image->body);

  auto trace = cli.Get("/api/jobs/" + id + "/artifacts/trace");
  REQUIRE(trace);
  const json t = json::parse(trace->body);
  int hard = 0;
  for (const auto& s : t["steps"]) hard += s["mask_mode"] == "HARD" ? 1 : 0;
  CHECK(hard == 2);

  auto unknown = cli.Get("/api/jobs/doesnotexist");
  REQUIRE(unknown);
  CHECK(unknown->status == 404);
  CHECK(json::parse(unknown->body)["error"]["code"] == "UNKNOWN_JOB");
  CHECK(cli.Get("/api/jobs/doesnotexist/artifacts/image")->status == 404);

  json bad = two_person_scene();
  bad.erase("instances");
  auto rejected = cli.Post("/api/scenes", bad.dump(), "application/json");
  REQUIRE(rejected);
  CHECK(rejected->status == 422);
  CHECK(json::parse(rejected->body)["error"]["path"] == "/instances");
  auto garbage = cli.Post("/api/scenes", "{not json", "application/json");
  CHECK(garbage->status == 422);
  std::filesystem::remove_all(dir);
}

TEST_CASE("mask preview over http") {
  const auto dir = fresh_dir("preview");
  JobService jobs({dir, 1, {}});
  LiveServer live(jobs);
  auto cli = live.client();

  const json one = {{"version", 1},
                    {"canvas", {{"h", 64}, {"w", 64}}},
                    {"poses", {pose::pose_to_json(fixtures::standing_coco())}}};
  auto r1 = cli.Post("/api/masks/preview", one.dump(), "application/json");
  REQUIRE(r1);
  REQUIRE(r1->status == 200);
  const json b1 = json::parse(r1->body);
  REQUIRE(b1["masks"].size() == 1);
  const auto m1 = png::decode(base64_decode(b1["masks"][0]));
  CHECK(m1.width == 64);
  CHECK(*std::min_element(m1.pixels.begin(), m1.pixels.end()) == 255);

  const json two = {{"version", 1},
                    {"canvas", {{"h", 64}, {"w", 64}}},
                    {"harmony", {{"tau", 0.001}}},
                    {"poses", {pose::pose_to_json(fixtures::standing_coco(-2)), pose::pose_to_json(fixtures::standing_coco(2))}}};
  auto r2 = cli.Post("/api/masks/preview", two.dump(), "application/json");
  REQUIRE(r2);
  REQUIRE(r2->status == 200);
  const json b2 = json::parse(r2->body);
  const auto a = png::decode(base64_decode(b2["masks"][0]));
  const auto b = png::decode(base64_decode(b2["masks"][1]));
  const auto oa = pose::instance_occupancy(fixtures::standing_coco(-2), 64, 64);
  const auto ob = pose::instance_occupancy(fixtures::standing_coco(2), 64, 64);
  int overlap = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (!oa.at(y, x) || !ob.at(y, x)) continue;
      ++overlap;
      const int pa = a.pixels[static_cast<std::size_t>(y) * 64 + x];
      const int pb = b.pixels[static_cast<std::size_t>(y) * 64 + x];
      CHECK((pa == 127 || pa == 128));
      CHECK((pb == 127 || pb == 128));
    }
  }
  CHECK(overlap > 100);

  json empty = one;
  empty["poses"] = json::array();
  auto r3 = cli.Post("/api/masks/preview", empty.dump(), "application/json");
  REQUIRE(r3);
  CHECK(r3->status == 422);
  CHECK(json::parse(r3->body)["error"]["path"] == "/poses");

  json broken = one;
  broken["poses"][0]["keypoints"][2][2] = 5;
  auto r4 = cli.Post("/api/masks/preview", broken.dump(), "application/json");
  CHECK(r4->status == 422);
  CHECK(json::parse(r4->body)["error"]["path"] == "/poses/0/keypoints/2/2");
  std::filesystem::remove_all(dir);
}

TEST_CASE("mask preview is fast at 512 squared with ten poses") {
  json req = {{"version", 1}, {"canvas", {{"h", 512}, {"w", 512}}}, {"poses", json::array()}};
  for (int i = 0; i < 10; ++i) {
    req["poses"].push_back(pose::pose_to_json(pose::standing_figure(50 + 45 * i, 150, 200)));
  }
  preview_masks(req);  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  const json out = preview_masks(req);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("preview took " << ms << " ms");
  CHECK(out["masks"].size() == 10);
  CHECK(ms < 200.0);
}

TEST_CASE("jobs survive a restart") {
  const auto dir = fresh_dir("restart");
  std::string id;
  {
    JobService jobs({dir, 1, {}});
    id = jobs.submit(two_person_scene(4), "key-7").id;
    jobs.wait_idle();
  }
  // Rewrite the persisted record as if the process died mid-run.
  const auto file = dir / "jobs" / id / "job.json";
  JobRecord r = [&] {
    std::ifstream in(file);
    return JobRecord::from_json(json::parse(in));
  }();
  r.state = JobState::kRunning;
  r.artifacts.clear();
  std::filesystem::remove(dir / "jobs" / id / "image.png");
  std::ofstream(file) << r.to_json().dump();

  JobService restarted({dir, 1, {}});
  restarted.wait_idle();
  const auto job = restarted.get(id);
  REQUIRE(job);
  CHECK(job->state == JobState::kDone);
  CHECK(restarted.artifact(id, "image").bytes.size() > 8);
  CHECK(restarted.submit(two_person_scene(4), "key-7").id == id);
  std::filesystem::remove_all(dir);
}
