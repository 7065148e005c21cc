#include "finecontrol/service.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

#include <httplib.h>

#include "finecontrol/error.hpp"
#include "finecontrol/metrics.hpp"
#include "finecontrol/png_io.hpp"
#include "finecontrol/tiny_denoiser.hpp"

namespace finecontrol::service {
namespace {

using nlohmann::json;

const char* const kArtifactKinds[] = {"image", "masks", "trace", "metrics"};

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string new_job_id() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng()),
                static_cast<unsigned long long>(rng()));
  return std::string(buf, 24);
}

bool valid_job_id(const std::string& id) {
  return !id.empty() && id.size() <= 64 &&
         std::all_of(id.begin(), id.end(), [](unsigned char c) { return std::isalnum(c) || c == '-' || c == '_'; });
}

void write_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  const auto tmp = std::filesystem::path(path).concat(".tmp");
  png::write_file(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot move " + tmp.string() + " into place: " + ec.message());
}

void write_json_atomic(const std::filesystem::path& path, const json& j) {
  const std::string text = j.dump(2);
  write_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ApiError api_error(int status, std::string code, std::string message, std::string path = {}) {
  return {status, std::move(code), std::move(message), std::move(path)};
}

json masks_json(const pose::AttentionMaskSet& set) {
  json out = json::array();
  for (const auto& m : set.base()) out.push_back(base64_encode(pose::mask_png(m)));
  return out;
}

json metrics_json(const prompt::SceneSpec& scene, const Image& image) {
  std::vector<pose::Pose2D> poses;
  std::vector<std::string> prompts;
  for (const auto& inst : scene.instances) {
    poses.push_back(inst.pose);
    prompts.push_back(inst.assigned_prompt);
  }
  try {
    const metrics::ToySimilarityOracle oracle;
    const metrics::ToyPoseDetector detector;
    const auto rec = metrics::evaluate_scene("scene", image, poses, prompts, oracle, detector);
    json instances = json::array();
    for (const auto& i : rec.instances) instances.push_back(metrics::instance_record_json(i));
    return {{"version", kApiVersion},
            {"available", true},
            {"gt_count", rec.gt_count},
            {"detected", rec.detected},
            {"hnd", metrics::hnd(rec.gt_count, rec.detected)},
            {"instances", instances}};
  } catch (const Error& e) {
    return {{"version", kApiVersion}, {"available", false}, {"reason", e.what()}};
  }
}

}  // namespace

std::string state_name(JobState state) {
  switch (state) {
    case JobState::kQueued: return "QUEUED";
    case JobState::kRunning: return "RUNNING";
    case JobState::kDone: return "DONE";
    case JobState::kFailed: return "FAILED";
  }
  return "FAILED";
}

JobState parse_state(const std::string& name) {
  for (auto s : {JobState::kQueued, JobState::kRunning, JobState::kDone, JobState::kFailed}) {
    if (state_name(s) == name) return s;
  }
  throw Error(ErrorCode::kSchemaInvalid, "unknown job state '" + name + "'");
}

json JobRecord::to_json() const {
  json j = {{"version", kApiVersion},
            {"id", id},
            {"state", state_name(state)},
            {"scene", scene},
            {"artifacts", artifacts},
            {"created_ms", created_ms},
            {"updated_ms", updated_ms}};
  if (!error.empty()) j["error"] = error;
  if (!idempotency_key.empty()) j["idempotency_key"] = idempotency_key;
  return j;
}

JobRecord JobRecord::from_json(const json& j) {
  JobRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.state = parse_state(j.at("state").get<std::string>());
    r.scene = j.at("scene");
    r.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
    r.error = j.value("error", std::string{});
    r.idempotency_key = j.value("idempotency_key", std::string{});
    r.created_ms = j.value("created_ms", std::int64_t{0});
    r.updated_ms = j.value("updated_ms", std::int64_t{0});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchemaInvalid, std::string("job record: ") + e.what());
  }
  return r;
}

json ApiError::to_json() const {
  json e = {{"code", code}, {"message", message}};
  if (!path.empty()) e["path"] = path;
  return {{"version", kApiVersion}, {"error", e}};
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  static const char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < bytes.size()) {
    const bool two = i + 1 < bytes.size();
    const std::uint32_t v = (bytes[i] << 16) | (two ? bytes[i + 1] << 8 : 0);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += two ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

JobService::JobService(ServiceConfig config) : config_(std::move(config)) {
  if (!config_.factory) {
    config_.factory = compose::delta_factory(denoise::default_palette(), diffusion::default_schedule());
  }
  const auto root = config_.data_dir / "jobs";
  std::filesystem::create_directories(root);
  std::vector<JobRecord> pending;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    const auto file = entry.path() / "job.json";
    if (!entry.is_directory() || !std::filesystem::exists(file)) continue;
    try {
      std::ifstream in(file);
      JobRecord r = JobRecord::from_json(json::parse(in));
      if (r.state == JobState::kQueued || r.state == JobState::kRunning) pending.push_back(r);
      if (!r.idempotency_key.empty()) idempotency_[r.idempotency_key] = r.id;
      const std::string id = r.id;
      jobs_[id] = std::make_shared<const JobRecord>(std::move(r));
    } catch (const std::exception& e) {
      std::cerr << "skipping unreadable job " << file << ": " << e.what() << '\n';
    }
  }
  std::sort(pending.begin(), pending.end(),
            [](const JobRecord& a, const JobRecord& b) { return a.created_ms < b.created_ms; });
  for (const auto& r : pending) queue_.push_back(r.id);
  for (int i = 0; i < std::max(1, config_.workers); ++i) workers_.emplace_back([this] { worker_loop(); });
}

JobService::~JobService() { shutdown(); }

void JobService::shutdown() {
  {
    std::lock_guard lock(mutex_);
    if (stopping_) return;
    stopping_ = true;
  }
  cv_.notify_all();
  workers_.clear();
}

std::filesystem::path JobService::job_dir(const std::string& id) const { return config_.data_dir / "jobs" / id; }

void JobService::publish(JobRecord record) {
  record.updated_ms = now_ms();
  std::filesystem::create_directories(job_dir(record.id));
  write_json_atomic(job_dir(record.id) / "job.json", record.to_json());
  auto snapshot = std::make_shared<const JobRecord>(std::move(record));
  std::lock_guard lock(mutex_);
  jobs_[snapshot->id] = std::move(snapshot);
}

SubmitResult JobService::submit(const json& scene, const std::string& idempotency_key) {
  if (auto issue = prompt::validate_scene_json(scene)) {
    throw api_error(422, "SCHEMA_INVALID", issue->message, issue->path);
  }
  std::unique_lock lock(mutex_);
  if (!idempotency_key.empty()) {
    if (auto it = idempotency_.find(idempotency_key); it != idempotency_.end()) return {it->second, false};
  }
  JobRecord r;
  r.id = new_job_id();
  r.scene = scene;
  r.idempotency_key = idempotency_key;
  r.created_ms = now_ms();
  if (!idempotency_key.empty()) idempotency_[idempotency_key] = r.id;
  const std::string id = r.id;
  lock.unlock();
  publish(std::move(r));
  lock.lock();
  queue_.push_back(id);
  lock.unlock();
  cv_.notify_one();
  return {id, true};
}

std::shared_ptr<const JobRecord> JobService::get(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = jobs_.find(id);
  return it == jobs_.end() ? nullptr : it->second;
}

Artifact JobService::artifact(const std::string& id, const std::string& kind) const {
  const auto job = get(id);
  if (!job) throw api_error(404, "UNKNOWN_JOB", "no job with id '" + id + "'");
  if (std::find(std::begin(kArtifactKinds), std::end(kArtifactKinds), kind) == std::end(kArtifactKinds)) {
    throw api_error(404, "UNKNOWN_ARTIFACT", "artifact kind must be image, masks, trace or metrics");
  }
  if (job->state != JobState::kDone) {
    throw api_error(409, "NOT_READY", "job is " + state_name(job->state));
  }
  const auto it = job->artifacts.find(kind);
  if (it == job->artifacts.end()) throw api_error(404, "UNKNOWN_ARTIFACT", "job has no " + kind + " artifact");
  Artifact a;
  a.content_type = kind == "image" ? "image/png" : "application/json";
  a.bytes = png::read_file(job_dir(id) / it->second);
  return a;
}

void JobService::wait_idle() {
  std::unique_lock lock(mutex_);
  idle_cv_.wait(lock, [&] { return queue_.empty() && active_ == 0; });
}

void JobService::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      ++active_;
    }
    run_job(id);
    {
      std::lock_guard lock(mutex_);
      --active_;
    }
    idle_cv_.notify_all();
  }
}

void JobService::run_job(const std::string& id) {
  const auto snapshot = get(id);
  if (!snapshot) return;
  JobRecord r = *snapshot;
  try {
    if (r.state != JobState::kRunning) {
      r.state = JobState::kRunning;
      publish(r);
    }
    const prompt::SceneSpec scene = prompt::scene_from_json(r.scene);
    const compose::GenerationResult g = compose::generate(scene, config_.factory);
    const auto dir = job_dir(id);
    write_atomic(dir / "image.png", png::encode_image(g.image));
    const json masks = {{"version", kApiVersion},
                        {"tau", scene.harmony.tau},
                        {"hard", masks_json(g.masks.hard)},
                        {"soft", masks_json(g.masks.soft)}};
    write_json_atomic(dir / "masks.json", masks);
    write_json_atomic(dir / "trace.json", g.trace.to_json());
    write_json_atomic(dir / "metrics.json", metrics_json(scene, g.image));
    r.artifacts = {{"image", "image.png"}, {"masks", "masks.json"}, {"trace", "trace.json"}, {"metrics", "metrics.json"}};
    r.state = JobState::kDone;
  } catch (const std::exception& e) {
    r.state = JobState::kFailed;
    r.artifacts.clear();
    r.error = e.what();
    if (r.error.empty()) r.error = "generation failed";
  }
  try {
    publish(std::move(r));
  } catch (const std::exception& e) {
    std::cerr << "cannot persist job " << id << ": " << e.what() << '\n';
  }
}

json preview_masks(const json& request) {
  if (!request.is_object()) throw api_error(422, "SCHEMA_INVALID", "must be an object", "/");
  if (request.contains("version") && request["version"] != kApiVersion) {
    throw api_error(422, "SCHEMA_INVALID", "unsupported version", "/version");
  }
  if (!request.contains("poses") || !request["poses"].is_array()) {
    throw api_error(422, "SCHEMA_INVALID", "poses must be an array", "/poses");
  }
  if (request["poses"].empty()) throw api_error(422, "SCHEMA_INVALID", "at least one pose required", "/poses");
  const json canvas = request.value("canvas", json{{"h", 64}, {"w", 64}});
  double tau = 0.001;
  if (request.contains("harmony")) {
    const json& h = request["harmony"];
    if (!h.is_object()) throw api_error(422, "SCHEMA_INVALID", "must be an object", "/harmony");
    if (h.contains("tau")) {
      if (!h["tau"].is_number() || !(h["tau"].get<double>() > 0.0)) {
        throw api_error(422, "SCHEMA_INVALID", "tau must be a positive number", "/harmony/tau");
      }
      tau = h["tau"].get<double>();
    }
  }
  const std::string mode_text = request.value("mask_mode", std::string("SOFT"));
  if (mode_text != "SOFT" && mode_text != "HARD") {
    throw api_error(422, "SCHEMA_INVALID", "mask_mode must be SOFT or HARD", "/mask_mode");
  }

  // Reuse the scene schema for canvas and pose checks.
  json scene = {{"version", 1}, {"canvas", canvas}, {"instances", json::array()}};
  for (const auto& p : request["poses"]) scene["instances"].push_back({{"identity", "preview"}, {"pose", p}});
  if (auto issue = prompt::validate_scene_json(scene)) {
    std::string path = issue->path;
    if (path.rfind("/instances/", 0) == 0) {
      const auto slash = path.find('/', 11);
      const std::string index = path.substr(11, slash == std::string::npos ? std::string::npos : slash - 11);
      std::string rest = slash == std::string::npos ? "" : path.substr(slash);
      if (rest.rfind("/pose", 0) == 0) rest = rest.substr(5);
      path = "/poses/" + index + rest;
    }
    throw api_error(422, "SCHEMA_INVALID", issue->message, path);
  }
  const int h = canvas["h"].get<int>(), w = canvas["w"].get<int>();
  std::vector<pose::OccupancyMap> occs;
  for (const auto& p : request["poses"]) occs.push_back(pose::instance_occupancy(pose::pose_from_json(p), h, w));
  const auto mode = mode_text == "HARD" ? pose::MaskMode::kHard : pose::MaskMode::kSoft;
  const pose::AttentionMaskSet set = pose::normalize_masks(occs, tau, mode);
  return {{"version", kApiVersion},
          {"canvas", {{"h", h}, {"w", w}}},
          {"tau", tau},
          {"mask_mode", mode_text},
          {"masks", masks_json(set)}};
}

struct ApiServer::Impl {
  JobService& service;
  httplib::Server server;

  explicit Impl(JobService& s) : service(s) {}
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const ApiError& e) { send_json(res, e.status, e.to_json()); }

json job_view(const JobRecord& r) {
  json j = r.to_json();
  j.erase("idempotency_key");
  json links = json::object();
  for (const auto& [kind, file] : r.artifacts) links[kind] = "/api/jobs/" + r.id + "/artifacts/" + kind;
  j["artifacts"] = links;
  return j;
}

// Runs a handler, mapping ApiError and unexpected exceptions to JSON errors.
template <typename F>
auto guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ApiError& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send_error(res, api_error(500, "INTERNAL", e.what()));
    }
  };
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw api_error(422, "SCHEMA_INVALID", std::string("body is not valid JSON: ") + e.what(), "/");
  }
}

}  // namespace

ApiServer::ApiServer(JobService& service, int http_threads) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  const int threads = std::max(1, http_threads);
  srv.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  JobService& jobs = impl_->service;

  srv.Post("/api/scenes", guarded([&jobs](const httplib::Request& req, httplib::Response& res) {
             const json scene = parse_body(req);
             const SubmitResult r = jobs.submit(scene, req.get_header_value("Idempotency-Key"));
             const auto job = jobs.get(r.id);
             res.set_header("Location", "/api/jobs/" + r.id);
             send_json(res, 202,
                       {{"version", kApiVersion},
                        {"id", r.id},
                        {"state", job ? state_name(job->state) : "QUEUED"},
                        {"duplicate", !r.created}});
           }));
  srv.Get(R"(/api/jobs/([^/]+))", guarded([&jobs](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            const auto job = valid_job_id(id) ? jobs.get(id) : nullptr;
            if (!job) throw api_error(404, "UNKNOWN_JOB", "no job with id '" + id + "'");
            send_json(res, 200, job_view(*job));
          }));
  srv.Get(R"(/api/jobs/([^/]+)/artifacts/([^/]+))",
          guarded([&jobs](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            if (!valid_job_id(id)) throw api_error(404, "UNKNOWN_JOB", "no job with id '" + id + "'");
            const Artifact a = jobs.artifact(id, req.matches[2]);
            res.status = 200;
            res.set_content(std::string(a.bytes.begin(), a.bytes.end()), a.content_type);
          }));
  srv.Post("/api/masks/preview", guarded([](const httplib::Request& req, httplib::Response& res) {
             send_json(res, 200, preview_masks(parse_body(req)));
           }));
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_error(res, api_error(res.status, "NOT_FOUND", "no such route"));
  });
}

ApiServer::~ApiServer() { stop(); }

int ApiServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound <= 0) throw Error(ErrorCode::kIo, "cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw Error(ErrorCode::kIo, "cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void ApiServer::listen() { impl_->server.listen_after_bind(); }

void ApiServer::stop() {
  if (impl_) impl_->server.stop();
}

ServiceConfig config_from_env() {
  ServiceConfig c;
  if (const char* dir = std::getenv("DATA_DIR"); dir && *dir) c.data_dir = dir;
  if (const char* w = std::getenv("WORKERS"); w && *w) c.workers = std::max(1, std::atoi(w));
  if (const char* model = std::getenv("MODEL"); model && *model) {
    auto params = std::make_shared<const denoise::TinyParams>(denoise::TinyParams::load(model));
    c.factory = compose::shared_factory(
        std::make_shared<denoise::TinyDenoiser>(std::move(params), diffusion::default_schedule()));
  }
  return c;
}

}  // namespace finecontrol::service
