#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "finecontrol/composer.hpp"

namespace finecontrol::service {

inline constexpr int kApiVersion = 1;

enum class JobState { kQueued, kRunning, kDone, kFailed };

std::string state_name(JobState state);
JobState parse_state(const std::string& name);

/// Immutable snapshot of a job. DONE implies an "image" artifact; FAILED
/// implies a non-empty error.
struct JobRecord {
  std::string id;
  JobState state = JobState::kQueued;
  nlohmann::json scene;
  std::map<std::string, std::string> artifacts;  // kind -> file name inside the job directory
  std::string error;
  std::string idempotency_key;
  std::int64_t created_ms = 0;
  std::int64_t updated_ms = 0;

  nlohmann::json to_json() const;
  static JobRecord from_json(const nlohmann::json& j);
};

/// Outcome of a request that maps onto an HTTP status and a JSON error body.
struct ApiError {
  int status = 500;
  std::string code;
  std::string message;
  std::string path;  // JSON pointer of the offending field, when known

  nlohmann::json to_json() const;
};

struct SubmitResult {
  std::string id;
  bool created = true;  // false when an idempotency key matched an earlier job
};

struct Artifact {
  std::string content_type;
  std::vector<std::uint8_t> bytes;
};

struct ServiceConfig {
  std::filesystem::path data_dir = "data";
  int workers = 1;
  compose::DenoiserFactory factory;  // delta renderer when empty
};

/// Job queue persisted as one JSON file per job (written atomically) plus an
/// artifact directory per job. Jobs found QUEUED or RUNNING at startup are
/// executed again.
class JobService {
 public:
  explicit JobService(ServiceConfig config);
  ~JobService();
  JobService(const JobService&) = delete;
  JobService& operator=(const JobService&) = delete;

  /// Throws ApiError (422 SCHEMA_INVALID) for an invalid scene.
  SubmitResult submit(const nlohmann::json& scene, const std::string& idempotency_key = "");
  std::shared_ptr<const JobRecord> get(const std::string& id) const;
  /// Throws ApiError: 404 UNKNOWN_JOB, 404 UNKNOWN_ARTIFACT, 409 NOT_READY.
  Artifact artifact(const std::string& id, const std::string& kind) const;

  /// Blocks until no job is queued or running.
  void wait_idle();
  void shutdown();

 private:
  void worker_loop();
  void run_job(const std::string& id);
  void publish(JobRecord record);
  std::filesystem::path job_dir(const std::string& id) const;

  ServiceConfig config_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::map<std::string, std::shared_ptr<const JobRecord>> jobs_;
  std::map<std::string, std::string> idempotency_;
  std::deque<std::string> queue_;
  int active_ = 0;
  bool stopping_ = false;
  std::vector<std::jthread> workers_;
};

/// Synchronous mask preview: {"version", "canvas": {h, w}, "poses": [...],
/// "harmony": {"tau"}, "mask_mode": "SOFT" | "HARD"} -> base64 PNG per pose.
/// Throws ApiError (422) for invalid input.
nlohmann::json preview_masks(const nlohmann::json& request);

std::string base64_encode(std::span<const std::uint8_t> bytes);

/// HTTP front end: POST /api/scenes, GET /api/jobs/{id},
/// GET /api/jobs/{id}/artifacts/{kind}, POST /api/masks/preview.
class ApiServer {
 public:
  explicit ApiServer(JobService& service, int http_threads = 4);
  ~ApiServer();

  /// Returns the bound port; port 0 picks an ephemeral one. Throws IO.
  int bind(const std::string& host, int port);
  /// Blocks until stop() is called from another thread.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Environment-driven configuration: DATA_DIR, WORKERS and an optional MODEL
/// checkpoint for the tiny denoiser.
ServiceConfig config_from_env();

}  // namespace finecontrol::service
