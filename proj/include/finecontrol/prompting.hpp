#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "finecontrol/diffusion.hpp"
#include "finecontrol/pose_geometry.hpp"

namespace finecontrol {

/// Softmax temperature and the fraction of initial steps that use argmax masks.
struct HarmonyParams {
  double tau = 0.001;
  double hard_fraction = 0.25;
};

enum class CompositionMode { kFineControl, kXCompose, kHV2, kGlobal };

std::string mode_name(CompositionMode mode);
/// Accepts FINECONTROL, X_COMPOSE, H_V2, GLOBAL (case-insensitive).
CompositionMode parse_mode(const std::string& name);

}  // namespace finecontrol

namespace finecontrol::prompt {

inline constexpr int kSceneSchemaVersion = 1;

struct InstanceSpec {
  pose::Pose2D pose;
  std::string identity;
  std::string assigned_prompt;
  bool out_of_frame = false;  // permits visible keypoints outside the canvas
};

struct SceneSpec {
  int version = kSceneSchemaVersion;
  std::vector<InstanceSpec> instances;
  std::string setting;
  Shape2 canvas{64, 64};
  std::uint64_t seed = 0;
  diffusion::SamplerConfig sampler;
  HarmonyParams harmony;
  CompositionMode mode = CompositionMode::kFineControl;
};

/// "{identity}, {setting}", or the identity alone when the setting is empty.
/// Idempotent: a prompt that already ends with the setting is returned as is.
std::string build_instance_prompt(const std::string& identity, const std::string& setting);

/// Fills assigned_prompt of every instance from its identity and the setting.
void assign_prompts(SceneSpec& scene);

struct Binding {
  int pose_index = 0;
  std::string identity;
};

struct ParsedPrompt {
  std::vector<Binding> bindings;  // in clause order
  std::string setting;
};

/// Grammar: clauses separated by commas or "and"; an identity clause may end
/// in a position phrase ("on the left", "in the middle", "on the right",
/// "second from the left", ...). Slots are poses sorted by centroid x.
/// Keyword clauses claim their slot; the rest fill the free slots in
/// left-to-right order. A trailing clause without a position phrase is the
/// setting when there are N + 1 clauses.
ParsedPrompt parse_global_prompt(const std::string& global, const std::vector<pose::Pose2D>& poses);

/// Pose indices ordered by centroid x (ties by index).
std::vector<int> left_to_right_order(const std::vector<pose::Pose2D>& poses);

struct SchemaIssue {
  std::string path;  // JSON pointer, e.g. "/instances/0/pose/keypoints"
  std::string message;
};

/// First schema violation, if any.
std::optional<SchemaIssue> validate_scene_json(const nlohmann::json& j);
/// Throws SCHEMA_INVALID ("<path>: <message>") on an invalid document.
SceneSpec scene_from_json(const nlohmann::json& j);
nlohmann::json scene_to_json(const SceneSpec& scene);

}  // namespace finecontrol::prompt
