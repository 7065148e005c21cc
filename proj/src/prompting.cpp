#include "finecontrol/prompting.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <regex>

#include "finecontrol/error.hpp"

namespace finecontrol {

std::string mode_name(CompositionMode mode) {
  switch (mode) {
    case CompositionMode::kFineControl: return "FINECONTROL";
    case CompositionMode::kXCompose: return "X_COMPOSE";
    case CompositionMode::kHV2: return "H_V2";
    case CompositionMode::kGlobal: return "GLOBAL";
  }
  return "FINECONTROL";
}

CompositionMode parse_mode(const std::string& name) {
  std::string upper = name;
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto m : {CompositionMode::kFineControl, CompositionMode::kXCompose, CompositionMode::kHV2,
                 CompositionMode::kGlobal}) {
    if (mode_name(m) == upper) return m;
  }
  throw Error(ErrorCode::kSchemaInvalid, "unknown composition mode '" + name + "'");
}

}  // namespace finecontrol

namespace finecontrol::prompt {
namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\n\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\n\r");
  return s.substr(first, last - first + 1);
}

std::string strip_leading_and(std::string s) {
  s = trim(s);
  if (s.size() >= 4 && (s.compare(0, 4, "and ") == 0 || s.compare(0, 4, "And ") == 0)) s = trim(s.substr(4));
  return s;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// A position phrase resolved against N slots (0 = leftmost).
struct Position {
  enum class Side { kLeft, kRight, kMiddle } side = Side::kLeft;
  int offset = 0;  // 0 for "left"/"right", k-1 for "k-th from the left"
  std::string phrase;
};

int ordinal_value(const std::string& word) {
  static const char* const kWords[] = {"first", "second", "third", "fourth", "fifth",
                                       "sixth", "seventh", "eighth", "ninth", "tenth"};
  for (int i = 0; i < 10; ++i) {
    if (word == kWords[i]) return i + 1;
  }
  return std::stoi(word);  // "2nd", "3rd", ...
}

struct Clause {
  std::string text;
  std::optional<Position> position;
};

const std::regex& position_regex() {
  static const std::regex re(
      R"((?:^|\s)(?:(?:on|in|at)\s+)?(?:the\s+)?(first|second|third|fourth|fifth|sixth|seventh|eighth|ninth|tenth|\d+(?:st|nd|rd|th))\s+from\s+(?:the\s+)?(left|right)\b)"
      R"(|(?:^|\s)(?:on|in|at|to)\s+the\s+(?:far\s+)?(left|right|middle|center|centre)\b)",
      std::regex::icase | std::regex::ECMAScript);
  return re;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::vector<Clause> split_clauses(const std::string& global) {
  std::vector<Clause> clauses;
  std::size_t start = 0;
  while (start <= global.size()) {
    std::size_t comma = global.find(',', start);
    if (comma == std::string::npos) comma = global.size();
    std::string segment = global.substr(start, comma - start);
    start = comma + 1;
    std::smatch m;
    while (std::regex_search(segment, m, position_regex())) {
      Clause c;
      c.text = strip_leading_and(m.prefix().str());
      Position pos;
      pos.phrase = trim(m.str());
      if (m[1].matched) {
        pos.offset = ordinal_value(lower(m[1].str())) - 1;
        pos.side = lower(m[2].str()) == "left" ? Position::Side::kLeft : Position::Side::kRight;
      } else {
        const std::string word = lower(m[3].str());
        pos.side = word == "left"    ? Position::Side::kLeft
                   : word == "right" ? Position::Side::kRight
                                     : Position::Side::kMiddle;
      }
      c.position = pos;
      if (c.text.empty()) {
        throw Error(ErrorCode::kCountMismatch, "position phrase '" + pos.phrase + "' has no identity");
      }
      clauses.push_back(std::move(c));
      segment = m.suffix().str();
    }
    segment = strip_leading_and(segment);
    if (!segment.empty()) clauses.push_back({segment, std::nullopt});
    if (comma == global.size()) break;
  }
  return clauses;
}

int resolve_slot(const Position& pos, int n) {
  int slot = 0;
  switch (pos.side) {
    case Position::Side::kLeft: slot = pos.offset; break;
    case Position::Side::kRight: slot = n - 1 - pos.offset; break;
    case Position::Side::kMiddle:
      if (n % 2 == 0) {
        throw Error(ErrorCode::kAmbiguousPosition,
                    "'" + pos.phrase + "' has no single slot among " + std::to_string(n) + " poses");
      }
      slot = n / 2;
      break;
  }
  if (slot < 0 || slot >= n) {
    throw Error(ErrorCode::kAmbiguousPosition,
                "'" + pos.phrase + "' is outside the " + std::to_string(n) + " available slots");
  }
  return slot;
}

}  // namespace

std::string build_instance_prompt(const std::string& identity, const std::string& setting) {
  const std::string id = trim(identity);
  if (id.empty()) throw Error(ErrorCode::kEmptyIdentity, "identity text is empty");
  const std::string set = trim(setting);
  if (set.empty() || id == set || ends_with(id, ", " + set)) return id;
  return id + ", " + set;
}

void assign_prompts(SceneSpec& scene) {
  for (auto& inst : scene.instances) inst.assigned_prompt = build_instance_prompt(inst.identity, scene.setting);
}

std::vector<int> left_to_right_order(const std::vector<pose::Pose2D>& poses) {
  std::vector<int> order(poses.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> cx(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) cx[i] = poses[i].centroid().first;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return cx[a] < cx[b]; });
  return order;
}

ParsedPrompt parse_global_prompt(const std::string& global, const std::vector<pose::Pose2D>& poses) {
  const int n = static_cast<int>(poses.size());
  if (n == 0) throw Error(ErrorCode::kCountMismatch, "no poses to bind");
  std::vector<Clause> clauses = split_clauses(global);

  ParsedPrompt out;
  if (static_cast<int>(clauses.size()) == n + 1 && !clauses.back().position) {
    out.setting = clauses.back().text;
    clauses.pop_back();
  }
  if (static_cast<int>(clauses.size()) != n) {
    throw Error(ErrorCode::kCountMismatch, std::to_string(clauses.size()) + " identity clauses for " +
                                               std::to_string(n) + " poses");
  }

  const std::vector<int> order = left_to_right_order(poses);
  std::vector<int> slot_of(clauses.size(), -1);
  std::vector<int> owner(n, -1);
  for (std::size_t c = 0; c < clauses.size(); ++c) {
    if (!clauses[c].position) continue;
    const int slot = resolve_slot(*clauses[c].position, n);
    if (owner[slot] >= 0) {
      throw Error(ErrorCode::kAmbiguousPosition, "'" + clauses[owner[slot]].text + "' and '" + clauses[c].text +
                                                     "' both claim slot " + std::to_string(slot));
    }
    owner[slot] = static_cast<int>(c);
    slot_of[c] = slot;
  }
  int next_free = 0;
  for (std::size_t c = 0; c < clauses.size(); ++c) {
    if (slot_of[c] >= 0) continue;
    while (owner[next_free] >= 0) ++next_free;
    owner[next_free] = static_cast<int>(c);
    slot_of[c] = next_free;
  }
  for (std::size_t c = 0; c < clauses.size(); ++c) {
    out.bindings.push_back({order[slot_of[c]], clauses[c].text});
  }
  return out;
}

namespace {

using nlohmann::json;

struct Invalid {
  SchemaIssue issue;
};

[[noreturn]] void fail(const std::string& path, const std::string& message) {
  throw Invalid{{path.empty() ? "/" : path, message}};
}

const json& require(const json& obj, const std::string& path, const char* key) {
  if (!obj.contains(key)) fail(path + "/" + key, "required");
  return obj.at(key);
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; });
    if (!known) fail(path + "/" + it.key(), "unknown field");
  }
}

void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path, "must be an object");
}

double number_in(const json& j, const std::string& path, double lo, double hi, bool lo_open = false) {
  if (!j.is_number()) fail(path, "must be a number");
  const double v = j.get<double>();
  if (!(lo_open ? v > lo : v >= lo) || !(v <= hi)) {
    fail(path, "out of range");
  }
  return v;
}

long long integer_in(const json& j, const std::string& path, long long lo, long long hi) {
  if (!j.is_number_integer()) fail(path, "must be an integer");
  if (j.is_number_unsigned() && j.get<unsigned long long>() > static_cast<unsigned long long>(hi)) {
    fail(path, "out of range");
  }
  const long long v = j.get<long long>();
  if (v < lo || v > hi) fail(path, "out of range");
  return v;
}

void validate_pose(const json& j, const std::string& path, Shape2 canvas, bool out_of_frame) {
  expect_object(j, path);
  check_keys(j, path, {"format", "keypoints"});
  const json& format = require(j, path, "format");
  if (!format.is_string() || (format != "COCO17" && format != "OPENPOSE18")) {
    fail(path + "/format", "must be COCO17 or OPENPOSE18");
  }
  const int expected = pose::keypoint_count(pose::parse_format(format.get<std::string>()));
  const json& kps = require(j, path, "keypoints");
  if (!kps.is_array()) fail(path + "/keypoints", "must be an array");
  if (static_cast<int>(kps.size()) != expected) {
    fail(path + "/keypoints", "expected " + std::to_string(expected) + " keypoints");
  }
  int visible = 0;
  for (std::size_t k = 0; k < kps.size(); ++k) {
    const std::string kp = path + "/keypoints/" + std::to_string(k);
    const json& e = kps[k];
    if (!e.is_array() || e.size() != 3 || !e[0].is_number() || !e[1].is_number() || !e[2].is_number()) {
      fail(kp, "must be [x, y, v]");
    }
    const double v = e[2].get<double>();
    if (v != 0.0 && v != 1.0) fail(kp + "/2", "visibility must be 0 or 1");
    if (v == 0.0) continue;
    ++visible;
    const double x = e[0].get<double>();
    const double y = e[1].get<double>();
    if (!std::isfinite(x) || !std::isfinite(y)) fail(kp, "coordinates must be finite");
    if (!out_of_frame && (x < 0 || y < 0 || x > canvas.width - 1 || y > canvas.height - 1)) {
      fail(kp, "visible keypoint outside the canvas");
    }
  }
  if (visible < 2) fail(path + "/keypoints", "at least 2 visible keypoints required");
}

Shape2 validate_canvas(const json& j) {
  expect_object(j, "/canvas");
  check_keys(j, "/canvas", {"h", "w"});
  const int h = static_cast<int>(integer_in(require(j, "/canvas", "h"), "/canvas/h", 1, 8192));
  const int w = static_cast<int>(integer_in(require(j, "/canvas", "w"), "/canvas/w", 1, 8192));
  return {h, w};
}

void validate_document(const json& j) {
  expect_object(j, "");
  check_keys(j, "", {"version", "canvas", "seed", "mode", "sampler", "harmony", "setting", "instances"});
  integer_in(require(j, "", "version"), "/version", kSceneSchemaVersion, kSceneSchemaVersion);
  const Shape2 canvas = validate_canvas(require(j, "", "canvas"));
  if (j.contains("seed")) integer_in(j["seed"], "/seed", 0, std::numeric_limits<long long>::max());
  if (j.contains("mode")) {
    if (!j["mode"].is_string()) fail("/mode", "must be a string");
    try {
      parse_mode(j["mode"].get<std::string>());
    } catch (const Error&) {
      fail("/mode", "must be one of FINECONTROL, X_COMPOSE, H_V2, GLOBAL");
    }
  }
  if (j.contains("sampler")) {
    const json& s = j["sampler"];
    expect_object(s, "/sampler");
    check_keys(s, "/sampler", {"steps", "eta", "guidance"});
    if (s.contains("steps")) integer_in(s["steps"], "/sampler/steps", 1, 1000);
    if (s.contains("eta")) number_in(s["eta"], "/sampler/eta", 0.0, 1.0);
    if (s.contains("guidance")) number_in(s["guidance"], "/sampler/guidance", 0.0, 100.0);
  }
  if (j.contains("harmony")) {
    const json& h = j["harmony"];
    expect_object(h, "/harmony");
    check_keys(h, "/harmony", {"tau", "hard_fraction"});
    if (h.contains("tau")) number_in(h["tau"], "/harmony/tau", 0.0, 1e6, true);
    if (h.contains("hard_fraction")) number_in(h["hard_fraction"], "/harmony/hard_fraction", 0.0, 1.0);
  }
  if (j.contains("setting") && !j["setting"].is_string()) fail("/setting", "must be a string");
  const json& inst = require(j, "", "instances");
  if (!inst.is_array()) fail("/instances", "must be an array");
  if (inst.empty()) fail("/instances", "at least one instance required");
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const std::string path = "/instances/" + std::to_string(i);
    const json& e = inst[i];
    expect_object(e, path);
    check_keys(e, path, {"identity", "pose", "out_of_frame"});
    const json& id = require(e, path, "identity");
    if (!id.is_string() || trim(id.get<std::string>()).empty()) fail(path + "/identity", "must be a non-empty string");
    bool out_of_frame = false;
    if (e.contains("out_of_frame")) {
      if (!e["out_of_frame"].is_boolean()) fail(path + "/out_of_frame", "must be a boolean");
      out_of_frame = e["out_of_frame"].get<bool>();
    }
    validate_pose(require(e, path, "pose"), path + "/pose", canvas, out_of_frame);
  }
}

}  // namespace

std::optional<SchemaIssue> validate_scene_json(const json& j) {
  try {
    validate_document(j);
  } catch (const Invalid& e) {
    return e.issue;
  }
  return std::nullopt;
}

SceneSpec scene_from_json(const json& j) {
  if (auto issue = validate_scene_json(j)) {
    throw Error(ErrorCode::kSchemaInvalid, issue->path + ": " + issue->message);
  }
  SceneSpec s;
  s.version = j["version"].get<int>();
  s.canvas = {j["canvas"]["h"].get<int>(), j["canvas"]["w"].get<int>()};
  s.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("mode")) s.mode = parse_mode(j["mode"].get<std::string>());
  if (j.contains("sampler")) {
    const json& sm = j["sampler"];
    s.sampler.num_steps = sm.value("steps", s.sampler.num_steps);
    s.sampler.eta = sm.value("eta", s.sampler.eta);
    s.sampler.guidance_scale = sm.value("guidance", s.sampler.guidance_scale);
  }
  s.sampler.seed = s.seed;
  if (j.contains("harmony")) {
    s.harmony.tau = j["harmony"].value("tau", s.harmony.tau);
    s.harmony.hard_fraction = j["harmony"].value("hard_fraction", s.harmony.hard_fraction);
  }
  s.setting = trim(j.value("setting", std::string{}));
  for (const auto& e : j["instances"]) {
    InstanceSpec inst;
    inst.identity = trim(e["identity"].get<std::string>());
    inst.pose = pose::pose_from_json(e["pose"]);
    inst.out_of_frame = e.value("out_of_frame", false);
    s.instances.push_back(std::move(inst));
  }
  assign_prompts(s);
  return s;
}

json scene_to_json(const SceneSpec& s) {
  json inst = json::array();
  for (const auto& i : s.instances) {
    json e = {{"identity", i.identity}, {"pose", pose::pose_to_json(i.pose)}};
    if (i.out_of_frame) e["out_of_frame"] = true;
    inst.push_back(std::move(e));
  }
  return {{"version", s.version},
          {"canvas", {{"h", s.canvas.height}, {"w", s.canvas.width}}},
          {"seed", s.seed},
          {"mode", mode_name(s.mode)},
          {"sampler", {{"steps", s.sampler.num_steps}, {"eta", s.sampler.eta}, {"guidance", s.sampler.guidance_scale}}},
          {"harmony", {{"tau", s.harmony.tau}, {"hard_fraction", s.harmony.hard_fraction}}},
          {"setting", s.setting},
          {"instances", std::move(inst)}};
}

}  // namespace finecontrol::prompt
