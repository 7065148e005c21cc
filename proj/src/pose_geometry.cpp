#include "finecontrol/pose_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "finecontrol/error.hpp"
#include "finecontrol/png_io.hpp"

namespace finecontrol::pose {
namespace {

// COCO order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
// (left before right). Edges are the COCO keypoint skeleton, zero-based.
constexpr std::pair<int, int> kCocoEdges[] = {
    {15, 13}, {13, 11}, {16, 14}, {14, 12}, {11, 12}, {5, 11}, {6, 12}, {5, 6}, {5, 7}, {6, 8},
    {7, 9},   {8, 10},  {1, 2},   {0, 1},   {0, 2},   {1, 3}, {2, 4},   {3, 5}, {4, 6}};

// OpenPose COCO-18: nose, neck, r_sho, r_elb, r_wri, l_sho, l_elb, l_wri,
// r_hip, r_knee, r_ank, l_hip, l_knee, l_ank, r_eye, l_eye, r_ear, l_ear.
constexpr std::pair<int, int> kOpenPoseEdges[] = {
    {1, 2}, {1, 5},  {2, 3},   {3, 4},  {5, 6},   {6, 7},  {1, 8},   {8, 9},  {9, 10},
    {1, 11}, {11, 12}, {12, 13}, {1, 0}, {0, 14}, {14, 16}, {0, 15}, {15, 17}};

constexpr double kCocoK[] = {0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144,
                             0.124, 0.124, 0.214, 0.214, 0.174, 0.174, 0.178, 0.178};

// Neck has no COCO constant; it borrows the shoulder value.
constexpr double kOpenPoseK[] = {0.052, 0.158, 0.158, 0.144, 0.124, 0.158, 0.144, 0.124, 0.214,
                                 0.174, 0.178, 0.214, 0.174, 0.178, 0.050, 0.050, 0.070, 0.070};

double point_segment_dist2(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0);
  const double qx = ax + t * dx - px;
  const double qy = ay + t * dy - py;
  return qx * qx + qy * qy;
}

}  // namespace

std::string format_name(PoseFormat format) {
  return format == PoseFormat::kCoco17 ? "COCO17" : "OPENPOSE18";
}

PoseFormat parse_format(const std::string& name) {
  if (name == "COCO17") return PoseFormat::kCoco17;
  if (name == "OPENPOSE18") return PoseFormat::kOpenPose18;
  throw Error(ErrorCode::kFormatMismatch, "unknown pose format '" + name + "'");
}

int keypoint_count(PoseFormat format) { return format == PoseFormat::kCoco17 ? 17 : 18; }

std::span<const std::pair<int, int>> skeleton_edges(PoseFormat format) {
  if (format == PoseFormat::kCoco17) return kCocoEdges;
  return kOpenPoseEdges;
}

std::span<const double> oks_constants(PoseFormat format) {
  if (format == PoseFormat::kCoco17) return kCocoK;
  return kOpenPoseK;
}

int Pose2D::visible_count() const {
  return static_cast<int>(
      std::count_if(keypoints.begin(), keypoints.end(), [](const Keypoint& k) { return k.visible > 0; }));
}

std::pair<double, double> Pose2D::centroid() const {
  double sx = 0.0, sy = 0.0;
  int n = 0;
  for (const auto& k : keypoints) {
    if (k.visible <= 0) continue;
    sx += k.x;
    sy += k.y;
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::kNoVisibleKeypoints, "pose has no visible keypoints");
  return {sx / n, sy / n};
}

std::array<double, 4> Pose2D::bbox() const {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::array<double, 4> box{inf, inf, -inf, -inf};
  for (const auto& k : keypoints) {
    if (k.visible <= 0) continue;
    box[0] = std::min(box[0], k.x);
    box[1] = std::min(box[1], k.y);
    box[2] = std::max(box[2], k.x);
    box[3] = std::max(box[3], k.y);
  }
  if (box[0] == inf) throw Error(ErrorCode::kNoVisibleKeypoints, "pose has no visible keypoints");
  return box;
}

void validate(const Pose2D& pose) {
  const int expected = keypoint_count(pose.format);
  if (static_cast<int>(pose.keypoints.size()) != expected) {
    throw Error(ErrorCode::kFormatMismatch,
                format_name(pose.format) + " expects " + std::to_string(expected) +
                    " keypoints, got " + std::to_string(pose.keypoints.size()));
  }
}

Pose2D pose_from_json(const nlohmann::json& j) {
  Pose2D pose;
  pose.format = parse_format(j.at("format").get<std::string>());
  for (const auto& kp : j.at("keypoints")) {
    if (!kp.is_array() || kp.size() != 3) {
      throw Error(ErrorCode::kFormatMismatch, "keypoint must be [x, y, v]");
    }
    pose.keypoints.push_back({kp[0].get<double>(), kp[1].get<double>(), kp[2].get<int>()});
  }
  validate(pose);
  return pose;
}

nlohmann::json pose_to_json(const Pose2D& pose) {
  nlohmann::json kps = nlohmann::json::array();
  for (const auto& k : pose.keypoints) kps.push_back({k.x, k.y, k.visible});
  return {{"format", format_name(pose.format)}, {"keypoints", kps}};
}

std::size_t OccupancyMap::count() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

OccupancyMap rasterize_skeleton(const Pose2D& pose, int height, int width, double line_width) {
  validate(pose);
  if (pose.visible_count() < 2) {
    throw Error(ErrorCode::kDegeneratePose,
                std::to_string(pose.visible_count()) + " visible keypoints, need at least 2");
  }
  if (!(line_width >= 1.0)) throw Error(ErrorCode::kInvalidRange, "line_width must be >= 1");
  OccupancyMap occ(height, width);
  const double r = line_width / 2.0;
  const double r2 = r * r + 1e-9;
  for (const auto& [ia, ib] : skeleton_edges(pose.format)) {
    const Keypoint& a = pose.keypoints[ia];
    const Keypoint& b = pose.keypoints[ib];
    if (a.visible <= 0 || b.visible <= 0) continue;
    // Only the segment's padded bounding box can be within reach.
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (point_segment_dist2(x, y, a.x, a.y, b.x, b.y) <= r2) occ.at(y, x) = 1;
      }
    }
  }
  return occ;
}

int dilation_side(int image_height) { return 2 * (image_height / 16) + 1; }

OccupancyMap dilate(const OccupancyMap& occ, int image_height) {
  return dilate_square(occ, dilation_side(image_height));
}

OccupancyMap dilate_square(const OccupancyMap& occ, int side) {
  const int half = side / 2;
  // Separable max filter: rows, then columns.
  OccupancyMap rows(occ.height, occ.width);
  for (int y = 0; y < occ.height; ++y) {
    int last = -1 - half - 1;  // most recent set column at or left of x+half
    for (int x = -half; x < occ.width; ++x) {
      const int probe = x + half;
      if (probe < occ.width && occ.at(y, probe)) last = probe;
      if (x >= 0 && last >= x - half) rows.at(y, x) = 1;
    }
  }
  OccupancyMap out(occ.height, occ.width);
  for (int x = 0; x < occ.width; ++x) {
    int last = -1 - half - 1;
    for (int y = -half; y < occ.height; ++y) {
      const int probe = y + half;
      if (probe < occ.height && rows.at(probe, x)) last = probe;
      if (y >= 0 && last >= y - half) out.at(y, x) = 1;
    }
  }
  return out;
}

OccupancyMap instance_occupancy(const Pose2D& pose, int height, int width) {
  return dilate(rasterize_skeleton(pose, height, width, 1.0), height);
}

std::string mask_mode_name(MaskMode mode) { return mode == MaskMode::kSoft ? "SOFT" : "HARD"; }

const std::vector<Tensor>& AttentionMaskSet::at(Shape2 shape) const {
  for (const auto& level : levels) {
    if (level.shape == shape) return level.masks;
  }
  throw Error(ErrorCode::kShapeMismatch, "no mask level at " + std::to_string(shape.height) + "x" +
                                             std::to_string(shape.width));
}

AttentionMaskSet normalize_masks(std::span<const OccupancyMap> occs, double tau, MaskMode mode) {
  if (occs.empty()) throw Error(ErrorCode::kShapeMismatch, "need at least one occupancy map");
  const int h = occs.front().height;
  const int w = occs.front().width;
  for (const auto& o : occs) {
    if (o.height != h || o.width != w) {
      throw Error(ErrorCode::kShapeMismatch, "occupancy maps differ in shape");
    }
  }
  if (mode == MaskMode::kSoft && !(tau > 0.0)) {
    throw Error(ErrorCode::kNonpositiveTemperature, "tau must be > 0, got " + std::to_string(tau));
  }
  const std::size_t n = occs.size();
  AttentionMaskSet set;
  set.tau = tau;
  set.mode = mode;
  MaskLevel base{{h, w}, std::vector<Tensor>(n, Tensor(1, h, w))};
  std::vector<double> weights(n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double peak = -std::numeric_limits<double>::infinity();
      for (const auto& o : occs) peak = std::max(peak, static_cast<double>(o.at(y, x)));
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = occs[i].at(y, x);
        if (mode == MaskMode::kSoft) {
          weights[i] = std::exp((v - peak) / tau);
        } else {
          weights[i] = v == peak ? 1.0 : 0.0;
        }
        total += weights[i];
      }
      for (std::size_t i = 0; i < n; ++i) base.masks[i].at(0, y, x) = weights[i] / total;
    }
  }
  set.levels.push_back(std::move(base));
  return set;
}

AttentionMaskSet resize_mask_pyramid(const AttentionMaskSet& masks,
                                     std::span<const Shape2> level_shapes) {
  AttentionMaskSet out;
  out.tau = masks.tau;
  out.mode = masks.mode;
  out.levels.push_back(masks.levels.front());
  const Shape2 base = masks.levels.front().shape;
  for (const Shape2& shape : level_shapes) {
    if (shape == base) continue;
    if (std::any_of(out.levels.begin(), out.levels.end(),
                    [&](const MaskLevel& l) { return l.shape == shape; })) {
      continue;
    }
    if (shape.height <= 0 || shape.width <= 0 || base.height % shape.height != 0 ||
        base.width % shape.width != 0) {
      throw Error(ErrorCode::kNonDivisibleShape,
                  std::to_string(shape.height) + "x" + std::to_string(shape.width) +
                      " does not divide " + std::to_string(base.height) + "x" +
                      std::to_string(base.width));
    }
    const int fy = base.height / shape.height;
    const int fx = base.width / shape.width;
    MaskLevel level{shape, {}};
    for (const Tensor& m : masks.levels.front().masks) level.masks.push_back(area_pool(m, fy, fx));
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        double total = 0.0;
        for (const Tensor& m : level.masks) total += m.at(0, y, x);
        for (Tensor& m : level.masks) m.at(0, y, x) /= total;
      }
    }
    out.levels.push_back(std::move(level));
  }
  return out;
}

std::vector<std::uint8_t> mask_png(const Tensor& mask) {
  std::vector<std::uint8_t> px(mask.plane_size());
  auto plane = mask.plane(0);
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(plane[i], 0.0, 1.0)));
  }
  return png::encode(px, mask.width(), mask.height(), 1);
}

}  // namespace finecontrol::pose
