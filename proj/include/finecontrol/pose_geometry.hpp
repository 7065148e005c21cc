#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "finecontrol/tensor.hpp"

namespace finecontrol::pose {

enum class PoseFormat { kCoco17, kOpenPose18 };

std::string format_name(PoseFormat format);
PoseFormat parse_format(const std::string& name);

struct Keypoint {
  double x = 0.0;  // pixels, column
  double y = 0.0;  // pixels, row
  int visible = 0;
};

struct Pose2D {
  PoseFormat format = PoseFormat::kCoco17;
  std::vector<Keypoint> keypoints;

  int visible_count() const;
  /// Mean of visible keypoints; throws NO_VISIBLE_KEYPOINTS if none.
  std::pair<double, double> centroid() const;
  /// Tight box over visible keypoints: {x0, y0, x1, y1}.
  std::array<double, 4> bbox() const;
};

int keypoint_count(PoseFormat format);
std::span<const std::pair<int, int>> skeleton_edges(PoseFormat format);
/// COCO per-keypoint OKS constants k_i (= 2 sigma_i).
std::span<const double> oks_constants(PoseFormat format);

/// Throws FORMAT_MISMATCH when the keypoint count disagrees with the format.
void validate(const Pose2D& pose);

Pose2D pose_from_json(const nlohmann::json& j);
nlohmann::json pose_to_json(const Pose2D& pose);

/// Binary H x W occupancy grid.
struct OccupancyMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;

  OccupancyMap() = default;
  OccupancyMap(int h, int w) : height(h), width(w), cells(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t at(int y, int x) const { return cells[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return cells[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  Shape2 shape() const { return {height, width}; }

  friend bool operator==(const OccupancyMap&, const OccupancyMap&) = default;
};

/// Marks every pixel centre within line_width/2 of a bone whose two
/// endpoints are visible.
OccupancyMap rasterize_skeleton(const Pose2D& pose, int height, int width, double line_width);

/// Side of the square structuring element used for an image of height H.
int dilation_side(int image_height);

/// Square dilation with side dilation_side(image_height).
OccupancyMap dilate(const OccupancyMap& occ, int image_height);
OccupancyMap dilate_square(const OccupancyMap& occ, int side);

/// Rasterize (unit line width) then dilate; the occupancy that feeds the
/// attention masks.
OccupancyMap instance_occupancy(const Pose2D& pose, int height, int width);

enum class MaskMode { kSoft, kHard };

std::string mask_mode_name(MaskMode mode);

struct MaskLevel {
  Shape2 shape;
  std::vector<Tensor> masks;  // one 1-channel map per instance
};

/// Per-instance spatial weights. Level 0 of `levels` is the base resolution.
struct AttentionMaskSet {
  double tau = 0.0;
  MaskMode mode = MaskMode::kSoft;
  std::vector<MaskLevel> levels;

  std::size_t instance_count() const { return levels.empty() ? 0 : levels.front().masks.size(); }
  const std::vector<Tensor>& base() const { return levels.front().masks; }
  /// Masks at the given resolution; throws SHAPE_MISMATCH if absent.
  const std::vector<Tensor>& at(Shape2 shape) const;
};

AttentionMaskSet normalize_masks(std::span<const OccupancyMap> occs, double tau, MaskMode mode);

/// Adds (or replaces) area-pooled levels for each requested shape.
AttentionMaskSet resize_mask_pyramid(const AttentionMaskSet& masks,
                                     std::span<const Shape2> level_shapes);

/// round(255 * m) grayscale PNG bytes for one mask.
std::vector<std::uint8_t> mask_png(const Tensor& mask);

}  // namespace finecontrol::pose
