#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "finecontrol/denoiser.hpp"
#include "finecontrol/pose_geometry.hpp"
#include "finecontrol/tensor.hpp"

namespace finecontrol::metrics {

/// Joint image-text similarity on the logit scale (cosine x 100).
class SimilarityOracle {
 public:
  virtual ~SimilarityOracle() = default;
  virtual double score(const Image& patch, const std::string& text) const = 0;
};

/// Embeds a patch by the mean colour of its foreground pixels (colour norm
/// above `threshold`) and a prompt by the palette colour it names.
class ToySimilarityOracle final : public SimilarityOracle {
 public:
  explicit ToySimilarityOracle(denoise::Palette palette = denoise::default_palette(),
                               double threshold = 0.3);
  double score(const Image& patch, const std::string& text) const override;
  std::array<double, 3> patch_embedding(const Image& patch) const;

 private:
  denoise::Palette palette_;
  double threshold_;
};

/// Half-open pixel box [x0, x1) x [y0, y1).
struct PatchBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const PatchBox&, const PatchBox&) = default;
};

/// Tight box over visible keypoints padded by 10% per side, clipped to the canvas.
PatchBox instance_patch_box(const pose::Pose2D& pose, Shape2 canvas);
Image crop(const Image& image, const PatchBox& box);

double cio_sim(std::span<const Image> patches, std::span<const std::string> prompts,
               const SimilarityOracle& oracle);

/// Softmax weight of scores[true_index]; overflow-safe.
double cio_sigma_from_scores(std::span<const double> scores, std::size_t true_index);
/// scores[true_index] minus the mean of the other scores.
double cio_diff_from_scores(std::span<const double> scores, std::size_t true_index);

/// Throw MISSING_TRUE_PROMPT when `true_prompt` is not in `prompts`.
double cio_sigma(const Image& patch, std::span<const std::string> prompts, const std::string& true_prompt,
                 const SimilarityOracle& oracle);
double cio_diff(const Image& patch, std::span<const std::string> prompts, const std::string& true_prompt,
                const SimilarityOracle& oracle);

int hnd(int gt_count, int detected_count);

/// COCO object keypoint similarity over the ground-truth visible keypoints.
/// `k` defaults to the format's constants. Throws NO_VISIBLE_KEYPOINTS.
double oks(const pose::Pose2D& gt, const pose::Pose2D& det, double area, std::span<const double> k = {});

/// Area used for OKS and for the medium / large split: tight keypoint box area.
double pose_area(const pose::Pose2D& pose);

struct Detection {
  pose::Pose2D pose;
  double score = 0.0;
};

struct ApResult {
  double ap = 0.0;
  double ap_m = 0.0;  // NaN when no ground truth falls in (32^2, 96^2]
  double ap_l = 0.0;  // NaN when no ground truth is larger than 96^2
};

/// COCO-style keypoint AP (percent): greedy matching by descending confidence
/// per image, 101-point interpolated precision, averaged over OKS thresholds
/// .50:.05:.95. Throws EMPTY_GT when there is no ground truth at all.
ApResult keypoint_ap(std::span<const std::vector<pose::Pose2D>> gt,
                     std::span<const std::vector<Detection>> det);

/// AP for one OKS threshold and area range; exposed for audits.
double keypoint_ap_at(std::span<const std::vector<pose::Pose2D>> gt,
                      std::span<const std::vector<Detection>> det, double threshold, double area_lo,
                      double area_hi);

class PoseDetector {
 public:
  virtual ~PoseDetector() = default;
  virtual std::vector<Detection> detect(const Image& image) const = 0;
};

/// Finds 8-connected foreground components and fits the standing-figure
/// template to each component's box. Confidence is the component's mean
/// colour norm relative to the palette norm, clipped to [0, 1].
class ToyPoseDetector final : public PoseDetector {
 public:
  explicit ToyPoseDetector(double threshold = 0.3, int min_pixels = 8);
  std::vector<Detection> detect(const Image& image) const override;

 private:
  double threshold_;
  int min_pixels_;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

struct InstanceRecord {
  std::string scene_id;
  int instance = 0;
  std::string prompt;
  double cio_sim = 0.0;
  double cio_sigma = 0.0;
  double cio_diff = 0.0;
};

struct SceneRecord {
  std::string scene_id;
  int gt_count = 0;
  int detected = 0;
  std::vector<InstanceRecord> instances;
};

struct MetricsReport {
  Summary cio_sim, cio_sigma, cio_diff, hnd;
  ApResult ap;
  std::optional<double> fid;  // requires an external feature extractor
  std::size_t scenes = 0;

  nlohmann::json to_json() const;
};

/// Scores one generated scene: CIO per instance on input-pose patches and
/// the detector count.
SceneRecord evaluate_scene(const std::string& scene_id, const Image& image,
                           std::span<const pose::Pose2D> poses, std::span<const std::string> prompts,
                           const SimilarityOracle& oracle, const PoseDetector& detector,
                           std::vector<Detection>* detections = nullptr);

/// Aggregates scene records and runs keypoint AP over the detections.
MetricsReport aggregate(std::span<const SceneRecord> records,
                        std::span<const std::vector<pose::Pose2D>> gt,
                        std::span<const std::vector<Detection>> det);

nlohmann::json instance_record_json(const InstanceRecord& r);

}  // namespace finecontrol::metrics
