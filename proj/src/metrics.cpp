#include "finecontrol/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "finecontrol/error.hpp"
#include "finecontrol/figure.hpp"

namespace finecontrol::metrics {
namespace {

constexpr double kMediumLo = 32.0 * 32.0;
constexpr double kMediumHi = 96.0 * 96.0;
constexpr double kPaletteNorm = 0.9;

double color_norm(const Image& img, int y, int x) {
  const double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
  return std::sqrt(r * r + g * g + b * b);
}

std::size_t index_of(std::span<const std::string> prompts, const std::string& true_prompt) {
  const auto it = std::find(prompts.begin(), prompts.end(), true_prompt);
  if (it == prompts.end()) {
    throw Error(ErrorCode::kMissingTruePrompt, "'" + true_prompt + "' is not among the candidate prompts");
  }
  return static_cast<std::size_t>(it - prompts.begin());
}

std::vector<double> all_scores(const Image& patch, std::span<const std::string> prompts,
                               const SimilarityOracle& oracle) {
  std::vector<double> s;
  s.reserve(prompts.size());
  for (const auto& p : prompts) s.push_back(oracle.score(patch, p));
  return s;
}

}  // namespace

ToySimilarityOracle::ToySimilarityOracle(denoise::Palette palette, double threshold)
    : palette_(std::move(palette)), threshold_(threshold) {}

std::array<double, 3> ToySimilarityOracle::patch_embedding(const Image& patch) const {
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  std::size_t n = 0;
  for (int y = 0; y < patch.height(); ++y) {
    for (int x = 0; x < patch.width(); ++x) {
      if (color_norm(patch, y, x) <= threshold_) continue;
      for (int c = 0; c < 3; ++c) sum[c] += patch.at(c, y, x);
      ++n;
    }
  }
  if (n > 0) {
    for (double& v : sum) v /= static_cast<double>(n);
  }
  return sum;
}

double ToySimilarityOracle::score(const Image& patch, const std::string& text) const {
  const auto& color = palette_.color(palette_.resolve(text));
  const auto e = patch_embedding(patch);
  const double dot = e[0] * color[0] + e[1] * color[1] + e[2] * color[2];
  const double ne = std::sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2]);
  const double nc = std::sqrt(color[0] * color[0] + color[1] * color[1] + color[2] * color[2]);
  if (ne == 0.0 || nc == 0.0) return 0.0;
  return 100.0 * dot / (ne * nc);
}

PatchBox instance_patch_box(const pose::Pose2D& pose, Shape2 canvas) {
  const auto b = pose.bbox();
  const double px = 0.1 * (b[2] - b[0]);
  const double py = 0.1 * (b[3] - b[1]);
  PatchBox box;
  box.x0 = std::clamp(static_cast<int>(std::floor(b[0] - px)), 0, canvas.width);
  box.y0 = std::clamp(static_cast<int>(std::floor(b[1] - py)), 0, canvas.height);
  box.x1 = std::clamp(static_cast<int>(std::floor(b[2] + px)) + 1, 0, canvas.width);
  box.y1 = std::clamp(static_cast<int>(std::floor(b[3] + py)) + 1, 0, canvas.height);
  return box;
}

Image crop(const Image& image, const PatchBox& box) {
  const int w = std::max(0, box.x1 - box.x0);
  const int h = std::max(0, box.y1 - box.y0);
  Image out(image.channels(), h, w);
  for (int c = 0; c < image.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, box.y0 + y, box.x0 + x);
    }
  }
  return out;
}

double cio_sim(std::span<const Image> patches, std::span<const std::string> prompts,
               const SimilarityOracle& oracle) {
  if (patches.size() != prompts.size() || patches.empty()) {
    throw Error(ErrorCode::kLengthMismatch, std::to_string(patches.size()) + " patches for " +
                                                std::to_string(prompts.size()) + " prompts");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < patches.size(); ++i) sum += oracle.score(patches[i], prompts[i]);
  return sum / static_cast<double>(patches.size());
}

double cio_sigma_from_scores(std::span<const double> scores, std::size_t true_index) {
  if (true_index >= scores.size()) throw Error(ErrorCode::kMissingTruePrompt, "true prompt index out of range");
  const double peak = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (double s : scores) total += std::exp(s - peak);
  return std::exp(scores[true_index] - peak) / total;
}

double cio_diff_from_scores(std::span<const double> scores, std::size_t true_index) {
  if (true_index >= scores.size()) throw Error(ErrorCode::kMissingTruePrompt, "true prompt index out of range");
  if (scores.size() < 2) return 0.0;
  double others = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != true_index) others += scores[i];
  }
  return scores[true_index] - others / static_cast<double>(scores.size() - 1);
}

double cio_sigma(const Image& patch, std::span<const std::string> prompts, const std::string& true_prompt,
                 const SimilarityOracle& oracle) {
  const std::size_t idx = index_of(prompts, true_prompt);
  return cio_sigma_from_scores(all_scores(patch, prompts, oracle), idx);
}

double cio_diff(const Image& patch, std::span<const std::string> prompts, const std::string& true_prompt,
                const SimilarityOracle& oracle) {
  const std::size_t idx = index_of(prompts, true_prompt);
  return cio_diff_from_scores(all_scores(patch, prompts, oracle), idx);
}

int hnd(int gt_count, int detected_count) { return std::abs(gt_count - detected_count); }

double oks(const pose::Pose2D& gt, const pose::Pose2D& det, double area, std::span<const double> k) {
  if (gt.format != det.format || gt.keypoints.size() != det.keypoints.size()) {
    throw Error(ErrorCode::kFormatMismatch, "OKS needs poses of the same format");
  }
  if (!(area > 0.0)) throw Error(ErrorCode::kInvalidRange, "OKS area must be positive");
  if (k.empty()) k = pose::oks_constants(gt.format);
  double sum = 0.0;
  int visible = 0;
  for (std::size_t i = 0; i < gt.keypoints.size(); ++i) {
    if (gt.keypoints[i].visible <= 0) continue;
    ++visible;
    const double dx = det.keypoints[i].x - gt.keypoints[i].x;
    const double dy = det.keypoints[i].y - gt.keypoints[i].y;
    sum += std::exp(-(dx * dx + dy * dy) / (2.0 * area * k[i] * k[i]));
  }
  if (visible == 0) throw Error(ErrorCode::kNoVisibleKeypoints, "ground-truth pose has no visible keypoints");
  return sum / visible;
}

double pose_area(const pose::Pose2D& pose) {
  const auto b = pose.bbox();
  return std::max(1.0, (b[2] - b[0]) * (b[3] - b[1]));
}

double keypoint_ap_at(std::span<const std::vector<pose::Pose2D>> gt,
                      std::span<const std::vector<Detection>> det, double threshold, double area_lo,
                      double area_hi) {
  if (gt.size() != det.size()) throw Error(ErrorCode::kLengthMismatch, "ground truth and detections differ in scene count");
  struct Scored {
    double score;
    bool tp;
    bool ignore;
  };
  std::vector<Scored> all;
  std::size_t positives = 0;
  auto in_range = [&](double a) { return a > area_lo && a <= area_hi; };

  for (std::size_t s = 0; s < gt.size(); ++s) {
    const auto& gts = gt[s];
    std::vector<int> gorder(gts.size());
    std::iota(gorder.begin(), gorder.end(), 0);
    std::vector<bool> gignore(gts.size());
    for (std::size_t g = 0; g < gts.size(); ++g) {
      gignore[g] = !in_range(pose_area(gts[g]));
      if (!gignore[g]) ++positives;
    }
    std::stable_sort(gorder.begin(), gorder.end(), [&](int a, int b) { return !gignore[a] && gignore[b]; });

    std::vector<int> dorder(det[s].size());
    std::iota(dorder.begin(), dorder.end(), 0);
    std::stable_sort(dorder.begin(), dorder.end(),
                     [&](int a, int b) { return det[s][a].score > det[s][b].score; });
    std::vector<bool> gmatched(gts.size(), false);
    for (int d : dorder) {
      const Detection& dt = det[s][d];
      double best = std::min(threshold, 1.0 - 1e-10);
      int m = -1;
      for (int g : gorder) {
        if (gmatched[g]) continue;
        if (m >= 0 && !gignore[m] && gignore[g]) break;
        const double o = oks(gts[g], dt.pose, pose_area(gts[g]));
        if (o < best) continue;
        best = o;
        m = g;
      }
      Scored sc{dt.score, false, false};
      if (m >= 0) {
        gmatched[m] = true;
        sc.tp = true;
        sc.ignore = gignore[m];
      } else {
        sc.ignore = !in_range(pose_area(dt.pose));
      }
      all.push_back(sc);
    }
  }
  if (positives == 0) return std::numeric_limits<double>::quiet_NaN();
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });

  std::vector<double> recall, precision;
  double tp = 0.0, fp = 0.0;
  for (const auto& sc : all) {
    if (sc.ignore) continue;
    if (sc.tp) {
      tp += 1.0;
    } else {
      fp += 1.0;
    }
    recall.push_back(tp / static_cast<double>(positives));
    precision.push_back(tp / (tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

ApResult keypoint_ap(std::span<const std::vector<pose::Pose2D>> gt,
                     std::span<const std::vector<Detection>> det) {
  std::size_t total = 0;
  for (const auto& g : gt) total += g.size();
  if (total == 0) throw Error(ErrorCode::kEmptyGt, "keypoint AP needs at least one ground-truth pose");
  auto mean_over_thresholds = [&](double lo, double hi) {
    double sum = 0.0;
    for (int i = 0; i < 10; ++i) {
      const double ap = keypoint_ap_at(gt, det, 0.5 + 0.05 * i, lo, hi);
      if (std::isnan(ap)) return ap;
      sum += ap;
    }
    return 100.0 * sum / 10.0;
  };
  const double inf = std::numeric_limits<double>::infinity();
  return {mean_over_thresholds(-inf, inf), mean_over_thresholds(kMediumLo, kMediumHi),
          mean_over_thresholds(kMediumHi, inf)};
}

ToyPoseDetector::ToyPoseDetector(double threshold, int min_pixels)
    : threshold_(threshold), min_pixels_(min_pixels) {}

std::vector<Detection> ToyPoseDetector::detect(const Image& image) const {
  const int h = image.height();
  const int w = image.width();
  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  std::vector<std::uint8_t> fg(label.size(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) fg[static_cast<std::size_t>(y) * w + x] = color_norm(image, y, x) > threshold_;
  }
  std::vector<Detection> out;
  std::vector<int> stack;
  int next = 0;
  for (int start = 0; start < h * w; ++start) {
    if (!fg[start] || label[start] >= 0) continue;
    int x0 = w, y0 = h, x1 = -1, y1 = -1, count = 0;
    double norm_sum = 0.0;
    stack.assign(1, start);
    label[start] = next;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int py = p / w, px = p % w;
      x0 = std::min(x0, px);
      x1 = std::max(x1, px);
      y0 = std::min(y0, py);
      y1 = std::max(y1, py);
      ++count;
      norm_sum += color_norm(image, py, px);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int qy = py + dy, qx = px + dx;
          if (qy < 0 || qx < 0 || qy >= h || qx >= w) continue;
          const int q = qy * w + qx;
          if (fg[q] && label[q] < 0) {
            label[q] = next;
            stack.push_back(q);
          }
        }
      }
    }
    ++next;
    if (count < min_pixels_) continue;
    // Strokes extend one pixel beyond the keypoints on every side.
    const double kx0 = x0 + 1.0, ky0 = y0 + 1.0;
    const double kx1 = std::max(kx0, x1 - 1.0), ky1 = std::max(ky0, y1 - 1.0);
    Detection d;
    d.pose = pose::fit_figure(kx0, ky0, kx1, ky1);
    d.score = std::clamp(norm_sum / count / kPaletteNorm, 0.0, 1.0);
    out.push_back(std::move(d));
  }
  return out;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

namespace {

nlohmann::json summary_json(const Summary& s) { return {{"mean", s.mean}, {"std", s.std}, {"n", s.count}}; }

nlohmann::json maybe_number(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  return {{"cio_sim", summary_json(cio_sim)},
          {"cio_sigma", summary_json(cio_sigma)},
          {"cio_diff", summary_json(cio_diff)},
          {"hnd", summary_json(hnd)},
          {"ap", maybe_number(ap.ap)},
          {"ap_m", maybe_number(ap.ap_m)},
          {"ap_l", maybe_number(ap.ap_l)},
          {"fid", fid ? nlohmann::json(*fid) : nlohmann::json(nullptr)},
          {"scenes", scenes}};
}

SceneRecord evaluate_scene(const std::string& scene_id, const Image& image,
                           std::span<const pose::Pose2D> poses, std::span<const std::string> prompts,
                           const SimilarityOracle& oracle, const PoseDetector& detector,
                           std::vector<Detection>* detections) {
  if (poses.size() != prompts.size()) {
    throw Error(ErrorCode::kLengthMismatch, "one prompt per pose is required");
  }
  SceneRecord rec;
  rec.scene_id = scene_id;
  rec.gt_count = static_cast<int>(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Image patch = crop(image, instance_patch_box(poses[i], image.shape2()));
    const std::vector<double> scores = all_scores(patch, prompts, oracle);
    InstanceRecord ir;
    ir.scene_id = scene_id;
    ir.instance = static_cast<int>(i);
    ir.prompt = prompts[i];
    ir.cio_sim = scores[i];
    ir.cio_sigma = cio_sigma_from_scores(scores, i);
    ir.cio_diff = cio_diff_from_scores(scores, i);
    rec.instances.push_back(std::move(ir));
  }
  std::vector<Detection> found = detector.detect(image);
  rec.detected = static_cast<int>(found.size());
  if (detections) *detections = std::move(found);
  return rec;
}

MetricsReport aggregate(std::span<const SceneRecord> records,
                        std::span<const std::vector<pose::Pose2D>> gt,
                        std::span<const std::vector<Detection>> det) {
  std::vector<double> sim, sigma, diff, h;
  for (const auto& r : records) {
    for (const auto& i : r.instances) {
      sim.push_back(i.cio_sim);
      sigma.push_back(i.cio_sigma);
      diff.push_back(i.cio_diff);
    }
    h.push_back(hnd(r.gt_count, r.detected));
  }
  MetricsReport rep;
  rep.cio_sim = summarize(sim);
  rep.cio_sigma = summarize(sigma);
  rep.cio_diff = summarize(diff);
  rep.hnd = summarize(h);
  rep.ap = keypoint_ap(gt, det);
  rep.scenes = records.size();
  return rep;
}

nlohmann::json instance_record_json(const InstanceRecord& r) {
  return {{"scene", r.scene_id}, {"instance", r.instance}, {"prompt", r.prompt},
          {"cio_sim", r.cio_sim}, {"cio_sigma", r.cio_sigma}, {"cio_diff", r.cio_diff}};
}

}  // namespace finecontrol::metrics
