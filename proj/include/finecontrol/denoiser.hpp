#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "finecontrol/diffusion.hpp"
#include "finecontrol/pose_geometry.hpp"
#include "finecontrol/tensor.hpp"

namespace finecontrol::denoise {

inline constexpr int kTextWidth = 16;
/// Stroke width used for rendering figures and for the control field.
inline constexpr double kStrokeWidth = 2.0;

struct TextEmbedding {
  std::vector<double> vector;
  std::string source_text;
};

/// Deterministic token-hash embedding of width kTextWidth. Each element is a
/// standard normal draw seeded by a 64-bit FNV-1a hash of the text.
TextEmbedding embed_token(const std::string& text);

enum class Modality { kPose, kCanny, kMlsd, kHed, kSketch };

/// Spatially aligned conditioning field (1 channel, canvas-sized).
struct ControlEmbedding {
  Tensor field;
  Modality modality = Modality::kPose;
};

/// Rasterized stroke field of one pose (1 where a figure is drawn).
ControlEmbedding pose_control(const pose::Pose2D& pose, int height, int width);
/// Pixelwise max of several control fields.
ControlEmbedding union_control(std::span<const ControlEmbedding> controls);

/// Everything one denoiser branch is conditioned on.
struct BranchCondition {
  std::string prompt;
  std::vector<TextEmbedding> tokens;
  ControlEmbedding control;
  std::vector<int> instances;  // scene instances this branch speaks for
};

using LatentHook = std::function<void(Tensor&)>;

/// One callback per composition site (null entries are identity). Denoisers
/// with additive control injection also call `before_control_injection`
/// with the control embedding at each decoder level before it is added.
struct SiteHooks {
  std::vector<LatentHook> after_cross_attention;
  std::vector<LatentHook> before_control_injection;
};

SiteHooks identity_hooks(std::size_t sites, std::size_t control_sites = 0);

struct CompositionSite {
  std::string name;
  Shape2 shape;
  int channels = 0;
};

/// eps_theta(x_t, t, c_t, c_f) with declared internal composition sites.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual std::vector<CompositionSite> sites(Shape2 canvas) const = 0;
  virtual std::size_t control_site_count() const { return 0; }
  virtual const diffusion::NoiseSchedule& schedule() const = 0;

  /// Throws HOOK_ARITY unless `hooks.after_cross_attention` has exactly one
  /// entry per site and `before_control_injection` is empty or has exactly
  /// control_site_count() entries.
  virtual Image epsilon(const Image& x_t, int t, const BranchCondition& cond,
                        const SiteHooks& hooks) const = 0;

  Image epsilon(const Image& x_t, int t, const BranchCondition& cond) const;

 protected:
  void check_hooks(const SiteHooks& hooks, Shape2 canvas) const;
};

/// Exact noise predictor for a point-mass data distribution at `target`.
/// Its single composition site is the output itself.
class DeltaDenoiser final : public Denoiser {
 public:
  DeltaDenoiser(Image target, diffusion::NoiseSchedule schedule);

  std::vector<CompositionSite> sites(Shape2 canvas) const override;
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }
  using Denoiser::epsilon;
  Image epsilon(const Image& x_t, int t, const BranchCondition& cond,
                const SiteHooks& hooks) const override;

  const Image& target() const noexcept { return target_; }

 private:
  Image target_;
  diffusion::NoiseSchedule schedule_;
};

struct PaletteEntry {
  std::string token;
  std::array<double, 3> color;
};

/// Identity token -> stroke colour. Colours live in the [-1, 1] pixel space
/// whose origin is the neutral background.
class Palette {
 public:
  Palette() = default;
  explicit Palette(std::vector<PaletteEntry> entries);

  const std::array<double, 3>& color(const std::string& token) const;
  bool contains(const std::string& token) const;
  const std::vector<PaletteEntry>& entries() const noexcept { return entries_; }
  std::vector<std::string> tokens() const;
  /// Palette token named by free text: an exact match, else the first palette
  /// token occurring as a whole word. Throws UNKNOWN_TOKEN otherwise.
  const std::string& resolve(const std::string& text) const;

 private:
  std::vector<PaletteEntry> entries_;
};

/// Eight colours: six signed primaries (mutually orthogonal or opposite)
/// plus light and dark grey.
const Palette& default_palette();

/// Stick figure of `pose` in the token's colour on a neutral (zero) background.
Image render_instance(const std::string& identity_token, const pose::Pose2D& pose,
                      const Palette& palette, int height, int width);

struct RenderItem {
  std::string identity;
  pose::Pose2D pose;
};

/// Figures drawn in order; later figures cover earlier ones.
Image render_scene(std::span<const RenderItem> items, const Palette& palette, int height,
                   int width);

}  // namespace finecontrol::denoise
