#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "finecontrol/denoiser.hpp"
#include "finecontrol/diffusion.hpp"
#include "finecontrol/pose_geometry.hpp"
#include "finecontrol/prompting.hpp"

namespace finecontrol::compose {

/// h = sum_i m_i * h_i, masks broadcast over channels. Throws SHAPE_MISMATCH.
Tensor compose_latents(std::span<const Tensor> latents, std::span<const Tensor> masks);

/// Number of initial steps that use HARD masks: ceil(hard_fraction * steps).
int hard_step_count(double hard_fraction, int num_steps);

struct StepTrace {
  int t = 0;
  int t_prev = 0;
  std::string mask_mode;        // "HARD", "SOFT" or "NONE"
  int sites_composed = 0;       // latent sites composed this step
  int controls_composed = 0;    // control embeddings composed (H_V2)
  std::string output_composed;  // "eps", "x" or "none"
};

struct RunTrace {
  CompositionMode mode = CompositionMode::kFineControl;
  int num_steps = 0;
  int hard_steps = 0;
  double tau = 0.0;
  int branches = 0;
  std::vector<StepTrace> steps;

  nlohmann::json to_json() const;
};

/// What a denoiser factory is asked for: one branch covering `instances`.
struct BranchRequest {
  int branch = 0;
  std::vector<int> instances;
  const prompt::SceneSpec* scene = nullptr;
};

using DenoiserFactory =
    std::function<std::shared_ptr<const denoise::Denoiser>(const BranchRequest&)>;

/// Every branch uses the same network.
DenoiserFactory shared_factory(std::shared_ptr<const denoise::Denoiser> denoiser);
/// Delta denoiser whose target is the rendered figures of the branch.
DenoiserFactory delta_factory(const denoise::Palette& palette, diffusion::NoiseSchedule schedule);

/// Branch condition for one instance: identity and setting tokens, own pose.
denoise::BranchCondition instance_condition(const prompt::SceneSpec& scene, int index);
/// Single-branch condition: identities left to right, setting, union pose.
denoise::BranchCondition global_condition(const prompt::SceneSpec& scene);

struct SceneMasks {
  pose::AttentionMaskSet hard;
  pose::AttentionMaskSet soft;
};

/// Dilated-occupancy masks with pyramid levels for every interior site shape.
SceneMasks build_scene_masks(const prompt::SceneSpec& scene, std::span<const Shape2> site_shapes,
                             double tau);

struct GenerationResult {
  Image image;
  RunTrace trace;
  SceneMasks masks;
};

/// Samples one image for the scene in the given mode. All branches start from
/// the same x_T drawn from cfg.seed; branch denoiser calls run concurrently
/// and meet at a barrier per composition site.
GenerationResult generate(const prompt::SceneSpec& scene, const DenoiserFactory& factory,
                          const diffusion::SamplerConfig& cfg, const HarmonyParams& harmony,
                          CompositionMode mode);
/// Uses the scene's own sampler, harmony and mode.
GenerationResult generate(const prompt::SceneSpec& scene, const DenoiserFactory& factory);

/// Plain single-branch DDIM.
Image sample_vanilla(const denoise::Denoiser& denoiser, const denoise::BranchCondition& cond,
                     Shape2 canvas, const diffusion::SamplerConfig& cfg);

}  // namespace finecontrol::compose
