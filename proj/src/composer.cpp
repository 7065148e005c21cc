#include "finecontrol/composer.hpp"

#include <algorithm>
#include <barrier>
#include <cmath>
#include <exception>
#include <mutex>
#include <random>
#include <thread>

#include "finecontrol/error.hpp"

namespace finecontrol::compose {

using denoise::BranchCondition;
using denoise::Denoiser;
using denoise::SiteHooks;

Tensor compose_latents(std::span<const Tensor> latents, std::span<const Tensor> masks) {
  if (latents.empty() || latents.size() != masks.size()) {
    throw Error(ErrorCode::kShapeMismatch, std::to_string(latents.size()) + " latents for " +
                                               std::to_string(masks.size()) + " masks");
  }
  const Tensor& first = latents.front();
  for (std::size_t i = 0; i < latents.size(); ++i) {
    require_same_shape(latents[i], first, "compose_latents");
    if (masks[i].channels() != 1 || masks[i].shape2() != first.shape2()) {
      throw Error(ErrorCode::kShapeMismatch, "mask " + shape_string(masks[i]) + " does not match latent " +
                                                 shape_string(first));
    }
  }
  Tensor out(first.channels(), first.height(), first.width());
  const std::size_t np = first.plane_size();
  for (int c = 0; c < first.channels(); ++c) {
    double* o = out.plane(c).data();
    for (std::size_t i = 0; i < latents.size(); ++i) {
      const double* h = latents[i].plane(c).data();
      const double* m = masks[i].plane(0).data();
      for (std::size_t p = 0; p < np; ++p) o[p] += m[p] * h[p];
    }
  }
  return out;
}

int hard_step_count(double hard_fraction, int num_steps) {
  if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidRange, "hard_fraction must lie in [0, 1]");
  }
  // The epsilon absorbs products such as 0.3 * 10 = 3.0000000000000004.
  const int n = static_cast<int>(std::ceil(hard_fraction * num_steps - 1e-9));
  return std::clamp(n, 0, num_steps);
}

nlohmann::json RunTrace::to_json() const {
  nlohmann::json steps_json = nlohmann::json::array();
  for (const auto& s : steps) {
    steps_json.push_back({{"t", s.t},
                          {"t_prev", s.t_prev},
                          {"mask_mode", s.mask_mode},
                          {"sites_composed", s.sites_composed},
                          {"controls_composed", s.controls_composed},
                          {"output_composed", s.output_composed}});
  }
  return {{"version", 1},
          {"mode", mode_name(mode)},
          {"num_steps", num_steps},
          {"hard_steps", hard_steps},
          {"tau", tau},
          {"branches", branches},
          {"steps", std::move(steps_json)}};
}

DenoiserFactory shared_factory(std::shared_ptr<const Denoiser> denoiser) {
  return [denoiser](const BranchRequest&) { return denoiser; };
}

DenoiserFactory delta_factory(const denoise::Palette& palette, diffusion::NoiseSchedule schedule) {
  return [palette, schedule](const BranchRequest& req) -> std::shared_ptr<const Denoiser> {
    std::vector<denoise::RenderItem> items;
    for (int i : req.instances) {
      const auto& inst = req.scene->instances.at(i);
      items.push_back({palette.resolve(inst.identity), inst.pose});
    }
    const Shape2 canvas = req.scene->canvas;
    return std::make_shared<denoise::DeltaDenoiser>(
        denoise::render_scene(items, palette, canvas.height, canvas.width), schedule);
  };
}

namespace {

void append_tokens(BranchCondition& cond, const std::string& setting) {
  if (!setting.empty()) cond.tokens.push_back(denoise::embed_token(setting));
}

std::vector<pose::Pose2D> scene_poses(const prompt::SceneSpec& scene) {
  std::vector<pose::Pose2D> poses;
  for (const auto& inst : scene.instances) poses.push_back(inst.pose);
  return poses;
}

}  // namespace

BranchCondition instance_condition(const prompt::SceneSpec& scene, int index) {
  const auto& inst = scene.instances.at(index);
  BranchCondition cond;
  cond.prompt = prompt::build_instance_prompt(inst.identity, scene.setting);
  cond.tokens.push_back(denoise::embed_token(inst.identity));
  append_tokens(cond, scene.setting);
  cond.control = denoise::pose_control(inst.pose, scene.canvas.height, scene.canvas.width);
  cond.instances = {index};
  return cond;
}

BranchCondition global_condition(const prompt::SceneSpec& scene) {
  if (scene.instances.empty()) throw Error(ErrorCode::kEmptyScene, "scene has no instances");
  BranchCondition cond;
  std::string joined;
  std::vector<denoise::ControlEmbedding> controls;
  for (int i : prompt::left_to_right_order(scene_poses(scene))) {
    const auto& inst = scene.instances[i];
    if (!joined.empty()) joined += ", ";
    joined += inst.identity;
    cond.tokens.push_back(denoise::embed_token(inst.identity));
    controls.push_back(denoise::pose_control(inst.pose, scene.canvas.height, scene.canvas.width));
    cond.instances.push_back(i);
  }
  cond.prompt = prompt::build_instance_prompt(joined, scene.setting);
  append_tokens(cond, scene.setting);
  cond.control = denoise::union_control(controls);
  return cond;
}

SceneMasks build_scene_masks(const prompt::SceneSpec& scene, std::span<const Shape2> site_shapes,
                             double tau) {
  if (scene.instances.empty()) throw Error(ErrorCode::kEmptyScene, "scene has no instances");
  std::vector<pose::OccupancyMap> occs;
  for (const auto& inst : scene.instances) {
    occs.push_back(pose::instance_occupancy(inst.pose, scene.canvas.height, scene.canvas.width));
  }
  std::vector<Shape2> levels;
  for (Shape2 s : site_shapes) {
    if (s != scene.canvas && std::find(levels.begin(), levels.end(), s) == levels.end()) levels.push_back(s);
  }
  return {pose::resize_mask_pyramid(pose::normalize_masks(occs, tau, pose::MaskMode::kHard), levels),
          pose::resize_mask_pyramid(pose::normalize_masks(occs, tau, pose::MaskMode::kSoft), levels)};
}

namespace {

// Rendezvous for one composition point across all branches. The barrier's
// completion step composes the branch tensors in place.
struct Exchange {
  std::vector<Tensor*> slots;
  const std::vector<Tensor>* masks = nullptr;
  std::exception_ptr error;
  bool composed = false;

  void compose() noexcept {
    if (error || std::find(slots.begin(), slots.end(), nullptr) != slots.end()) return;
    try {
      std::vector<Tensor> views;
      views.reserve(slots.size());
      for (Tensor* t : slots) views.push_back(*t);
      const Tensor mixed = compose_latents(views, *masks);
      for (Tensor* t : slots) *t = mixed;
      composed = true;
    } catch (...) {
      error = std::current_exception();
    }
  }
};

struct Completion {
  Exchange* exchange;
  void operator()() noexcept { exchange->compose(); }
};

using Barrier = std::barrier<Completion>;

struct BranchPlan {
  std::vector<std::shared_ptr<const Denoiser>> nets;
  std::vector<BranchCondition> conds;
  std::vector<BranchCondition> unconds;  // filled when guidance is active
  std::vector<denoise::CompositionSite> sites;
  std::size_t control_sites = 0;
};

struct StepCounts {
  int sites = 0;
  int controls = 0;
};

// One denoiser pass per branch. Latent sites (and, when requested, control
// injection points) are composed across branches with the given masks.
std::vector<Image> branch_epsilons(const BranchPlan& plan, const std::vector<BranchCondition>& conds,
                                   const Image& x, int t, const pose::AttentionMaskSet* latent_masks,
                                   const pose::AttentionMaskSet* control_masks, StepCounts& counts) {
  const std::size_t n = plan.nets.size();
  const std::size_t n_sites = plan.sites.size();
  const std::size_t n_ctrl = control_masks ? plan.control_sites : 0;

  std::vector<Exchange> latent_ex(latent_masks ? n_sites : 0);
  std::vector<Exchange> control_ex(n_ctrl);
  std::vector<std::unique_ptr<Barrier>> latent_bar;
  std::vector<std::unique_ptr<Barrier>> control_bar;
  for (std::size_t s = 0; s < latent_ex.size(); ++s) {
    latent_ex[s].slots.assign(n, nullptr);
    latent_ex[s].masks = &latent_masks->at(plan.sites[s].shape);
    latent_bar.push_back(std::make_unique<Barrier>(static_cast<std::ptrdiff_t>(n), Completion{&latent_ex[s]}));
  }
  std::vector<Shape2> control_shapes;
  for (std::size_t k = 0; k < n_ctrl; ++k) {
    // Decoder control points follow the decoder sites, coarsest first.
    const auto& site = plan.sites[n_sites - n_ctrl + k];
    control_ex[k].slots.assign(n, nullptr);
    control_ex[k].masks = &control_masks->at(site.shape);
    control_bar.push_back(std::make_unique<Barrier>(static_cast<std::ptrdiff_t>(n), Completion{&control_ex[k]}));
  }

  std::vector<Image> eps(n);
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    std::vector<bool> latent_done(latent_bar.size(), false);
    std::vector<bool> control_done(control_bar.size(), false);
    try {
      SiteHooks hooks = denoise::identity_hooks(n_sites, n_ctrl);
      for (std::size_t s = 0; s < latent_bar.size(); ++s) {
        hooks.after_cross_attention[s] = [&, i, s](Tensor& h) {
          latent_ex[s].slots[i] = &h;
          latent_done[s] = true;
          latent_bar[s]->arrive_and_wait();
        };
      }
      for (std::size_t k = 0; k < control_bar.size(); ++k) {
        hooks.before_control_injection[k] = [&, i, k](Tensor& c) {
          control_ex[k].slots[i] = &c;
          control_done[k] = true;
          control_bar[k]->arrive_and_wait();
        };
      }
      eps[i] = plan.nets[i]->epsilon(x, t, conds[i], hooks);
      for (std::size_t s = 0; s < latent_bar.size(); ++s) {
        if (!latent_done[s]) throw Error(ErrorCode::kHookArity, "denoiser skipped composition site " + plan.sites[s].name);
      }
      for (std::size_t k = 0; k < control_bar.size(); ++k) {
        if (!control_done[k]) throw Error(ErrorCode::kHookArity, "denoiser skipped a control injection point");
      }
    } catch (...) {
      errors[i] = std::current_exception();
      for (std::size_t s = 0; s < latent_bar.size(); ++s) {
        if (!latent_done[s]) latent_bar[s]->arrive_and_drop();
      }
      for (std::size_t k = 0; k < control_bar.size(); ++k) {
        if (!control_done[k]) control_bar[k]->arrive_and_drop();
      }
    }
  };

  if (n == 1) {
    run(0);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t i = 1; i < n; ++i) workers.emplace_back(run, i);
    run(0);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (auto& ex : latent_ex) {
    if (ex.error) std::rethrow_exception(ex.error);
    counts.sites += ex.composed ? 1 : 0;
  }
  for (auto& ex : control_ex) {
    if (ex.error) std::rethrow_exception(ex.error);
    counts.controls += ex.composed ? 1 : 0;
  }
  return eps;
}

Image guided(const Image& cond_eps, const Image& uncond_eps, double scale) {
  Image out = uncond_eps;
  auto o = out.data();
  auto c = cond_eps.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += scale * (c[i] - o[i]);
  return out;
}

void require_divisible(Shape2 canvas, const std::vector<denoise::CompositionSite>& sites) {
  for (const auto& s : sites) {
    if (s.shape.height <= 0 || s.shape.width <= 0 || canvas.height % s.shape.height != 0 ||
        canvas.width % s.shape.width != 0) {
      throw Error(ErrorCode::kNonDivisibleShape, "site " + s.name + " does not divide the canvas");
    }
  }
}

BranchCondition unconditional(const BranchCondition& cond) {
  BranchCondition u;
  u.tokens.push_back(denoise::embed_token(""));
  u.control = cond.control;
  u.instances = cond.instances;
  return u;
}

}  // namespace

GenerationResult generate(const prompt::SceneSpec& scene, const DenoiserFactory& factory,
                          const diffusion::SamplerConfig& cfg, const HarmonyParams& harmony,
                          CompositionMode mode) {
  if (scene.instances.empty()) throw Error(ErrorCode::kEmptyScene, "scene has no instances");
  if (!(harmony.tau > 0.0)) throw Error(ErrorCode::kNonpositiveTemperature, "tau must be positive");
  const int n = static_cast<int>(scene.instances.size());
  const Shape2 canvas = scene.canvas;

  BranchPlan plan;
  if (mode == CompositionMode::kGlobal) {
    BranchRequest req{0, {}, &scene};
    plan.conds.push_back(global_condition(scene));
    req.instances = plan.conds.back().instances;
    plan.nets.push_back(factory(req));
  } else {
    for (int i = 0; i < n; ++i) {
      plan.nets.push_back(factory(BranchRequest{i, {i}, &scene}));
      plan.conds.push_back(instance_condition(scene, i));
    }
  }
  plan.sites = plan.nets.front()->sites(canvas);
  plan.control_sites = plan.nets.front()->control_site_count();
  for (const auto& net : plan.nets) {
    if (net->sites(canvas).size() != plan.sites.size() || net->control_site_count() != plan.control_sites) {
      throw Error(ErrorCode::kHookArity, "branch denoisers disagree on their composition sites");
    }
  }
  require_divisible(canvas, plan.sites);
  const bool guidance = cfg.guidance_scale != 1.0;
  if (guidance) {
    for (const auto& c : plan.conds) plan.unconds.push_back(unconditional(c));
  }

  std::vector<Shape2> shapes;
  for (const auto& s : plan.sites) shapes.push_back(s.shape);
  GenerationResult result;
  result.masks = build_scene_masks(scene, shapes, harmony.tau);

  const auto& sched = plan.nets.front()->schedule();
  const std::vector<int> ts = diffusion::ddim_timesteps(sched.horizon(), cfg.num_steps);
  const int hard_steps = hard_step_count(harmony.hard_fraction, cfg.num_steps);
  RunTrace& trace = result.trace;
  trace.mode = mode;
  trace.num_steps = cfg.num_steps;
  trace.hard_steps = mode == CompositionMode::kGlobal ? 0 : hard_steps;
  trace.tau = harmony.tau;
  trace.branches = static_cast<int>(plan.nets.size());

  std::mt19937_64 rng(cfg.seed);
  Image x = diffusion::gaussian_image(3, canvas.height, canvas.width, rng);

  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const bool hard = static_cast<int>(k) < hard_steps;
    const pose::AttentionMaskSet& masks = hard ? result.masks.hard : result.masks.soft;
    Image noise;
    if (cfg.eta > 0.0) noise = diffusion::gaussian_image(3, canvas.height, canvas.width, rng);
    const Image* noise_ptr = cfg.eta > 0.0 ? &noise : nullptr;

    StepTrace st;
    st.t = t;
    st.t_prev = t_prev;
    st.mask_mode = mode == CompositionMode::kGlobal ? "NONE" : pose::mask_mode_name(masks.mode);

    const pose::AttentionMaskSet* latent_masks = nullptr;
    const pose::AttentionMaskSet* control_masks = nullptr;
    if (mode == CompositionMode::kFineControl || mode == CompositionMode::kHV2) latent_masks = &masks;
    if (mode == CompositionMode::kHV2) control_masks = &masks;

    StepCounts counts;
    std::vector<Image> eps = branch_epsilons(plan, plan.conds, x, t, latent_masks, control_masks, counts);
    if (guidance) {
      StepCounts ignored;
      const std::vector<Image> ueps = branch_epsilons(plan, plan.unconds, x, t, latent_masks, control_masks, ignored);
      for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = guided(eps[i], ueps[i], cfg.guidance_scale);
    }
    st.sites_composed = counts.sites;
    st.controls_composed = counts.controls;

    switch (mode) {
      case CompositionMode::kFineControl:
      case CompositionMode::kHV2: {
        const Image mixed = compose_latents(eps, masks.base());
        x = diffusion::ddim_step(x, mixed, t, t_prev, cfg, sched, noise_ptr);
        st.output_composed = "eps";
        break;
      }
      case CompositionMode::kXCompose: {
        std::vector<Image> candidates;
        for (const auto& e : eps) candidates.push_back(diffusion::ddim_step(x, e, t, t_prev, cfg, sched, noise_ptr));
        x = compose_latents(candidates, masks.base());
        st.output_composed = "x";
        break;
      }
      case CompositionMode::kGlobal:
        x = diffusion::ddim_step(x, eps.front(), t, t_prev, cfg, sched, noise_ptr);
        st.output_composed = "none";
        break;
    }
    trace.steps.push_back(std::move(st));
  }
  result.image = std::move(x);
  return result;
}

GenerationResult generate(const prompt::SceneSpec& scene, const DenoiserFactory& factory) {
  diffusion::SamplerConfig cfg = scene.sampler;
  cfg.seed = scene.seed;
  return generate(scene, factory, cfg, scene.harmony, scene.mode);
}

Image sample_vanilla(const Denoiser& denoiser, const BranchCondition& cond, Shape2 canvas,
                     const diffusion::SamplerConfig& cfg) {
  const auto& sched = denoiser.schedule();
  const std::vector<int> ts = diffusion::ddim_timesteps(sched.horizon(), cfg.num_steps);
  std::mt19937_64 rng(cfg.seed);
  Image x = diffusion::gaussian_image(3, canvas.height, canvas.width, rng);
  const BranchCondition uncond = unconditional(cond);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    Image noise;
    if (cfg.eta > 0.0) noise = diffusion::gaussian_image(3, canvas.height, canvas.width, rng);
    Image eps = denoiser.epsilon(x, t, cond);
    if (cfg.guidance_scale != 1.0) eps = guided(eps, denoiser.epsilon(x, t, uncond), cfg.guidance_scale);
    x = diffusion::ddim_step(x, eps, t, t_prev, cfg, sched, cfg.eta > 0.0 ? &noise : nullptr);
  }
  return x;
}

}  // namespace finecontrol::compose
