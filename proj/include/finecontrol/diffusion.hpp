#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "finecontrol/tensor.hpp"

namespace finecontrol::diffusion {

/// Cumulative signal coefficients alpha_bar[0..T], alpha_bar[0] == 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> alpha_bar);

  int horizon() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const;
  const std::vector<double>& table() const noexcept { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_;
};

/// Linear beta schedule; alpha_bar_t = prod_{s<=t} (1 - beta_s).
NoiseSchedule make_schedule(int horizon, double beta_start, double beta_end);
/// T = 1000, beta in [1e-4, 0.02].
NoiseSchedule default_schedule();

struct SamplerConfig {
  int num_steps = 20;
  double eta = 0.0;
  std::uint64_t seed = 0;
  double guidance_scale = 1.0;
};

/// sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
Image add_noise(const Image& x0, int t, const Image& eps, const NoiseSchedule& sched);

/// (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t).
Image predict_x0(const Image& x_t, const Image& eps, int t, const NoiseSchedule& sched);

/// DDIM stochasticity for the transition t -> t_prev.
double ddim_sigma(int t, int t_prev, double eta, const NoiseSchedule& sched);

/// One DDIM update from t to t_prev < t. `noise` must be supplied iff
/// cfg.eta > 0. Throws NEGATIVE_RADICAND when sigma^2 > 1 - ab_{t_prev}.
Image ddim_step(const Image& x_t, const Image& eps, int t, int t_prev, const SamplerConfig& cfg,
                const NoiseSchedule& sched, const Image* noise = nullptr);

/// Evenly spaced, endpoint-inclusive timesteps from T down to 1 (length
/// num_steps); each step transitions to the next entry and the last to 0.
std::vector<int> ddim_timesteps(int horizon, int num_steps);

/// Standard normal field drawn from a 64-bit Mersenne twister.
Image gaussian_image(int channels, int height, int width, std::mt19937_64& rng);

}  // namespace finecontrol::diffusion
