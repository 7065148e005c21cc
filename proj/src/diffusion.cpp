#include "finecontrol/diffusion.hpp"

#include <cmath>
#include <string>

#include "finecontrol/error.hpp"

namespace finecontrol::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar)) {
  if (alpha_bar_.size() < 2 || alpha_bar_.front() != 1.0) {
    throw Error(ErrorCode::kInvalidRange, "schedule needs alpha_bar[0] == 1 and T >= 1");
  }
  for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
    if (!(alpha_bar_[t] < alpha_bar_[t - 1]) || !(alpha_bar_[t] > 0.0)) {
      throw Error(ErrorCode::kInvalidRange, "alpha_bar must be positive and strictly decreasing");
    }
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > horizon()) {
    throw Error(ErrorCode::kInvalidRange, "timestep " + std::to_string(t) + " outside [0, " +
                                              std::to_string(horizon()) + "]");
  }
  return alpha_bar_[static_cast<std::size_t>(t)];
}

NoiseSchedule make_schedule(int horizon, double beta_start, double beta_end) {
  if (horizon < 1 || !(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw Error(ErrorCode::kInvalidRange, "need T >= 1 and 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> ab(static_cast<std::size_t>(horizon) + 1);
  ab[0] = 1.0;
  for (int t = 1; t <= horizon; ++t) {
    const double beta =
        horizon == 1 ? beta_start
                     : beta_start + (beta_end - beta_start) * (t - 1) / static_cast<double>(horizon - 1);
    ab[t] = ab[t - 1] * (1.0 - beta);
  }
  return NoiseSchedule(std::move(ab));
}

NoiseSchedule default_schedule() { return make_schedule(1000, 1e-4, 0.02); }

Image add_noise(const Image& x0, int t, const Image& eps, const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "add_noise");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Image out(x0.channels(), x0.height(), x0.width());
  auto o = out.data();
  auto xs = x0.data();
  auto es = eps.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a * xs[i] + b * es[i];
  return out;
}

Image predict_x0(const Image& x_t, const Image& eps, int t, const NoiseSchedule& sched) {
  require_same_shape(x_t, eps, "predict_x0");
  const double ab = sched.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Image out(x_t.channels(), x_t.height(), x_t.width());
  auto o = out.data();
  auto xs = x_t.data();
  auto es = eps.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (xs[i] - b * es[i]) * inv;
  return out;
}

double ddim_sigma(int t, int t_prev, double eta, const NoiseSchedule& sched) {
  if (eta == 0.0) return 0.0;
  const double ab = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
}

Image ddim_step(const Image& x_t, const Image& eps, int t, int t_prev, const SamplerConfig& cfg,
                const NoiseSchedule& sched, const Image* noise) {
  if (!(t_prev < t)) {
    throw Error(ErrorCode::kInvalidRange, "ddim_step needs t_prev < t");
  }
  if (cfg.eta < 0.0) throw Error(ErrorCode::kInvalidRange, "eta must be >= 0");
  if ((cfg.eta > 0.0) != (noise != nullptr)) {
    throw Error(ErrorCode::kInvalidRange, "noise must be supplied iff eta > 0");
  }
  require_same_shape(x_t, eps, "ddim_step");
  if (noise != nullptr) require_same_shape(x_t, *noise, "ddim_step noise");

  const double ab_prev = sched.alpha_bar(t_prev);
  const double sigma = ddim_sigma(t, t_prev, cfg.eta, sched);
  const double radicand = 1.0 - ab_prev - sigma * sigma;
  if (radicand < -1e-15) {
    throw Error(ErrorCode::kNegativeRadicand,
                "sigma^2 exceeds 1 - alpha_bar_prev at t=" + std::to_string(t));
  }
  const double dir = std::sqrt(std::max(radicand, 0.0));
  const double a_prev = std::sqrt(ab_prev);
  Image x0 = predict_x0(x_t, eps, t, sched);
  Image out(x_t.channels(), x_t.height(), x_t.width());
  auto o = out.data();
  auto p = x0.data();
  auto e = eps.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a_prev * p[i] + dir * e[i];
  if (noise != nullptr) {
    auto n = noise->data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += sigma * n[i];
  }
  return out;
}

std::vector<int> ddim_timesteps(int horizon, int num_steps) {
  if (num_steps < 1 || num_steps > horizon) {
    throw Error(ErrorCode::kInvalidRange, "num_steps must lie in [1, T]");
  }
  std::vector<int> ts(static_cast<std::size_t>(num_steps));
  if (num_steps == 1) {
    ts[0] = horizon;
    return ts;
  }
  for (int k = 0; k < num_steps; ++k) {
    const double frac = static_cast<double>(num_steps - 1 - k) / (num_steps - 1);
    ts[k] = 1 + static_cast<int>(std::lround(frac * (horizon - 1)));
  }
  return ts;
}

Image gaussian_image(int channels, int height, int width, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Image out(channels, height, width);
  for (double& v : out.data()) v = normal(rng);
  return out;
}

}  // namespace finecontrol::diffusion
