#include <cmath>
#include <random>

#include "doctest.h"
#include "finecontrol/diffusion.hpp"
#include "finecontrol/error.hpp"

using namespace finecontrol;
using namespace finecontrol::diffusion;

namespace {

Image constant(double v, int c = 1, int h = 2, int w = 2) { return Image(c, h, w, v); }

// Table with ab[1] = 0.64 and ab[2] = 0.25.
NoiseSchedule two_step() { return NoiseSchedule({1.0, 0.64, 0.25}); }

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kIo;
}

}  // namespace

TEST_CASE("single-step schedule") {
  const NoiseSchedule s = make_schedule(1, 0.1, 0.1);
  CHECK(s.horizon() == 1);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("default schedule matches an extended-precision cumulative product") {
  const NoiseSchedule s = default_schedule();
  CHECK(s.horizon() == 1000);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-12));
  CHECK(s.alpha_bar(500) == doctest::Approx(0.07858724288177823734).epsilon(1e-10));
  CHECK(s.alpha_bar(1000) == doctest::Approx(4.035829765375683315e-05).epsilon(1e-9));
  for (int t = 1; t <= 1000; ++t) REQUIRE(s.alpha_bar(t) < s.alpha_bar(t - 1));
}

TEST_CASE("make_schedule rejects invalid ranges") {
  CHECK(code_of([] { make_schedule(10, 0.02, 1e-4); }) == ErrorCode::kInvalidRange);
  CHECK(code_of([] { make_schedule(0, 1e-4, 0.02); }) == ErrorCode::kInvalidRange);
  CHECK(code_of([] { make_schedule(10, 0.0, 0.02); }) == ErrorCode::kInvalidRange);
  CHECK(code_of([] { make_schedule(10, 1e-4, 1.0); }) == ErrorCode::kInvalidRange);
}

TEST_CASE("add_noise") {
  const NoiseSchedule s = two_step();
  CHECK(add_noise(constant(0.7), 0, constant(3.0), s) == constant(0.7));
  const Image pure = add_noise(constant(0.0), 2, constant(2.0), s);
  CHECK(pure.at(0, 0, 0) == doctest::Approx(std::sqrt(0.75) * 2.0));
  CHECK(add_noise(constant(2.0), 2, constant(1.0), s).at(0, 1, 1) == doctest::Approx(1.8660254).epsilon(1e-7));
  CHECK(code_of([&] { add_noise(constant(0.0), 1, constant(0.0, 1, 2, 3), s); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("predict_x0") {
  const NoiseSchedule s = default_schedule();
  std::mt19937_64 rng(1);
  const Image x0 = gaussian_image(3, 8, 8, rng);
  const Image eps = gaussian_image(3, 8, 8, rng);
  for (int t : {1, 10, 500, 1000}) {
    CHECK(max_abs_diff(predict_x0(add_noise(x0, t, eps, s), eps, t, s), x0) < 1e-6);
  }
  const Image x = constant(0.3);
  CHECK(predict_x0(x, constant(0.0), 500, s).at(0, 0, 0) == doctest::Approx(0.3 / std::sqrt(s.alpha_bar(500))));
  CHECK(predict_x0(constant(1.0), constant(0.5), 2, two_step()).at(0, 0, 0) ==
        doctest::Approx(1.1339746).epsilon(1e-7));
}

TEST_CASE("ddim_step fixtures") {
  const NoiseSchedule s = two_step();
  SamplerConfig cfg;
  const Image scaled = ddim_step(constant(1.0), constant(0.0), 2, 1, cfg, s);
  CHECK(scaled.at(0, 0, 0) == doctest::Approx(std::sqrt(0.64 / 0.25)));
  const Image x = ddim_step(constant(1.0), constant(0.5), 2, 1, cfg, s);
  CHECK(x.at(0, 0, 0) == doctest::Approx(1.2071797).epsilon(1e-7));
  CHECK(x.at(0, 0, 0) == doctest::Approx(0.8 * 1.1339746 + 0.6 * 0.5).epsilon(1e-6));
}

TEST_CASE("ddim sigma vanishes at eta zero and requires noise otherwise") {
  const NoiseSchedule s = default_schedule();
  for (int t : {2, 100, 1000}) CHECK(ddim_sigma(t, t - 1, 0.0, s) == 0.0);
  SamplerConfig cfg;
  cfg.eta = 1.0;
  const Image noise = constant(0.0);
  CHECK_NOTHROW(ddim_step(constant(1.0), constant(0.2), 1000, 950, cfg, s, &noise));
  CHECK_THROWS(ddim_step(constant(1.0), constant(0.2), 1000, 950, cfg, s));
}

TEST_CASE("ddim_step reports a negative radicand") {
  const NoiseSchedule s = two_step();
  SamplerConfig cfg;
  cfg.eta = 5.0;
  const Image noise = constant(0.0);
  CHECK(code_of([&] { ddim_step(constant(1.0), constant(0.5), 2, 1, cfg, s, &noise); }) ==
        ErrorCode::kNegativeRadicand);
}

TEST_CASE("timesteps are evenly spaced and endpoint inclusive") {
  CHECK(ddim_timesteps(1000, 1) == std::vector<int>{1000});
  const auto ts = ddim_timesteps(1000, 20);
  REQUIRE(ts.size() == 20);
  CHECK(ts.front() == 1000);
  CHECK(ts.back() == 1);
  for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  CHECK(ddim_timesteps(4, 4) == std::vector<int>{4, 3, 2, 1});
}

TEST_CASE("exact noise predictions telescope to the clean image") {
  const NoiseSchedule s = default_schedule();
  std::mt19937_64 rng(42);
  const Image x0 = gaussian_image(3, 6, 6, rng);
  for (int steps : {1, 4, 20, 50}) {
    Image x = gaussian_image(3, 6, 6, rng);
    const auto ts = ddim_timesteps(s.horizon(), steps);
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const int t = ts[k];
      const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
      Image eps(3, 6, 6);
      const double ab = s.alpha_bar(t);
      for (std::size_t i = 0; i < eps.size(); ++i) {
        eps.data()[i] = (x.data()[i] - std::sqrt(ab) * x0.data()[i]) / std::sqrt(1 - ab);
      }
      const Image next = ddim_step(x, eps, t, t_prev, SamplerConfig{}, s);
      // Distance to the scaled clean image shrinks with every exact step.
      Image target_prev = x0;
      for (double& v : target_prev.data()) v *= std::sqrt(s.alpha_bar(t_prev));
      Image target_now = x0;
      for (double& v : target_now.data()) v *= std::sqrt(ab);
      CHECK(max_abs_diff(next, target_prev) <= max_abs_diff(x, target_now) + 1e-12);
      x = next;
    }
    CHECK(max_abs_diff(x, x0) < 1e-4);
  }
}

TEST_CASE("gaussian_image is deterministic per seed") {
  std::mt19937_64 a(99), b(99);
  CHECK(gaussian_image(3, 4, 4, a) == gaussian_image(3, 4, 4, b));
}
