#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "finecontrol/denoiser.hpp"
#include "finecontrol/error.hpp"
#include "support/fixtures.hpp"

using namespace finecontrol;
using namespace finecontrol::denoise;
using fixtures::code_of;

namespace {

BranchCondition empty_condition() { return {}; }

}  // namespace

TEST_CASE("token embeddings are deterministic and finite") {
  const TextEmbedding a = embed_token("red");
  const TextEmbedding b = embed_token("red");
  const TextEmbedding c = embed_token("green");
  CHECK(a.vector.size() == static_cast<std::size_t>(kTextWidth));
  CHECK(a.vector == b.vector);
  CHECK(a.vector != c.vector);
  CHECK(a.source_text == "red");
  for (double v : a.vector) CHECK(std::isfinite(v));
}

TEST_CASE("delta denoiser inverts add_noise") {
  const auto sched = diffusion::default_schedule();
  std::mt19937_64 rng(4);
  const Image target = diffusion::gaussian_image(3, 8, 8, rng);
  const DeltaDenoiser d(target, sched);
  for (int t : {1, 37, 500, 1000}) {
    const Image eps = diffusion::gaussian_image(3, 8, 8, rng);
    const Image x_t = diffusion::add_noise(target, t, eps, sched);
    CHECK(max_abs_diff(d.epsilon(x_t, t, empty_condition()), eps) < 1e-9);
    CHECK(max_abs_diff(diffusion::predict_x0(x_t, d.epsilon(x_t, t, empty_condition()), t, sched), target) <
          1e-6);
  }
}

TEST_CASE("delta denoiser with a zero target scales the input") {
  const auto sched = diffusion::default_schedule();
  const DeltaDenoiser d(Image(3, 4, 4), sched);
  const Image x(3, 4, 4, 0.4);
  CHECK(d.epsilon(x, 300, empty_condition()).at(2, 3, 3) ==
        doctest::Approx(0.4 / std::sqrt(1.0 - sched.alpha_bar(300))));
}

TEST_CASE("delta denoiser exposes one site and rejects t = 0") {
  const auto sched = diffusion::default_schedule();
  const DeltaDenoiser d(Image(3, 4, 4), sched);
  CHECK(d.sites({4, 4}).size() == 1);
  CHECK(code_of([&] { d.epsilon(Image(3, 4, 4), 0, empty_condition()); }) == ErrorCode::kTEdge);
  SiteHooks two = identity_hooks(2);
  CHECK(code_of([&] { d.epsilon(Image(3, 4, 4), 5, empty_condition(), two); }) == ErrorCode::kHookArity);
}

TEST_CASE("delta-driven DDIM lands on the target for any step count") {
  const auto sched = diffusion::default_schedule();
  std::mt19937_64 rng(8);
  const Image target = diffusion::gaussian_image(3, 5, 7, rng);
  const DeltaDenoiser d(target, sched);
  for (int steps : {1, 3, 20, 100}) {
    Image x = diffusion::gaussian_image(3, 5, 7, rng);
    const auto ts = diffusion::ddim_timesteps(sched.horizon(), steps);
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
      x = diffusion::ddim_step(x, d.epsilon(x, ts[k], empty_condition()), ts[k], t_prev, {}, sched);
    }
    CHECK(max_abs_diff(x, target) < 1e-4);
  }
}

TEST_CASE("render_instance paints skeleton pixels with the palette colour") {
  const auto& palette = default_palette();
  const pose::Pose2D p = fixtures::two_point_coco(10, 10, 10, 20);
  const Image red = render_instance("red", p, palette, 32, 32);
  const Image blue = render_instance("blue", p, palette, 32, 32);
  const pose::OccupancyMap occ = pose::rasterize_skeleton(p, 32, 32, kStrokeWidth);
  REQUIRE(occ.count() > 0);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      for (int c = 0; c < 3; ++c) {
        if (occ.at(y, x)) {
          CHECK(red.at(c, y, x) == palette.color("red")[c]);
        } else {
          CHECK(red.at(c, y, x) == 0.0);
          CHECK(blue.at(c, y, x) == 0.0);
        }
      }
    }
  }
}

TEST_CASE("renderer mean colour over skeleton pixels equals the palette entry") {
  const auto& palette = default_palette();
  const pose::Pose2D p = fixtures::standing_coco();
  for (const auto& token : palette.tokens()) {
    const Image img = render_instance(token, p, palette, 64, 64);
    const pose::OccupancyMap occ = pose::rasterize_skeleton(p, 64, 64, kStrokeWidth);
    for (int c = 0; c < 3; ++c) {
      double sum = 0.0;
      for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
          if (occ.at(y, x)) sum += img.at(c, y, x);
        }
      }
      CHECK(std::abs(sum / static_cast<double>(occ.count()) - palette.color(token)[c]) < 1e-6);
    }
  }
  CHECK(code_of([&] { render_instance("mauve", p, palette, 64, 64); }) == ErrorCode::kUnknownToken);
}

TEST_CASE("signed primaries are orthogonal or opposite") {
  const auto& palette = default_palette();
  const std::vector<std::string> primaries{"red", "green", "blue", "cyan", "magenta", "yellow"};
  for (const auto& a : primaries) {
    for (const auto& b : primaries) {
      const auto& ca = palette.color(a);
      const auto& cb = palette.color(b);
      const double dot = ca[0] * cb[0] + ca[1] * cb[1] + ca[2] * cb[2];
      if (a == b) {
        CHECK(dot > 0.0);
      } else {
        CHECK(dot <= 0.0);
      }
    }
  }
}

TEST_CASE("control fields mark stroke pixels and union takes the max") {
  const pose::Pose2D a = fixtures::two_point_coco(5, 5, 5, 20);
  const pose::Pose2D b = fixtures::two_point_coco(20, 5, 20, 20);
  const ControlEmbedding ca = pose_control(a, 32, 32);
  const ControlEmbedding cb = pose_control(b, 32, 32);
  const std::vector<ControlEmbedding> both{ca, cb};
  const ControlEmbedding u = union_control(both);
  CHECK(u.field.at(0, 10, 5) == 1.0);
  CHECK(u.field.at(0, 10, 20) == 1.0);
  CHECK(u.field.at(0, 10, 12) == 0.0);
  CHECK(u.modality == Modality::kPose);
}
