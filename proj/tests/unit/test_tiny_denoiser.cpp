#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "finecontrol/error.hpp"
#include "finecontrol/tiny_denoiser.hpp"
#include "support/fixtures.hpp"

using namespace finecontrol;
using namespace finecontrol::denoise;

namespace {

constexpr int kSide = 16;

std::shared_ptr<TinyParams> random_params(std::uint64_t seed, bool live_head = true) {
  auto p = std::make_shared<TinyParams>();
  p->randomize(seed);
  if (live_head) {
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> n(0.0, 0.5);
    for (auto name : {"head.skip", "head.scale", "out.conv.b"}) {
      for (double& v : p->slice(name)) v = n(rng);
    }
    for (auto name : {"enc0.conv.b", "dec1.ctrl.b", "dec0.time", "enc2.attn.bq"}) {
      for (double& v : p->slice(name)) v = 0.3 * n(rng);
    }
  }
  return p;
}

BranchCondition condition(int side = kSide) {
  pose::Pose2D p = fixtures::two_point_coco(side / 2.0, 2, side / 2.0, side - 3.0);
  p.keypoints[9] = {side - 3.0, side - 3.0, 1};
  return condition_from_clauses({"red", "in a park"}, pose_control(p, side, side));
}

Image noise(std::uint64_t seed, int side = kSide) {
  std::mt19937_64 rng(seed);
  return diffusion::gaussian_image(3, side, side, rng);
}

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

TEST_CASE("zero head gives zero prediction and noise-energy loss") {
  auto params = std::make_shared<TinyParams>();
  params->randomize(1);
  const TinyDenoiser net(params, diffusion::default_schedule());
  const Image x = noise(2);
  const Image eps = net.epsilon(x, 400, condition());
  for (double v : eps.data()) CHECK(v == 0.0);

  std::vector<double> grad(params->size());
  double total = 0.0;
  const int trials = 20;
  for (int i = 0; i < trials; ++i) {
    const Image e = noise(100 + i);
    total += net.loss_and_gradient(x, 400, condition(), e, grad);
  }
  const double chw = 3.0 * kSide * kSide;
  CHECK(total / trials == doctest::Approx(chw).epsilon(0.1));
}

TEST_CASE("parameter count stays small") {
  const TinyParams p;
  CHECK(p.size() > 5000);
  CHECK(p.size() < 40000);
}

TEST_CASE("analytic gradient matches central differences") {
  auto params = random_params(3);
  const auto sched = diffusion::default_schedule();
  const BranchCondition cond = condition();
  const Image x = noise(4);
  const Image eps = noise(5);
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> pick(0, params->size() - 1);
  for (int t : {17, 420, 960}) {
    std::vector<double> grad(params->size(), 0.0);
    TinyDenoiser(params, sched).loss_and_gradient(x, t, cond, eps, grad);
    int checked = 0;
    for (int attempt = 0; attempt < 400 && checked < 12; ++attempt) {
      const std::size_t i = pick(rng);
      if (std::abs(grad[i]) < 1e-3) continue;
      const double h = 1e-4;
      const double saved = params->values()[i];
      std::vector<double> scratch(params->size());
      params->values()[i] = saved + h;
      const double up = TinyDenoiser(params, sched).loss_and_gradient(x, t, cond, eps, scratch);
      params->values()[i] = saved - h;
      const double down = TinyDenoiser(params, sched).loss_and_gradient(x, t, cond, eps, scratch);
      params->values()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(numeric - grad[i]) / std::max(std::abs(numeric), std::abs(grad[i]));
      CHECK_MESSAGE(rel < 1e-4, "param ", i, " analytic ", grad[i], " numeric ", numeric);
      ++checked;
    }
    CHECK(checked >= 10);
  }
}

TEST_CASE("identity hooks are deterministic and transparent") {
  const TinyDenoiser net(random_params(7), diffusion::default_schedule());
  const Image x = noise(8);
  const Image a = net.epsilon(x, 250, condition());
  const Image b = net.epsilon(x, 250, condition());
  CHECK(a == b);
  SiteHooks hooks = identity_hooks(6, 3);
  CHECK(net.epsilon(x, 250, condition(), hooks) == a);
  int calls = 0;
  for (auto& h : hooks.after_cross_attention) h = [&](Tensor&) { ++calls; };
  CHECK(net.epsilon(x, 250, condition(), hooks) == a);
  CHECK(calls == 6);
}

TEST_CASE("control path is live") {
  const TinyDenoiser net(random_params(9), diffusion::default_schedule());
  BranchCondition off = condition();
  off.control.field.fill(0.0);
  const Image x = noise(10);
  CHECK(max_abs_diff(net.epsilon(x, 300, condition()), net.epsilon(x, 300, off)) > 1e-6);
}

TEST_CASE("zeroing every latent leaves only the bias path") {
  auto params = random_params(11);
  const auto sched = diffusion::default_schedule();
  const TinyDenoiser net(params, sched);
  SiteHooks hooks = identity_hooks(6);
  for (auto& h : hooks.after_cross_attention) h = [](Tensor& t) { t.fill(0.0); };
  const Image x = noise(12);
  const int t = 640;
  const Image eps = net.epsilon(x, t, condition(), hooks);

  // Stripped network: the head sees a zero latent, so u is the output bias.
  const double ab = sched.alpha_bar(t);
  const double phi[4] = {1 / std::sqrt(1 - ab), std::sqrt(ab) / std::sqrt(1 - ab), 1.0, std::sqrt(ab)};
  double a = 0, b = 0;
  for (int f = 0; f < 4; ++f) {
    a += params->slice("head.skip")[f] * phi[f];
    b += params->slice("head.scale")[f] * phi[f];
  }
  const auto bias = params->slice("out.conv.b");
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < kSide; ++y) {
      for (int xx = 0; xx < kSide; ++xx) {
        CHECK(eps.at(c, y, xx) == doctest::Approx(a * x.at(c, y, xx) + b * bias[c]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("hook arity is enforced") {
  const TinyDenoiser net(random_params(13), diffusion::default_schedule());
  CHECK(net.sites({kSide, kSide}).size() == 6);
  CHECK(code_of([&] { net.epsilon(noise(1), 10, condition(), identity_hooks(5)); }) == ErrorCode::kHookArity);
  CHECK(code_of([&] { net.epsilon(noise(1), 10, condition(), identity_hooks(6, 2)); }) == ErrorCode::kHookArity);
}

TEST_CASE("control hooks see the per-level control embedding") {
  const TinyDenoiser net(random_params(14), diffusion::default_schedule());
  SiteHooks hooks = identity_hooks(6, 3);
  std::vector<Shape2> seen;
  for (auto& h : hooks.before_control_injection) h = [&](Tensor& c) { seen.push_back(c.shape2()); };
  net.epsilon(noise(2), 50, condition(), hooks);
  CHECK(seen == std::vector<Shape2>{{4, 4}, {8, 8}, {16, 16}});
}

TEST_CASE("checkpoint round trip") {
  auto params = random_params(15);
  const auto path = std::filesystem::temp_directory_path() / "finecontrol_tiny_roundtrip.bin";
  params->save(path);
  const TinyParams loaded = TinyParams::load(path);
  std::filesystem::remove(path);
  CHECK(loaded.config() == params->config());
  CHECK(std::equal(loaded.values().begin(), loaded.values().end(), params->values().begin()));

  auto bytes = params->serialize();
  bytes[0] = 'X';
  CHECK(code_of([&] { TinyParams::deserialize(bytes); }) == ErrorCode::kIo);
  auto truncated = params->serialize();
  truncated.resize(truncated.size() / 2);
  CHECK(code_of([&] { TinyParams::deserialize(truncated); }) == ErrorCode::kIo);
}

TEST_CASE("training lowers the loss and is reproducible") {
  const auto sched = diffusion::default_schedule();
  std::vector<TrainingExample> data;
  for (const char* token : {"red", "green", "blue", "cyan"}) {
    pose::Pose2D p = fixtures::two_point_coco(8, 2, 8, 13);
    p.keypoints[9] = {13, 13, 1};
    data.push_back({render_instance(token, p, default_palette(), kSide, kSide), {token, "indoors"},
                    pose_control(p, kSide, kSide)});
  }
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-2;
  cfg.seed = 21;
  const TrainResult a = train_tiny_denoiser(data, sched, cfg);
  const TrainResult b = train_tiny_denoiser(data, sched, cfg);
  REQUIRE(a.epoch_losses.size() == 30);
  CHECK(a.epoch_losses == b.epoch_losses);
  const double first = a.epoch_losses.front();
  double tail = 0.0;
  for (int i = 25; i < 30; ++i) tail += a.epoch_losses[i] / 5.0;
  CHECK(tail <= 0.5 * first);
  CHECK(code_of([&] { train_tiny_denoiser(std::span<const TrainingExample>{}, sched, cfg); }) ==
        ErrorCode::kEmptyScene);
}
