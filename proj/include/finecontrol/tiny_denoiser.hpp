#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "finecontrol/denoiser.hpp"
#include "finecontrol/diffusion.hpp"

namespace finecontrol::denoise {

/// Channel widths of the three resolution levels (full, 1/2, 1/4).
struct TinyConfig {
  int c0 = 12;
  int c1 = 16;
  int c2 = 24;
  int key_dim = 8;

  friend bool operator==(const TinyConfig&, const TinyConfig&) = default;
};

struct ParamSlice {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Flat parameter vector with a named tensor table (row-major slices).
class TinyParams {
 public:
  explicit TinyParams(TinyConfig config = {});

  const TinyConfig& config() const noexcept { return config_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<ParamSlice>& slices() const noexcept { return slices_; }
  const ParamSlice& slice_info(std::string_view name) const;
  std::span<double> slice(std::string_view name);
  std::span<const double> slice(std::string_view name) const;

  /// He-normal convolutions, scaled attention projections, zero biases and
  /// a zero output head (so the initial prediction is identically zero).
  void randomize(std::uint64_t seed);

  std::vector<std::uint8_t> serialize() const;
  static TinyParams deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static TinyParams load(const std::filesystem::path& path);

 private:
  void add(std::string name, std::vector<int> shape);

  TinyConfig config_;
  std::vector<double> values_;
  std::vector<ParamSlice> slices_;
};

/// Three-level conv / cross-attention UNet. Sites (in call order):
/// enc0, enc1, enc2, dec2, dec1, dec0, each after a cross-attention block.
/// Decoder levels add a convolved control field before their cross-attention.
/// The output head is eps = a(t) * x_t + b(t) * u, where u is the final
/// convolution and a, b are learned combinations of schedule features.
class TinyDenoiser final : public Denoiser {
 public:
  TinyDenoiser(std::shared_ptr<const TinyParams> params, diffusion::NoiseSchedule schedule);

  std::vector<CompositionSite> sites(Shape2 canvas) const override;
  std::size_t control_site_count() const override { return 3; }
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }

  using Denoiser::epsilon;
  Image epsilon(const Image& x_t, int t, const BranchCondition& cond,
                const SiteHooks& hooks) const override;

  /// Squared error ||eps_true - eps_theta||^2; accumulates d loss / d params
  /// into `grad` (same layout as TinyParams::values()).
  double loss_and_gradient(const Image& x_t, int t, const BranchCondition& cond,
                           const Image& eps_true, std::span<double> grad) const;

  const TinyParams& params() const noexcept { return *params_; }

 private:
  std::shared_ptr<const TinyParams> params_;
  diffusion::NoiseSchedule schedule_;
};

/// Dataset triple: composite image, clause texts (identities then setting),
/// and the union control field.
struct TrainingExample {
  Image image;
  std::vector<std::string> clauses;
  ControlEmbedding control;
};

BranchCondition condition_from_clauses(const std::vector<std::string>& clauses,
                                       ControlEmbedding control);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 8;
  double learning_rate = 2e-3;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
  TinyConfig net;
};

struct TrainResult {
  TinyParams params;
  std::vector<double> epoch_losses;  // mean per-sample squared error
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Adam on the eps-prediction loss with t ~ U{1..T}; one pass over the
/// dataset per epoch. Throws DIVERGENCE on a non-finite loss.
TrainResult train_tiny_denoiser(std::span<const TrainingExample> dataset,
                                const diffusion::NoiseSchedule& sched, const TrainConfig& cfg,
                                const EpochCallback& on_epoch = {});

}  // namespace finecontrol::denoise
