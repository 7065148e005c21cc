#include "finecontrol/denoiser.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "finecontrol/error.hpp"

namespace finecontrol::denoise {
namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

}  // namespace

TextEmbedding embed_token(const std::string& text) {
  TextEmbedding e;
  e.source_text = text;
  e.vector.resize(kTextWidth);
  std::uint64_t state = fnv1a(text);
  for (int i = 0; i < kTextWidth; i += 2) {
    const double u1 = unit_open(splitmix64(state));
    const double u2 = unit_open(splitmix64(state));
    const double r = std::sqrt(-2.0 * std::log(u1));
    e.vector[i] = r * std::cos(2.0 * std::numbers::pi * u2);
    e.vector[i + 1] = r * std::sin(2.0 * std::numbers::pi * u2);
  }
  return e;
}

ControlEmbedding pose_control(const pose::Pose2D& pose, int height, int width) {
  pose::OccupancyMap occ = pose::rasterize_skeleton(pose, height, width, kStrokeWidth);
  ControlEmbedding ctrl{Tensor(1, height, width), Modality::kPose};
  auto plane = ctrl.field.plane(0);
  for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = occ.cells[i];
  return ctrl;
}

ControlEmbedding union_control(std::span<const ControlEmbedding> controls) {
  if (controls.empty()) throw Error(ErrorCode::kEmptyScene, "union of zero control fields");
  ControlEmbedding out = controls.front();
  for (const auto& c : controls.subspan(1)) {
    require_same_shape(out.field, c.field, "union_control");
    auto o = out.field.data();
    auto s = c.field.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(o[i], s[i]);
  }
  return out;
}

SiteHooks identity_hooks(std::size_t sites, std::size_t control_sites) {
  SiteHooks hooks;
  hooks.after_cross_attention.resize(sites);
  hooks.before_control_injection.resize(control_sites);
  return hooks;
}

Image Denoiser::epsilon(const Image& x_t, int t, const BranchCondition& cond) const {
  return epsilon(x_t, t, cond, identity_hooks(sites(x_t.shape2()).size()));
}

void Denoiser::check_hooks(const SiteHooks& hooks, Shape2 canvas) const {
  const std::size_t expected = sites(canvas).size();
  if (hooks.after_cross_attention.size() != expected) {
    throw Error(ErrorCode::kHookArity, "expected " + std::to_string(expected) + " site hooks, got " +
                                           std::to_string(hooks.after_cross_attention.size()));
  }
  if (!hooks.before_control_injection.empty() &&
      hooks.before_control_injection.size() != control_site_count()) {
    throw Error(ErrorCode::kHookArity,
                "expected " + std::to_string(control_site_count()) + " control hooks, got " +
                    std::to_string(hooks.before_control_injection.size()));
  }
}

DeltaDenoiser::DeltaDenoiser(Image target, diffusion::NoiseSchedule schedule)
    : target_(std::move(target)), schedule_(std::move(schedule)) {}

std::vector<CompositionSite> DeltaDenoiser::sites(Shape2 canvas) const {
  return {{"output", canvas, target_.channels()}};
}

Image DeltaDenoiser::epsilon(const Image& x_t, int t, const BranchCondition&,
                             const SiteHooks& hooks) const {
  require_same_shape(x_t, target_, "delta denoiser");
  check_hooks(hooks, x_t.shape2());
  const double ab = schedule_.alpha_bar(t);
  if (!(1.0 - ab > 0.0)) throw Error(ErrorCode::kTEdge, "1 - alpha_bar is zero at t=" + std::to_string(t));
  const double a = std::sqrt(ab);
  const double inv = 1.0 / std::sqrt(1.0 - ab);
  Image eps(x_t.channels(), x_t.height(), x_t.width());
  auto e = eps.data();
  auto x = x_t.data();
  auto g = target_.data();
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = (x[i] - a * g[i]) * inv;
  if (hooks.after_cross_attention[0]) hooks.after_cross_attention[0](eps);
  return eps;
}

Palette::Palette(std::vector<PaletteEntry> entries) : entries_(std::move(entries)) {}

const std::array<double, 3>& Palette::color(const std::string& token) const {
  for (const auto& e : entries_) {
    if (e.token == token) return e.color;
  }
  throw Error(ErrorCode::kUnknownToken, "identity '" + token + "' is not in the palette");
}

bool Palette::contains(const std::string& token) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const PaletteEntry& e) { return e.token == token; });
}

std::vector<std::string> Palette::tokens() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.token);
  return out;
}

const std::string& Palette::resolve(const std::string& text) const {
  for (const auto& e : entries_) {
    if (e.token == text) return e.token;
  }
  std::string lowered = text;
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (const auto& e : entries_) {
    for (std::size_t pos = lowered.find(e.token); pos != std::string::npos;
         pos = lowered.find(e.token, pos + 1)) {
      const std::size_t end = pos + e.token.size();
      if ((pos == 0 || !is_word(lowered[pos - 1])) && (end == lowered.size() || !is_word(lowered[end]))) {
        return e.token;
      }
    }
  }
  throw Error(ErrorCode::kUnknownToken, "no palette colour named in '" + text + "'");
}

const Palette& default_palette() {
  static const Palette palette({
      {"red", {0.9, 0.0, 0.0}},
      {"green", {0.0, 0.9, 0.0}},
      {"blue", {0.0, 0.0, 0.9}},
      {"cyan", {-0.9, 0.0, 0.0}},
      {"magenta", {0.0, -0.9, 0.0}},
      {"yellow", {0.0, 0.0, -0.9}},
      {"white", {0.52, 0.52, 0.52}},
      {"black", {-0.52, -0.52, -0.52}},
  });
  return palette;
}

Image render_instance(const std::string& identity_token, const pose::Pose2D& pose,
                      const Palette& palette, int height, int width) {
  RenderItem item{identity_token, pose};
  return render_scene(std::span<const RenderItem>(&item, 1), palette, height, width);
}

Image render_scene(std::span<const RenderItem> items, const Palette& palette, int height,
                   int width) {
  Image image(3, height, width);
  for (const auto& item : items) {
    const auto& color = palette.color(item.identity);
    pose::OccupancyMap occ = pose::rasterize_skeleton(item.pose, height, width, kStrokeWidth);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        if (!occ.at(y, x)) continue;
        for (int c = 0; c < 3; ++c) image.at(c, y, x) = color[c];
      }
    }
  }
  return image;
}

}  // namespace finecontrol::denoise
