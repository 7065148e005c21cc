#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "finecontrol/benchio.hpp"
#include "finecontrol/composer.hpp"
#include "finecontrol/error.hpp"
#include "finecontrol/figure.hpp"
#include "finecontrol/metrics.hpp"
#include "finecontrol/pose_geometry.hpp"
#include "finecontrol/prompting.hpp"
#include "finecontrol/service.hpp"
#include "finecontrol/tiny_denoiser.hpp"

namespace py = pybind11;
namespace fc = finecontrol;
using nlohmann::json;

namespace {

// C x H x W tensor -> H x W x C array (H x W when single-channel).
py::array_t<double> to_array(const fc::Tensor& t) {
  const int c = t.channels(), h = t.height(), w = t.width();
  std::vector<py::ssize_t> shape = c == 1 ? std::vector<py::ssize_t>{h, w} : std::vector<py::ssize_t>{h, w, c};
  py::array_t<double> out(shape);
  double* dst = out.mutable_data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) *dst++ = t.at(k, y, x);
  return out;
}

fc::pose::Pose2D pose_from_py(const std::string& text) { return fc::pose::pose_from_json(json::parse(text)); }

fc::compose::DenoiserFactory factory_for(const std::string& model) {
  if (model.empty()) return fc::compose::delta_factory(fc::denoise::default_palette(), fc::diffusion::default_schedule());
  auto params = std::make_shared<const fc::denoise::TinyParams>(fc::denoise::TinyParams::load(model));
  return fc::compose::shared_factory(
      std::make_shared<fc::denoise::TinyDenoiser>(std::move(params), fc::diffusion::default_schedule()));
}

py::tuple generate(const std::string& scene_json, const std::string& model) {
  const auto scene = fc::prompt::scene_from_json(json::parse(scene_json));
  fc::compose::GenerationResult g;
  {
    py::gil_scoped_release release;
    g = fc::compose::generate(scene, factory_for(model));
  }
  py::list masks;
  for (const auto& m : g.masks.soft.base()) masks.append(to_array(m));
  return py::make_tuple(to_array(g.image), g.trace.to_json().dump(), masks);
}

py::array_t<double> attention_masks(const std::vector<std::string>& poses, int height, int width, double tau,
                                    const std::string& mode) {
  std::vector<fc::pose::OccupancyMap> occs;
  for (const auto& p : poses) occs.push_back(fc::pose::instance_occupancy(pose_from_py(p), height, width));
  const auto set = fc::pose::normalize_masks(
      occs, tau, mode == "HARD" ? fc::pose::MaskMode::kHard : fc::pose::MaskMode::kSoft);
  py::array_t<double> out({static_cast<py::ssize_t>(occs.size()), static_cast<py::ssize_t>(height),
                           static_cast<py::ssize_t>(width)});
  double* dst = out.mutable_data();
  for (const auto& m : set.base()) dst = std::copy(m.data().begin(), m.data().end(), dst);
  return out;
}

std::string preview(const std::string& request) {
  try {
    return fc::service::preview_masks(json::parse(request)).dump();
  } catch (const fc::service::ApiError& e) {
    throw fc::Error(fc::ErrorCode::kSchemaInvalid, e.path + ": " + e.message);
  }
}

std::optional<std::pair<std::string, std::string>> validate_scene(const std::string& text) {
  const auto issue = fc::prompt::validate_scene_json(json::parse(text));
  if (!issue) return std::nullopt;
  return std::make_pair(issue->path, issue->message);
}

std::vector<double> train_toy(int epochs, std::uint64_t seed, int examples, const std::string& out) {
  py::gil_scoped_release release;
  const auto data = fc::bench::make_training_set(examples, seed, fc::denoise::default_palette(),
                                                 fc::bench::default_manifest().setting_pool);
  fc::denoise::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  const auto result = fc::denoise::train_tiny_denoiser(data, fc::diffusion::default_schedule(), cfg);
  result.params.save(out);
  return result.epoch_losses;
}

}  // namespace

PYBIND11_MODULE(_finecontrol, m) {
  m.doc() = "Per-instance text conditioning for pose-guided diffusion sampling.";

  static py::exception<fc::Error> error(m, "FineControlError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const fc::Error& e) {
      py::set_error(error, e.what());
    }
  });

  m.def("hard_step_count", &fc::compose::hard_step_count, py::arg("hard_fraction"), py::arg("num_steps"));
  m.def("attention_masks", &attention_masks, py::arg("poses"), py::arg("height"), py::arg("width"),
        py::arg("tau") = 0.001, py::arg("mode") = "SOFT",
        "N x H x W masks for pose JSON strings; sums to one at every pixel.");
  m.def("preview_masks", &preview, py::arg("request"));
  m.def("validate_scene", &validate_scene, py::arg("scene"),
        "None when valid, else (json_pointer, message).");
  m.def("generate", &generate, py::arg("scene"), py::arg("model") = "",
        "Returns (image H x W x 3, trace JSON, soft masks).");
  m.def("train_toy", &train_toy, py::arg("epochs"), py::arg("seed"), py::arg("examples"), py::arg("out"),
        "Trains the tiny denoiser and writes a checkpoint; returns per-epoch losses.");
  m.def("cio_sigma", [](const std::vector<double>& s, std::size_t i) { return fc::metrics::cio_sigma_from_scores(s, i); },
        py::arg("scores"), py::arg("true_index"));
  m.def("cio_diff", [](const std::vector<double>& s, std::size_t i) { return fc::metrics::cio_diff_from_scores(s, i); },
        py::arg("scores"), py::arg("true_index"));
  m.def("oks", [](const std::string& gt, const std::string& det, double area) {
          return fc::metrics::oks(pose_from_py(gt), pose_from_py(det), area);
        },
        py::arg("gt"), py::arg("det"), py::arg("area"));
  m.def("standing_figure", [](double cx, double top, double height) {
          return fc::pose::pose_to_json(fc::pose::standing_figure(cx, top, height)).dump();
        },
        py::arg("center_x"), py::arg("top"), py::arg("height"));
}
