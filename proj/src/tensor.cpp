#include "finecontrol/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "finecontrol/error.hpp"

namespace finecontrol {

Tensor::Tensor(int channels, int height, int width, double fill)
    : channels_(channels),
      height_(height),
      width_(width),
      data_(static_cast<std::size_t>(channels) * height * width, fill) {}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::string shape_string(const Tensor& t) {
  return std::to_string(t.channels()) + "x" + std::to_string(t.height()) + "x" +
         std::to_string(t.width());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + ": " + shape_string(a) + " vs " + shape_string(b));
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) m = std::max(m, std::abs(da[i] - db[i]));
  return m;
}

Tensor avg_pool2(const Tensor& in) { return area_pool(in, 2, 2); }

Tensor upsample2(const Tensor& in) {
  Tensor out(in.channels(), in.height() * 2, in.width() * 2);
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < out.height(); ++y) {
      for (int x = 0; x < out.width(); ++x) out.at(c, y, x) = in.at(c, y / 2, x / 2);
    }
  }
  return out;
}

Tensor area_pool(const Tensor& in, int factor_y, int factor_x) {
  if (factor_y < 1 || factor_x < 1 || in.height() % factor_y != 0 || in.width() % factor_x != 0) {
    throw Error(ErrorCode::kNonDivisibleShape,
                "cannot pool " + shape_string(in) + " by " + std::to_string(factor_y) + "x" +
                    std::to_string(factor_x));
  }
  const int oh = in.height() / factor_y;
  const int ow = in.width() / factor_x;
  const double inv = 1.0 / (factor_y * factor_x);
  Tensor out(in.channels(), oh, ow);
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < in.height(); ++y) {
      for (int x = 0; x < in.width(); ++x) out.at(c, y / factor_y, x / factor_x) += in.at(c, y, x);
    }
    for (double& v : out.plane(c)) v *= inv;
  }
  return out;
}

}  // namespace finecontrol
