#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace finecontrol {

struct Shape2 {
  int height = 0;
  int width = 0;

  friend bool operator==(const Shape2&, const Shape2&) = default;
  friend auto operator<=>(const Shape2&, const Shape2&) = default;
};

/// Dense channel-major field (C x H x W) of doubles. Images use C = 3 with
/// values nominally in [-1, 1]; masks and control fields use C = 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0);

  int channels() const noexcept { return channels_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  Shape2 shape2() const noexcept { return {height_, width_}; }
  std::size_t plane_size() const noexcept {
    return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  double at(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }

  std::span<double> plane(int c) noexcept { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const double> plane(int c) const noexcept {
    return {data_.data() + c * plane_size(), plane_size()};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  bool same_shape(const Tensor& other) const noexcept {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }

  void fill(double value);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

using Image = Tensor;

std::string shape_string(const Tensor& t);

/// Throws SHAPE_MISMATCH naming `what` when the shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

double max_abs_diff(const Tensor& a, const Tensor& b);

/// 2x2 average pooling; height and width must be even.
Tensor avg_pool2(const Tensor& in);
/// Nearest-neighbour 2x upsampling.
Tensor upsample2(const Tensor& in);
/// Area-average pooling by an integer factor in each dimension.
Tensor area_pool(const Tensor& in, int factor_y, int factor_x);

}  // namespace finecontrol
