#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "finecontrol/tensor.hpp"

namespace finecontrol::png {

/// 8-bit PNG encoding. `channels` is 1 (gray) or 3 (RGB); pixels interleaved.
std::vector<std::uint8_t> encode(std::span<const std::uint8_t> pixels, int width, int height,
                                 int channels);

struct Decoded {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

Decoded decode(std::span<const std::uint8_t> bytes);

/// Maps [-1, 1] to [0, 255] with clamping.
std::vector<std::uint8_t> encode_image(const Image& image);
/// Inverse of encode_image up to quantization.
Image decode_image(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

bool has_png_signature(std::span<const std::uint8_t> bytes);

}  // namespace finecontrol::png
