#include "finecontrol/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "finecontrol/error.hpp"

namespace finecontrol::png {
namespace {

void write_callback(png_structp png_ptr, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png_ptr));
  out->insert(out->end(), data, data + length);
}

void flush_callback(png_structp) {}

struct ReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void read_callback(png_structp png_ptr, png_bytep data, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png_ptr));
  if (cursor->offset + length > cursor->bytes.size()) png_error(png_ptr, "truncated PNG");
  std::memcpy(data, cursor->bytes.data() + cursor->offset, length);
  cursor->offset += length;
}

}  // namespace

std::vector<std::uint8_t> encode(std::span<const std::uint8_t> pixels, int width, int height,
                                 int channels) {
  if (channels != 1 && channels != 3) throw Error(ErrorCode::kIo, "PNG channels must be 1 or 3");
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels) {
    throw Error(ErrorCode::kIo, "PNG pixel buffer size mismatch");
  }
  png_structp png_ptr = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info_ptr = png_create_info_struct(png_ptr);
  std::vector<std::uint8_t> out;
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_write_struct(&png_ptr, &info_ptr);
    throw Error(ErrorCode::kIo, "PNG encoding failed");
  }
  png_set_write_fn(png_ptr, &out, write_callback, flush_callback);
  png_set_IHDR(png_ptr, info_ptr, width, height, 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png_ptr, info_ptr);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y) {
    png_write_row(png_ptr, const_cast<png_bytep>(pixels.data() + y * stride));
  }
  png_write_end(png_ptr, nullptr);
  png_destroy_write_struct(&png_ptr, &info_ptr);
  return out;
}

Decoded decode(std::span<const std::uint8_t> bytes) {
  if (!has_png_signature(bytes)) throw Error(ErrorCode::kIo, "not a PNG stream");
  png_structp png_ptr = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info_ptr = png_create_info_struct(png_ptr);
  ReadCursor cursor{bytes, 0};
  Decoded result;
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_read_struct(&png_ptr, &info_ptr, nullptr);
    throw Error(ErrorCode::kIo, "PNG decoding failed");
  }
  png_set_read_fn(png_ptr, &cursor, read_callback);
  png_read_info(png_ptr, info_ptr);
  png_set_strip_16(png_ptr);
  png_set_strip_alpha(png_ptr);
  png_set_packing(png_ptr);
  png_set_palette_to_rgb(png_ptr);
  png_set_expand_gray_1_2_4_to_8(png_ptr);
  png_read_update_info(png_ptr, info_ptr);
  result.width = static_cast<int>(png_get_image_width(png_ptr, info_ptr));
  result.height = static_cast<int>(png_get_image_height(png_ptr, info_ptr));
  result.channels = png_get_channels(png_ptr, info_ptr);
  const std::size_t stride = png_get_rowbytes(png_ptr, info_ptr);
  result.pixels.resize(stride * result.height);
  std::vector<png_bytep> rows(result.height);
  for (int y = 0; y < result.height; ++y) rows[y] = result.pixels.data() + y * stride;
  png_read_image(png_ptr, rows.data());
  png_read_end(png_ptr, nullptr);
  png_destroy_read_struct(&png_ptr, &info_ptr, nullptr);
  return result;
}

std::vector<std::uint8_t> encode_image(const Image& image) {
  const int w = image.width();
  const int h = image.height();
  const int c = image.channels() == 1 ? 1 : 3;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h * c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int k = 0; k < c; ++k) {
        const double v = std::clamp((image.at(k, y, x) + 1.0) * 0.5, 0.0, 1.0);
        px[(static_cast<std::size_t>(y) * w + x) * c + k] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return encode(px, w, h, c);
}

Image decode_image(std::span<const std::uint8_t> bytes) {
  Decoded d = decode(bytes);
  Image image(3, d.height, d.width);
  for (int y = 0; y < d.height; ++y) {
    for (int x = 0; x < d.width; ++x) {
      for (int k = 0; k < 3; ++k) {
        const int src = d.channels >= 3 ? k : 0;
        const double v = d.pixels[(static_cast<std::size_t>(y) * d.width + x) * d.channels + src];
        image.at(k, y, x) = v / 255.0 * 2.0 - 1.0;
      }
    }
  }
  return image;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool has_png_signature(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= 8 && std::equal(bytes.begin(), bytes.begin() + 8, kSig);
}

}  // namespace finecontrol::png
