#include "booknet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace booknet::image {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const std::size_t h = img.height, w = img.width;
  Tensor out({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = buf[(y * w + x) * 3 + c] / 255.0;
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& t) {
  if (t.rank() != 3 || (t.shape[0] != 3 && t.shape[0] != 1)) {
    throw DimensionError("write_png: expected [3 x H x W] or [1 x H x W], got " + shape_str(t.shape));
  }
  const std::size_t ch = t.shape[0], h = t.shape[1], w = t.shape[2];
  std::vector<std::uint8_t> buf(ch * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) buf[(y * w + x) * ch + c] = to_byte(t.at(c, y, x));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = ch == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path.string());
  if (!png_image_write_to_stdio(&img, f.get(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot encode PNG " + path.string() + ": " + img.message);
  }
  if (std::fflush(f.get()) != 0) throw IoError("write failed for " + path.string());
}

Tensor to_gray(const Tensor& rgb) {
  if (rgb.rank() != 3 || (rgb.shape[0] != 3 && rgb.shape[0] != 1)) {
    throw DimensionError("to_gray: expected [3 x H x W], got " + shape_str(rgb.shape));
  }
  const std::size_t h = rgb.shape[1], w = rgb.shape[2];
  Tensor g({h, w});
  if (rgb.shape[0] == 1) {
    g.data = rgb.data;
    return g;
  }
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < plane; ++i) {
    g.data[i] = 0.299 * rgb.data[i] + 0.587 * rgb.data[plane + i] + 0.114 * rgb.data[2 * plane + i];
  }
  return g;
}

Tensor quantize8(const Tensor& img) {
  Tensor out = img;
  for (double& v : out.data) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace booknet::image
