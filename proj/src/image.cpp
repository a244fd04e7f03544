#include "icre/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace icre::img {

void write_png(const std::string& path, const Image8& image) {
  if (image.width <= 0 || image.height <= 0 ||
      image.rgb.size() != static_cast<size_t>(image.width) * image.height * 3)
    throw std::invalid_argument("write_png: malformed image buffer");
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(image.width);
  pi.height = static_cast<png_uint_32>(image.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, image.rgb.data(), 0, nullptr))
    throw std::runtime_error("write_png: " + path + ": " + pi.message);
}

Image8 read_png(const std::string& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw std::runtime_error("read_png: " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Image8 out;
  out.width = static_cast<int>(pi.width);
  out.height = static_cast<int>(pi.height);
  out.rgb.resize(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, out.rgb.data(), 0, nullptr))
    throw std::runtime_error("read_png: " + path + ": " + pi.message);
  return out;
}

Tensor to_tensor(const Image8& image) {
  int64_t h = image.height, w = image.width;
  Tensor t({3, h, w});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        t.at3(c, y, x) =
            (image.at(static_cast<int>(y), static_cast<int>(x), static_cast<int>(c)) / 255.0 -
             kMean[c]) /
            kStd[c];
  return t;
}

Tensor resize_bilinear(const Tensor& chw, int64_t out_h, int64_t out_w) {
  if (chw.rank() != 3 || chw.dim(0) != 3)
    throw std::invalid_argument("resize_bilinear: expect [3,H,W]");
  int64_t h = chw.dim(1), w = chw.dim(2);
  if (h == out_h && w == out_w) return chw;
  Tensor out({3, out_h, out_w});
  double sy = static_cast<double>(h) / out_h;
  double sx = static_cast<double>(w) / out_w;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < out_h; ++y) {
      double fy = (y + 0.5) * sy - 0.5;
      int64_t y0 = static_cast<int64_t>(std::floor(fy));
      double wy = fy - y0;
      int64_t y0c = std::clamp<int64_t>(y0, 0, h - 1);
      int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, h - 1);
      for (int64_t x = 0; x < out_w; ++x) {
        double fx = (x + 0.5) * sx - 0.5;
        int64_t x0 = static_cast<int64_t>(std::floor(fx));
        double wx = fx - x0;
        int64_t x0c = std::clamp<int64_t>(x0, 0, w - 1);
        int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, w - 1);
        double top = chw.at3(c, y0c, x0c) * (1.0 - wx) + chw.at3(c, y0c, x1c) * wx;
        double bot = chw.at3(c, y1c, x0c) * (1.0 - wx) + chw.at3(c, y1c, x1c) * wx;
        out.at3(c, y, x) = top * (1.0 - wy) + bot * wy;
      }
    }
  return out;
}

}  // namespace icre::img
