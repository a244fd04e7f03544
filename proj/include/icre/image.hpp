#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icre/tensor.hpp"

namespace icre::img {

/// 8-bit RGB image, row-major HxWx3.
struct Image8 {
  int width = 0, height = 0;
  std::vector<uint8_t> rgb;

  uint8_t& at(int y, int x, int c) {
    return rgb[static_cast<size_t>((y * width + x) * 3 + c)];
  }
  uint8_t at(int y, int x, int c) const {
    return rgb[static_cast<size_t>((y * width + x) * 3 + c)];
  }
};

void write_png(const std::string& path, const Image8& image);
Image8 read_png(const std::string& path);

/// Per-channel normalization constants used for all ImageTensors.
inline constexpr double kMean[3] = {0.485, 0.456, 0.406};
inline constexpr double kStd[3] = {0.229, 0.224, 0.225};

/// [3,H,W] tensor, values (v/255 - mean) / std.
Tensor to_tensor(const Image8& image);

/// Bilinear resize of a [3,H,W] tensor; exact copy when sizes already match.
Tensor resize_bilinear(const Tensor& chw, int64_t out_h, int64_t out_w);

}  // namespace icre::img
