#pragma once

#include <cstdint>
#include <vector>

#include "vtff/tensor.hpp"

namespace vtff {

// 8-bit image, row-major, channel-interleaved.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3
  std::vector<uint8_t> pixels;

  uint8_t at(int y, int x, int c) const {
    return pixels[static_cast<size_t>((y * width + x) * channels + c)];
  }
  uint8_t& at(int y, int x, int c) {
    return pixels[static_cast<size_t>((y * width + x) * channels + c)];
  }
};

Image make_image(int height, int width, int channels);

// BT.601 luma: round(0.299 R + 0.587 G + 0.114 B).
Image to_grayscale(const Image& img);

// Classic radius-1 8-neighbor LBP, comparator >=, bits packed clockwise from
// the top-left neighbor (most significant bit). Borders use replicate padding.
Image lbp8(const Image& img);

// Stack a 1-channel image into three identical channels.
Image replicate3(const Image& img);

Image resize_bilinear(const Image& img, int out_height, int out_width);

// Grayscale -> lbp8 -> replicate3; the LBP feature image fed to the LBP stream.
Image lbp_feature_image(const Image& rgb);

// Raw intensities as float32, [H,W,C].
Tensor image_to_tensor(const Image& img);

}  // namespace vtff
