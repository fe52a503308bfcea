#include "vtff/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vtff {

Image make_image(int height, int width, int channels) {
  if (height <= 0 || width <= 0 || (channels != 1 && channels != 3)) {
    throw std::invalid_argument("invalid image dimensions");
  }
  Image img;
  img.height = height;
  img.width = width;
  img.channels = channels;
  img.pixels.assign(static_cast<size_t>(height) * width * channels, 0);
  return img;
}

Image to_grayscale(const Image& img) {
  if (img.channels != 3) throw std::invalid_argument("to_grayscale expects a 3-channel image");
  Image out = make_image(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      float luma = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
      int v = static_cast<int>(std::lround(luma));
      out.at(y, x, 0) = static_cast<uint8_t>(std::clamp(v, 0, 255));
    }
  }
  return out;
}

Image lbp8(const Image& img) {
  if (img.channels != 1) throw std::invalid_argument("lbp8 expects a 1-channel image");
  Image out = make_image(img.height, img.width, 1);
  auto sample = [&](int y, int x) {
    y = std::clamp(y, 0, img.height - 1);
    x = std::clamp(x, 0, img.width - 1);
    return img.at(y, x, 0);
  };
  // Clockwise from top-left; first entry lands in the MSB.
  static constexpr int kDy[8] = {-1, -1, -1, 0, 1, 1, 1, 0};
  static constexpr int kDx[8] = {-1, 0, 1, 1, 1, 0, -1, -1};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      uint8_t center = img.at(y, x, 0);
      int code = 0;
      for (int k = 0; k < 8; ++k) {
        code <<= 1;
        if (sample(y + kDy[k], x + kDx[k]) >= center) code |= 1;
      }
      out.at(y, x, 0) = static_cast<uint8_t>(code);
    }
  }
  return out;
}

Image replicate3(const Image& img) {
  if (img.channels != 1) throw std::invalid_argument("replicate3 expects a 1-channel image");
  Image out = make_image(img.height, img.width, 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      uint8_t v = img.at(y, x, 0);
      out.at(y, x, 0) = v;
      out.at(y, x, 1) = v;
      out.at(y, x, 2) = v;
    }
  }
  return out;
}

Image resize_bilinear(const Image& img, int out_height, int out_width) {
  if (img.height == out_height && img.width == out_width) return img;
  Image out = make_image(out_height, out_width, img.channels);
  float sy = static_cast<float>(img.height) / out_height;
  float sx = static_cast<float>(img.width) / out_width;
  for (int y = 0; y < out_height; ++y) {
    float fy = (y + 0.5f) * sy - 0.5f;
    int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, img.height - 1);
    int y1 = std::min(y0 + 1, img.height - 1);
    float wy = std::clamp(fy - y0, 0.0f, 1.0f);
    for (int x = 0; x < out_width; ++x) {
      float fx = (x + 0.5f) * sx - 0.5f;
      int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, img.width - 1);
      int x1 = std::min(x0 + 1, img.width - 1);
      float wx = std::clamp(fx - x0, 0.0f, 1.0f);
      for (int c = 0; c < img.channels; ++c) {
        float top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        float bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        float v = top * (1 - wy) + bot * wy;
        out.at(y, x, c) = static_cast<uint8_t>(std::clamp(static_cast<int>(std::lround(v)), 0, 255));
      }
    }
  }
  return out;
}

Image lbp_feature_image(const Image& rgb) { return replicate3(lbp8(to_grayscale(rgb))); }

Tensor image_to_tensor(const Image& img) {
  std::vector<float> data(img.pixels.size());
  for (size_t i = 0; i < img.pixels.size(); ++i) data[i] = static_cast<float>(img.pixels[i]);
  return Tensor::from({img.height, img.width, img.channels}, std::move(data));
}

}  // namespace vtff
