#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace georank {

// RGB image, values in [0,1], row-major y, x, channel.
struct ImageView {
  int width = 0;
  int height = 0;
  std::string view_id;
  std::vector<float> rgb;

  ImageView() = default;
  ImageView(int w, int h, std::string id = "")
      : width(w), height(h), view_id(std::move(id)), rgb(static_cast<std::size_t>(w) * h * 3, 0.f) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("image: non-positive dimensions");
  }

  float& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  float luminance(int y, int x) const {
    return 0.299f * at(y, x, 0) + 0.587f * at(y, x, 1) + 0.114f * at(y, x, 2);
  }
};

// Separable Gaussian smoothing; returns the input unchanged for sigma <= 0.
ImageView blur_image(const ImageView& src, double sigma);

// Per-channel standardization over the whole image (zero mean, unit variance;
// near-constant channels collapse to zero). Removes global affine recolor.
ImageView standardize_image(const ImageView& src);

// 8-bit RGB image file: magic "RBIM", u32 width, u32 height (little-endian),
// then rows of 8-bit RGB.
void write_rbim(const std::string& path, const ImageView& img);
ImageView read_rbim(const std::string& path);

}  // namespace georank
