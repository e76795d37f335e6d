#include "georank/image.hpp"

#include <algorithm>
#include <cmath>

#include "georank/detail/binio.hpp"

namespace georank {

ImageView standardize_image(const ImageView& src) {
  ImageView out = src;
  const std::size_t n = static_cast<std::size_t>(src.width) * src.height;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += src.rgb[i * 3 + c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = src.rgb[i * 3 + c] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(n));
    const double inv = sd > 0.01 ? 1.0 / sd : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      out.rgb[i * 3 + c] = static_cast<float>((src.rgb[i * 3 + c] - mean) * inv);
    }
  }
  return out;
}

ImageView blur_image(const ImageView& src, double sigma) {
  if (sigma <= 0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(w);
    sum += w;
  }
  for (float& k : kernel) k = static_cast<float>(k / sum);

  auto clamped = [](const ImageView& im, int y, int x, int c) {
    y = std::min(std::max(y, 0), im.height - 1);
    x = std::min(std::max(x, 0), im.width - 1);
    return im.at(y, x, c);
  };
  ImageView tmp = src, out = src;
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        float acc = 0.f;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] * clamped(src, y, x + i, c);
        }
        tmp.at(y, x, c) = acc;
      }
    }
  }
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        float acc = 0.f;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] * clamped(tmp, y + i, x, c);
        }
        out.at(y, x, c) = acc;
      }
    }
  }
  return out;
}

void write_rbim(const std::string& path, const ImageView& img) {
  auto os = detail::open_out(path);
  os.write("RBIM", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(img.width));
  detail::write_u32(os, static_cast<std::uint32_t>(img.height));
  std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = img.at(y, x, c);
        const long q = std::lround(std::min(std::max(v, 0.f), 1.f) * 255.f);
        row[static_cast<std::size_t>(x) * 3 + c] = static_cast<unsigned char>(q);
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw std::runtime_error("failed writing " + path);
}

ImageView read_rbim(const std::string& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "RBIM");
  const int w = static_cast<int>(detail::read_u32(is));
  const int h = static_cast<int>(detail::read_u32(is));
  if (w <= 0 || h <= 0 || w > 4096 || h > 4096) throw std::runtime_error("bad image size in " + path);
  ImageView img(w, h);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!is) throw std::runtime_error("truncated image " + path);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = static_cast<float>(row[static_cast<std::size_t>(x) * 3 + c]) / 255.f;
      }
    }
  }
  return img;
}

}  // namespace georank
