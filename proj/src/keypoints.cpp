#include "georank/keypoints.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>

namespace georank {

namespace {

constexpr int kOctaves = 3;
constexpr double kBaseSigma = 1.6;
constexpr double kSigmaStep = 1.4142135623730951;  // sqrt(2)
constexpr float kResponseThreshold = 1e-6f;

struct Gray {
  int w = 0, h = 0;
  std::vector<float> v;
  float at(int y, int x) const {
    y = std::min(std::max(y, 0), h - 1);
    x = std::min(std::max(x, 0), w - 1);
    return v[static_cast<std::size_t>(y) * w + x];
  }
};

Gray to_gray(const ImageView& img) {
  Gray g;
  g.w = img.width;
  g.h = img.height;
  g.v.resize(static_cast<std::size_t>(g.w) * g.h);
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) g.v[static_cast<std::size_t>(y) * g.w + x] = img.luminance(y, x);
  }
  return g;
}

Gray downsample2(const Gray& src) {
  Gray g;
  g.w = src.w / 2;
  g.h = src.h / 2;
  g.v.resize(static_cast<std::size_t>(g.w) * g.h);
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      const float s = src.at(2 * y, 2 * x) + src.at(2 * y, 2 * x + 1) + src.at(2 * y + 1, 2 * x) +
                      src.at(2 * y + 1, 2 * x + 1);
      g.v[static_cast<std::size_t>(y) * g.w + x] = 0.25f * s;
    }
  }
  return g;
}

Gray gaussian_blur(const Gray& src, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(w);
    sum += w;
  }
  for (float& k : kernel) k = static_cast<float>(k / sum);

  Gray tmp = src, out = src;
  for (int y = 0; y < src.h; ++y) {
    for (int x = 0; x < src.w; ++x) {
      float acc = 0.f;
      for (int i = -radius; i <= radius; ++i) acc += kernel[static_cast<std::size_t>(i + radius)] * src.at(y, x + i);
      tmp.v[static_cast<std::size_t>(y) * src.w + x] = acc;
    }
  }
  for (int y = 0; y < src.h; ++y) {
    for (int x = 0; x < src.w; ++x) {
      float acc = 0.f;
      for (int i = -radius; i <= radius; ++i) acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(y + i, x);
      out.v[static_cast<std::size_t>(y) * src.w + x] = acc;
    }
  }
  return out;
}

struct Candidate {
  float x, y, response;
};

}  // namespace

std::vector<Keypoint> grid_keypoints(int width, int height, int count) {
  std::vector<Keypoint> out;
  if (count <= 0) return out;
  const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
  for (int i = 0; i < g && static_cast<int>(out.size()) < count; ++i) {
    for (int j = 0; j < g && static_cast<int>(out.size()) < count; ++j) {
      out.push_back({(j + 0.5f) * width / g, (i + 0.5f) * height / g});
    }
  }
  return out;
}

std::vector<Keypoint> detect_keypoints(const ImageView& image, int count) {
  if (count < 1) throw std::invalid_argument("detect_keypoints: count must be >= 1");
  std::vector<Candidate> candidates;
  Gray base = to_gray(image);
  for (int octave = 0; octave < kOctaves; ++octave) {
    if (base.w < 8 || base.h < 8) break;
    Gray levels[4];
    for (int i = 0; i < 4; ++i) {
      levels[i] = gaussian_blur(base, kBaseSigma * std::pow(kSigmaStep, i));
    }
    std::vector<Gray> dog(3);
    for (int i = 0; i < 3; ++i) {
      dog[i] = levels[i];
      for (std::size_t p = 0; p < dog[i].v.size(); ++p) dog[i].v[p] = levels[i + 1].v[p] - levels[i].v[p];
    }
    const int scale = 1 << octave;
    // Spatial extrema of each difference level.
    for (int s = 0; s < 3; ++s) {
      for (int y = 1; y + 1 < base.h; ++y) {
        for (int x = 1; x + 1 < base.w; ++x) {
          const float v = dog[s].at(y, x);
          if (std::fabs(v) <= kResponseThreshold) continue;
          bool is_max = true, is_min = true;
          for (int dy = -1; dy <= 1 && (is_max || is_min); ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              if (dy == 0 && dx == 0) continue;
              const float n = dog[s].at(y + dy, x + dx);
              if (v <= n) is_max = false;
              if (v >= n) is_min = false;
            }
          }
          if (is_max || is_min) {
            candidates.push_back({static_cast<float>(x * scale), static_cast<float>(y * scale), v});
          }
        }
      }
    }
    base = downsample2(base);
  }

  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    const float ra = std::fabs(a.response), rb = std::fabs(b.response);
    if (ra != rb) return ra > rb;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });

  std::vector<Keypoint> out;
  out.reserve(static_cast<std::size_t>(count));
  std::vector<std::uint64_t> taken;
  for (const Candidate& c : candidates) {
    if (static_cast<int>(out.size()) >= count) break;
    // the same location can fire on several difference levels; keep the strongest
    const std::uint64_t key =
        (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.y)) << 32) |
        static_cast<std::uint32_t>(c.x);
    if (std::find(taken.begin(), taken.end(), key) != taken.end()) continue;
    taken.push_back(key);
    out.push_back({c.x, c.y});
  }
  if (static_cast<int>(out.size()) < count) {
    for (const Keypoint& p : grid_keypoints(image.width, image.height, count)) {
      if (static_cast<int>(out.size()) >= count) break;
      out.push_back(p);
    }
  }
  return out;
}

}  // namespace georank
