#pragma once

#include <vector>

#include "georank/image.hpp"

namespace georank {

// Pixel coordinates in the query image frame; 0 <= x < W, 0 <= y < H.
struct Keypoint {
  float x = 0.f;
  float y = 0.f;
};

// Deterministic fallback sequence: centers of a ceil(sqrt(n)) grid, row-major.
std::vector<Keypoint> grid_keypoints(int width, int height, int count);

// Difference-of-Gaussians extrema over 3 octaves, ranked by absolute response
// with (y, x) tie-break. Always returns exactly `count` points; the grid
// sequence pads when the image yields fewer extrema.
std::vector<Keypoint> detect_keypoints(const ImageView& image, int count);

}  // namespace georank
