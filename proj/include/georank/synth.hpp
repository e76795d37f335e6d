#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "georank/image.hpp"
#include "georank/retrieval.hpp"

namespace georank {

// Row-major 3x3 homography mapping texture coordinates to image coordinates.
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty);

  void apply(double x, double y, double* u, double* v) const;
  Homography inverse() const;
  double determinant() const;
  Homography scaled_to_unit_det() const;
  double frobenius_condition() const;
};

Homography compose(const Homography& a, const Homography& b);  // a after b

struct RenderSpec {
  Homography h;
  double occlusion_fraction = 0.0;  // in [0, 0.6]
  std::array<float, 3> gain{1.f, 1.f, 1.f};
  std::array<float, 3> bias{0.f, 0.f, 0.f};
  float noise_sigma = 0.f;
  std::uint64_t occluder_seed = 0;
  std::uint64_t noise_seed = 0;
};

// Per-pixel source coordinates under H^-1, with occluded and out-of-texture
// pixels marked invalid.
struct CorrespondenceMap {
  int w = 0, h = 0;
  std::vector<float> sx, sy;
  std::vector<std::uint8_t> valid;

  CorrespondenceMap() = default;
  CorrespondenceMap(int w_, int h_)
      : w(w_), h(h_), sx(static_cast<std::size_t>(w_) * h_, 0.f),
        sy(static_cast<std::size_t>(w_) * h_, 0.f), valid(static_cast<std::size_t>(w_) * h_, 0) {}

  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * w + x; }
  double valid_fraction() const;
};

constexpr int kSynthImageSize = 64;

// Procedural textured object; bit-identical regeneration from (seed, class_id).
struct ProtoObject {
  std::string class_id;
  ImageView texture;  // kSynthImageSize^2 RGB
  float distinctiveness = 0.f;  // luminance contrast of the texture
};

ProtoObject gen_object(std::uint64_t seed, const std::string& class_id);

// Difficulty-scaled viewpoint/occlusion/recolor/noise perturbation. The
// homography is resampled until its condition number stays below 100 and at
// least half of the warped texture lands inside the frame. occlusion_max
// overrides the difficulty-derived occlusion range when non-negative.
RenderSpec sample_render_spec(SplitMix64& rng, double difficulty, double occlusion_max = -1.0);

std::pair<ImageView, CorrespondenceMap> render_view(const ProtoObject& obj, const RenderSpec& spec);

struct DatasetConfig {
  int classes = 200;
  int queries = 400;
  int views_per_query = 1;  // 1 or 3
  double difficulty = 0.5;
  double train_fraction = 0.5;
  std::uint64_t seed = 1;
};

struct DatasetManifest {
  DatasetConfig config;
  std::vector<ManifestRecord> gallery;
  std::vector<ManifestRecord> queries;
};

// Writes images, correspondence maps and manifest.json under out_dir; one
// canonical (identity) gallery view per class, 1 or 3 warped views per query.
DatasetManifest build_dataset(const DatasetConfig& config, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& dataset_dir);
void save_manifest(const std::string& dataset_dir, const DatasetManifest& manifest);

// Correspondence-map file: magic "RBCM", u32 w, u32 h, then per pixel two
// little-endian float32 source coordinates and a validity byte.
void write_corr_map(const std::string& path, const CorrespondenceMap& map);
CorrespondenceMap read_corr_map(const std::string& path);

}  // namespace georank
