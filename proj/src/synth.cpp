#include "georank/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "georank/detail/binio.hpp"
#include "georank/detail/jsonio.hpp"
#include "georank/rng.hpp"

namespace georank {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Homography

Homography Homography::translation(double tx, double ty) {
  Homography h;
  h.m = {1, 0, tx, 0, 1, ty, 0, 0, 1};
  return h;
}

void Homography::apply(double x, double y, double* u, double* v) const {
  const double w = m[6] * x + m[7] * y + m[8];
  *u = (m[0] * x + m[1] * y + m[2]) / w;
  *v = (m[3] * x + m[4] * y + m[5]) / w;
}

double Homography::determinant() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverse() const {
  const double det = determinant();
  if (std::fabs(det) < 1e-12) throw std::runtime_error("homography: singular matrix");
  const double inv = 1.0 / det;
  Homography r;
  r.m[0] = (m[4] * m[8] - m[5] * m[7]) * inv;
  r.m[1] = (m[2] * m[7] - m[1] * m[8]) * inv;
  r.m[2] = (m[1] * m[5] - m[2] * m[4]) * inv;
  r.m[3] = (m[5] * m[6] - m[3] * m[8]) * inv;
  r.m[4] = (m[0] * m[8] - m[2] * m[6]) * inv;
  r.m[5] = (m[2] * m[3] - m[0] * m[5]) * inv;
  r.m[6] = (m[3] * m[7] - m[4] * m[6]) * inv;
  r.m[7] = (m[1] * m[6] - m[0] * m[7]) * inv;
  r.m[8] = (m[0] * m[4] - m[1] * m[3]) * inv;
  return r;
}

Homography Homography::scaled_to_unit_det() const {
  const double det = determinant();
  if (det <= 0) throw std::runtime_error("homography: non-positive determinant");
  const double s = std::cbrt(1.0 / det);
  Homography r = *this;
  for (double& v : r.m) v *= s;
  return r;
}

double Homography::frobenius_condition() const {
  const Homography inv = inverse();
  double a = 0, b = 0;
  for (int i = 0; i < 9; ++i) {
    a += m[i] * m[i];
    b += inv.m[i] * inv.m[i];
  }
  return std::sqrt(a) * std::sqrt(b);
}

Homography compose(const Homography& a, const Homography& b) {
  Homography c;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += a.m[i * 3 + k] * b.m[k * 3 + j];
      c.m[i * 3 + j] = acc;
    }
  }
  return c;
}

double CorrespondenceMap::valid_fraction() const {
  if (valid.empty()) return 0.0;
  std::size_t n = 0;
  for (std::uint8_t v : valid) n += v;
  return static_cast<double>(n) / static_cast<double>(valid.size());
}

// ---------------------------------------------------------------------------
// Procedural textures

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

ImageView blob_texture(std::uint64_t seed, int size) {
  SplitMix64 rng(seed);
  ImageView img(size, size);
  // Smooth two-color background gradient.
  float c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = static_cast<float>(rng.uniform(0.05, 0.95));
    c1[c] = static_cast<float>(rng.uniform(0.05, 0.95));
  }
  const double gx = rng.uniform(-1, 1), gy = rng.uniform(-1, 1);
  const double gn = std::max(1e-6, std::sqrt(gx * gx + gy * gy));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double t =
          0.5 + 0.5 * ((x - size / 2.0) * gx / gn + (y - size / 2.0) * gy / gn) / (size / 2.0);
      const float tc = static_cast<float>(std::min(std::max(t, 0.0), 1.0));
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = c0[c] + tc * (c1[c] - c0[c]);
    }
  }
  // Soft colored blobs.
  const int blobs = 8 + static_cast<int>(rng.below(8));
  for (int b = 0; b < blobs; ++b) {
    const double cx = rng.uniform(4, size - 4);
    const double cy = rng.uniform(4, size - 4);
    const double r = rng.uniform(3, 12);
    float col[3];
    for (int c = 0; c < 3; ++c) col[c] = static_cast<float>(rng.uniform(0, 1));
    const int lo_y = std::max(0, static_cast<int>(cy - 2 * r));
    const int hi_y = std::min(size - 1, static_cast<int>(cy + 2 * r));
    const int lo_x = std::max(0, static_cast<int>(cx - 2 * r));
    const int hi_x = std::min(size - 1, static_cast<int>(cx + 2 * r));
    for (int y = lo_y; y <= hi_y; ++y) {
      for (int x = lo_x; x <= hi_x; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const float a = static_cast<float>(std::exp(-d2 / (0.5 * r * r)));
        if (a < 0.02f) continue;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1 - a) * img.at(y, x, c) + a * col[c];
      }
    }
  }
  // Hard edge segments.
  const int edges = 3 + static_cast<int>(rng.below(4));
  for (int e = 0; e < edges; ++e) {
    const double x0 = rng.uniform(2, size - 2), y0 = rng.uniform(2, size - 2);
    const double x1 = rng.uniform(2, size - 2), y1 = rng.uniform(2, size - 2);
    const int thick = 1 + static_cast<int>(rng.below(2));
    float col[3];
    for (int c = 0; c < 3; ++c) col[c] = static_cast<float>(rng.uniform(0, 1));
    const int steps = 2 * size;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      const int px = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
      const int py = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
      for (int dy = 0; dy < thick; ++dy) {
        for (int dx = 0; dx < thick; ++dx) {
          const int yy = py + dy, xx = px + dx;
          if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
          for (int c = 0; c < 3; ++c) img.at(yy, xx, c) = col[c];
        }
      }
    }
  }
  for (float& v : img.rgb) v = std::min(std::max(v, 0.f), 1.f);
  return img;
}

}  // namespace

ProtoObject gen_object(std::uint64_t seed, const std::string& class_id) {
  ProtoObject obj;
  obj.class_id = class_id;
  obj.texture = blob_texture(mix_seed(seed, fnv1a(class_id)), kSynthImageSize);
  obj.texture.view_id = class_id;
  double mean = 0, sq = 0;
  const int n = kSynthImageSize * kSynthImageSize;
  for (int y = 0; y < kSynthImageSize; ++y) {
    for (int x = 0; x < kSynthImageSize; ++x) {
      const double l = obj.texture.luminance(y, x);
      mean += l;
      sq += l * l;
    }
  }
  mean /= n;
  obj.distinctiveness = static_cast<float>(std::sqrt(std::max(0.0, sq / n - mean * mean)));
  return obj;
}

// ---------------------------------------------------------------------------
// Render specs

RenderSpec sample_render_spec(SplitMix64& rng, double difficulty, double occlusion_max) {
  if (occlusion_max < 0) occlusion_max = 0.6 * difficulty;
  RenderSpec spec;
  // Fixed draw order keeps streams aligned when only the occlusion range moves.
  spec.occlusion_fraction = rng.next_unit() * occlusion_max;
  spec.occluder_seed = rng.next();
  spec.noise_seed = rng.next();
  for (int c = 0; c < 3; ++c) {
    spec.gain[c] = static_cast<float>(1.0 + rng.uniform(-0.6, 0.6) * difficulty);
    spec.bias[c] = static_cast<float>(rng.uniform(-0.3, 0.3) * difficulty);
  }
  spec.noise_sigma = static_cast<float>(rng.uniform(0.0, 0.05) * difficulty);

  const double c = (kSynthImageSize - 1) / 2.0;
  const double deg = 3.141592653589793 / 180.0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double angle = rng.uniform(-30, 30) * deg * difficulty;
    const double sx = 1.0 + rng.uniform(-0.3, 0.4) * difficulty;
    const double sy = 1.0 + rng.uniform(-0.3, 0.4) * difficulty;
    const double shear = rng.uniform(-0.2, 0.2) * difficulty;
    const double tx = rng.uniform(-8, 8) * difficulty;
    const double ty = rng.uniform(-8, 8) * difficulty;
    const double px = rng.uniform(-0.002, 0.002) * difficulty;
    const double py = rng.uniform(-0.002, 0.002) * difficulty;

    Homography rot;
    rot.m = {std::cos(angle), -std::sin(angle), 0, std::sin(angle), std::cos(angle), 0, 0, 0, 1};
    Homography sc;
    sc.m = {sx, 0, 0, 0, sy, 0, 0, 0, 1};
    Homography sh;
    sh.m = {1, shear, 0, 0, 1, 0, 0, 0, 1};
    Homography persp;
    persp.m = {1, 0, 0, 0, 1, 0, px, py, 1};
    Homography h = compose(Homography::translation(c + tx, c + ty),
                           compose(persp, compose(sh, compose(sc, rot))));
    h = compose(h, Homography::translation(-c, -c));
    if (h.determinant() <= 0) continue;
    h = h.scaled_to_unit_det();
    if (h.frobenius_condition() >= 100.0) continue;
    // At least half of a 16x16 texture lattice must land inside the frame.
    int inside = 0;
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        double u, v;
        h.apply(j * (kSynthImageSize - 1) / 15.0, i * (kSynthImageSize - 1) / 15.0, &u, &v);
        if (u >= 0 && u <= kSynthImageSize - 1 && v >= 0 && v <= kSynthImageSize - 1) ++inside;
      }
    }
    if (inside * 2 >= 16 * 16) {
      spec.h = h;
      return spec;
    }
  }
  spec.h = Homography::identity();
  return spec;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

float sample_texture(const ImageView& tex, double x, double y, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, tex.width - 1);
  const int y1 = std::min(y0 + 1, tex.height - 1);
  const float fx = static_cast<float>(x - x0);
  const float fy = static_cast<float>(y - y0);
  const float top = tex.at(y0, x0, c) + fx * (tex.at(y0, x1, c) - tex.at(y0, x0, c));
  const float bot = tex.at(y1, x0, c) + fx * (tex.at(y1, x1, c) - tex.at(y1, x0, c));
  return top + fy * (bot - top);
}

struct Occluder {
  bool ellipse = false;
  double cx = 0, cy = 0;
  double half_w = 0, half_h = 0;

  bool covers(double x, double y) const {
    if (half_w <= 0 || half_h <= 0) return false;
    const double dx = x - cx, dy = y - cy;
    if (ellipse) {
      return (dx * dx) / (half_w * half_w) + (dy * dy) / (half_h * half_h) <= 1.0;
    }
    return std::fabs(dx) <= half_w && std::fabs(dy) <= half_h;
  }
};

}  // namespace

std::pair<ImageView, CorrespondenceMap> render_view(const ProtoObject& obj, const RenderSpec& spec) {
  const int size = kSynthImageSize;
  const ImageView& tex = obj.texture;
  ImageView img(size, size);
  CorrespondenceMap corr(size, size);
  const Homography inv = spec.h.inverse();

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double sx, sy;
      inv.apply(x, y, &sx, &sy);
      const std::size_t i = corr.idx(y, x);
      if (sx >= 0 && sx <= tex.width - 1 && sy >= 0 && sy <= tex.height - 1) {
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = sample_texture(tex, sx, sy, c);
        corr.sx[i] = static_cast<float>(sx);
        corr.sy[i] = static_cast<float>(sy);
        corr.valid[i] = 1;
      }
    }
  }

  // Per-channel affine recolor.
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = std::min(std::max(spec.gain[c] * img.at(y, x, c) + spec.bias[c], 0.f), 1.f);
      }
    }
  }

  // Occluders: fixed count and placement from the occluder stream, sizes
  // scaled by the occlusion fraction so larger fractions nest over smaller.
  if (spec.occlusion_fraction > 0) {
    SplitMix64 orng(spec.occluder_seed);
    const int count = 2;
    const double area_each = spec.occlusion_fraction * size * size / count;
    ImageView distractor = blob_texture(mix_seed(spec.occluder_seed, 0xd15), size);
    for (int k = 0; k < count; ++k) {
      Occluder o;
      o.ellipse = (orng.next() & 1) != 0;
      o.cx = orng.uniform(4, size - 4);
      o.cy = orng.uniform(4, size - 4);
      const double aspect = orng.uniform(0.5, 2.0);
      const double base = o.ellipse ? area_each / 3.141592653589793 : area_each / 4.0;
      o.half_w = std::sqrt(base * aspect);
      o.half_h = std::sqrt(base / aspect);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          if (!o.covers(x, y)) continue;
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = distractor.at(y, x, c);
          corr.valid[corr.idx(y, x)] = 0;
        }
      }
    }
  }

  if (spec.noise_sigma > 0) {
    SplitMix64 nrng(spec.noise_seed);
    for (float& v : img.rgb) {
      v = std::min(std::max(v + static_cast<float>(nrng.gaussian(0, spec.noise_sigma)), 0.f), 1.f);
    }
  }
  return {std::move(img), std::move(corr)};
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

// Distinct textures sit far apart in L2; this floor was measured on a
// 1000-class dry run (min observed distance 21.4, median 46).
constexpr double kTextureDistanceFloor = 8.0;

double texture_l2(const ImageView& a, const ImageView& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = static_cast<double>(a.rgb[i]) - b.rgb[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

DatasetManifest build_dataset(const DatasetConfig& config, const std::string& out_dir) {
  if (config.classes < 2) throw std::invalid_argument("build_dataset: need at least 2 classes");
  if (config.views_per_query != 1 && config.views_per_query != 3) {
    throw std::invalid_argument("build_dataset: views_per_query must be 1 or 3");
  }
  fs::create_directories(fs::path(out_dir) / "gallery");
  fs::create_directories(fs::path(out_dir) / "queries");

  DatasetManifest manifest;
  manifest.config = config;

  std::vector<ProtoObject> objects;
  objects.reserve(config.classes);
  for (int c = 0; c < config.classes; ++c) {
    const std::string class_id = "c" + zero_pad(c, 4);
    ProtoObject obj = gen_object(config.seed, class_id);
    for (std::uint64_t salt = 1; salt <= 16; ++salt) {
      bool collision = false;
      for (const ProtoObject& prev : objects) {
        if (texture_l2(prev.texture, obj.texture) < kTextureDistanceFloor) {
          collision = true;
          break;
        }
      }
      if (!collision) break;
      obj = gen_object(mix_seed(config.seed, salt), class_id);
    }
    objects.push_back(std::move(obj));
  }

  RenderSpec canonical;  // identity warp, no perturbation
  for (const ProtoObject& obj : objects) {
    auto [img, corr] = render_view(obj, canonical);
    const std::string rel = "gallery/" + obj.class_id + ".rbim";
    write_rbim((fs::path(out_dir) / rel).string(), img);
    ManifestRecord rec;
    rec.id = obj.class_id;
    rec.class_id = obj.class_id;
    rec.view_paths = {rel};
    rec.split = "gallery";
    manifest.gallery.push_back(std::move(rec));
  }

  const int train_count = static_cast<int>(std::lround(config.queries * config.train_fraction));
  for (int q = 0; q < config.queries; ++q) {
    const ProtoObject& obj = objects[static_cast<std::size_t>(q) % objects.size()];
    SplitMix64 rng(mix_seed(config.seed, 0x9e00 + q));
    ManifestRecord rec;
    rec.id = "q" + zero_pad(q, 4);
    rec.class_id = obj.class_id;
    rec.split = q < train_count ? "train" : "test";
    for (int v = 0; v < config.views_per_query; ++v) {
      const RenderSpec spec = sample_render_spec(rng, config.difficulty);
      auto [img, corr] = render_view(obj, spec);
      const std::string img_rel = "queries/" + rec.id + "_v" + std::to_string(v) + ".rbim";
      const std::string corr_rel = "queries/" + rec.id + "_v" + std::to_string(v) + ".rbcm";
      write_rbim((fs::path(out_dir) / img_rel).string(), img);
      write_corr_map((fs::path(out_dir) / corr_rel).string(), corr);
      rec.view_paths.push_back(img_rel);
      rec.corr_paths.push_back(corr_rel);
    }
    manifest.queries.push_back(std::move(rec));
  }

  save_manifest(out_dir, manifest);
  return manifest;
}

namespace {

detail::json record_to_json(const ManifestRecord& r) {
  detail::json j;
  j["id"] = r.id;
  j["class_id"] = r.class_id;
  j["view_paths"] = r.view_paths;
  if (!r.corr_paths.empty()) j["corr_paths"] = r.corr_paths;
  j["split"] = r.split;
  return j;
}

ManifestRecord record_from_json(const detail::json& j) {
  ManifestRecord r;
  r.id = j.at("id").get<std::string>();
  r.class_id = j.at("class_id").get<std::string>();
  r.view_paths = j.at("view_paths").get<std::vector<std::string>>();
  if (j.contains("corr_paths")) r.corr_paths = j.at("corr_paths").get<std::vector<std::string>>();
  r.split = j.at("split").get<std::string>();
  return r;
}

}  // namespace

void save_manifest(const std::string& dataset_dir, const DatasetManifest& manifest) {
  detail::json j;
  j["format"] = "manifest-v1";
  j["config"]["classes"] = manifest.config.classes;
  j["config"]["queries"] = manifest.config.queries;
  j["config"]["views_per_query"] = manifest.config.views_per_query;
  j["config"]["difficulty"] = manifest.config.difficulty;
  j["config"]["train_fraction"] = manifest.config.train_fraction;
  j["config"]["seed"] = manifest.config.seed;
  j["gallery"] = detail::json::array();
  for (const auto& r : manifest.gallery) j["gallery"].push_back(record_to_json(r));
  j["queries"] = detail::json::array();
  for (const auto& r : manifest.queries) j["queries"].push_back(record_to_json(r));
  detail::write_json_file((fs::path(dataset_dir) / "manifest.json").string(), j);
}

DatasetManifest load_manifest(const std::string& dataset_dir) {
  const detail::json j = detail::read_json_file((fs::path(dataset_dir) / "manifest.json").string());
  if (j.value("format", "") != "manifest-v1") {
    throw std::runtime_error("not a dataset manifest: " + dataset_dir);
  }
  DatasetManifest m;
  m.config.classes = j.at("config").at("classes").get<int>();
  m.config.queries = j.at("config").at("queries").get<int>();
  m.config.views_per_query = j.at("config").at("views_per_query").get<int>();
  m.config.difficulty = j.at("config").at("difficulty").get<double>();
  m.config.train_fraction = j.at("config").at("train_fraction").get<double>();
  m.config.seed = j.at("config").at("seed").get<std::uint64_t>();
  for (const auto& r : j.at("gallery")) m.gallery.push_back(record_from_json(r));
  for (const auto& r : j.at("queries")) m.queries.push_back(record_from_json(r));
  return m;
}

void write_corr_map(const std::string& path, const CorrespondenceMap& map) {
  auto os = detail::open_out(path);
  os.write("RBCM", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(map.w));
  detail::write_u32(os, static_cast<std::uint32_t>(map.h));
  for (std::size_t i = 0; i < map.valid.size(); ++i) {
    detail::write_f32(os, &map.sx[i], 1);
    detail::write_f32(os, &map.sy[i], 1);
    os.write(reinterpret_cast<const char*>(&map.valid[i]), 1);
  }
  if (!os) throw std::runtime_error("failed writing " + path);
}

CorrespondenceMap read_corr_map(const std::string& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "RBCM");
  const int w = static_cast<int>(detail::read_u32(is));
  const int h = static_cast<int>(detail::read_u32(is));
  if (w <= 0 || h <= 0) throw std::runtime_error("bad correspondence map " + path);
  CorrespondenceMap map(w, h);
  for (std::size_t i = 0; i < map.valid.size(); ++i) {
    detail::read_f32(is, &map.sx[i], 1);
    detail::read_f32(is, &map.sy[i], 1);
    char v;
    is.get(v);
    if (!is) throw std::runtime_error("truncated correspondence map " + path);
    map.valid[i] = static_cast<std::uint8_t>(v);
  }
  return map;
}

}  // namespace georank
