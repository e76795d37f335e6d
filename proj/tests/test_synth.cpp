#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "georank/retrieval.hpp"
#include "georank/rng.hpp"
#include "georank/synth.hpp"

using namespace georank;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const char* name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

double texture_distance(const ImageView& a, const ImageView& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = static_cast<double>(a.rgb[i]) - b.rgb[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("gen_object determinism and inter-class distance") {
  ProtoObject a1 = gen_object(12, "c0001");
  ProtoObject a2 = gen_object(12, "c0001");
  CHECK(a1.texture.rgb == a2.texture.rgb);
  CHECK(a1.distinctiveness == a2.distinctiveness);

  ProtoObject b = gen_object(12, "c0002");
  CHECK(texture_distance(a1.texture, b.texture) > 8.0);

  // distance floor holds across a larger sample of class pairs
  std::vector<ProtoObject> objs;
  for (int c = 0; c < 40; ++c) objs.push_back(gen_object(12, "k" + std::to_string(c)));
  double min_dist = 1e18;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    for (std::size_t j = i + 1; j < objs.size(); ++j) {
      min_dist = std::min(min_dist, texture_distance(objs[i].texture, objs[j].texture));
    }
  }
  CHECK(min_dist > 8.0);
}

TEST_CASE("render_view identity produces the texture and the identity map") {
  ProtoObject obj = gen_object(13, "c");
  RenderSpec spec;  // identity, no perturbations
  auto [img, corr] = render_view(obj, spec);
  CHECK(img.rgb == obj.texture.rgb);
  for (int y = 0; y < kSynthImageSize; ++y) {
    for (int x = 0; x < kSynthImageSize; ++x) {
      const std::size_t i = corr.idx(y, x);
      CHECK(corr.valid[i] == 1);
      CHECK(corr.sx[i] == doctest::Approx(static_cast<float>(x)));
      CHECK(corr.sy[i] == doctest::Approx(static_cast<float>(y)));
    }
  }
}

TEST_CASE("render_view pure translation shifts the correspondence map") {
  ProtoObject obj = gen_object(14, "c");
  RenderSpec spec;
  spec.h = Homography::translation(2, 0);
  auto [img, corr] = render_view(obj, spec);
  for (int y = 0; y < kSynthImageSize; ++y) {
    for (int x = 0; x < kSynthImageSize; ++x) {
      const std::size_t i = corr.idx(y, x);
      if (!corr.valid[i]) continue;
      CHECK(corr.sx[i] == doctest::Approx(static_cast<float>(x - 2)).epsilon(1e-5));
      CHECK(corr.sy[i] == doctest::Approx(static_cast<float>(y)).epsilon(1e-5));
    }
  }
  // columns 0 and 1 have no source
  CHECK(corr.valid[corr.idx(10, 0)] == 0);
  CHECK(corr.valid[corr.idx(10, 1)] == 0);
}

TEST_CASE("correspondence maps are consistent with the homography round trip") {
  SplitMix64 rng(15);
  ProtoObject obj = gen_object(16, "c");
  for (int trial = 0; trial < 10; ++trial) {
    RenderSpec spec = sample_render_spec(rng, 0.8);
    auto [img, corr] = render_view(obj, spec);
    int valid = 0;
    for (int y = 0; y < kSynthImageSize; ++y) {
      for (int x = 0; x < kSynthImageSize; ++x) {
        const std::size_t i = corr.idx(y, x);
        if (!corr.valid[i]) continue;
        ++valid;
        double u, v;
        spec.h.apply(corr.sx[i], corr.sy[i], &u, &v);
        CHECK(std::hypot(u - x, v - y) < 0.5);
      }
    }
    CHECK(valid > 0);
  }
}

TEST_CASE("sampled homographies satisfy the spec invariants") {
  SplitMix64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    RenderSpec spec = sample_render_spec(rng, 1.0);
    CHECK(std::fabs(spec.h.determinant() - 1.0) < 1e-9);
    CHECK(spec.h.frobenius_condition() < 100.0);
    CHECK(spec.occlusion_fraction >= 0.0);
    CHECK(spec.occlusion_fraction <= 0.6);
  }
}

TEST_CASE("occlusion monotonicity over the generator") {
  ProtoObject obj = gen_object(18, "c");
  for (std::uint64_t seed = 100; seed < 112; ++seed) {
    double prev_fraction = 1.1;
    for (double occ_max : {0.0, 0.15, 0.3, 0.45, 0.6}) {
      SplitMix64 rng(seed);
      RenderSpec spec = sample_render_spec(rng, 0.5, occ_max);
      auto [img, corr] = render_view(obj, spec);
      const double f = corr.valid_fraction();
      CHECK(f <= prev_fraction + 1e-12);
      prev_fraction = f;
    }
  }
}

TEST_CASE("build_dataset tiny manifest resolves truths") {
  const std::string dir = fresh_dir("georank_ds_tiny");
  DatasetConfig cfg;
  cfg.classes = 2;
  cfg.queries = 2;
  cfg.difficulty = 0.3;
  cfg.seed = 5;
  DatasetManifest m = build_dataset(cfg, dir);
  CHECK(m.gallery.size() == 2);
  CHECK(m.queries.size() == 2);
  for (const auto& q : m.queries) {
    bool found = false;
    for (const auto& g : m.gallery) found |= g.class_id == q.class_id;
    CHECK(found);
    CHECK(q.view_paths.size() == 1);
    CHECK(q.corr_paths.size() == 1);
    CHECK(fs::exists(fs::path(dir) / q.view_paths[0]));
    CHECK(fs::exists(fs::path(dir) / q.corr_paths[0]));
  }
  DatasetManifest loaded = load_manifest(dir);
  CHECK(loaded.queries.size() == m.queries.size());
  CHECK(loaded.config.seed == cfg.seed);
  fs::remove_all(dir);
}

TEST_CASE("build_dataset is byte-identical across reruns") {
  DatasetConfig cfg;
  cfg.classes = 4;
  cfg.queries = 6;
  cfg.views_per_query = 3;
  cfg.difficulty = 0.6;
  cfg.seed = 99;
  const std::string d1 = fresh_dir("georank_ds_a");
  const std::string d2 = fresh_dir("georank_ds_b");
  build_dataset(cfg, d1);
  build_dataset(cfg, d2);
  int files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    ++files;
    const fs::path rel = fs::relative(entry.path(), d1);
    CHECK(slurp(entry.path()) == slurp(fs::path(d2) / rel));
  }
  CHECK(files == 4 + 6 * 3 * 2 + 1);  // gallery + query views + corr maps + manifest
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("difficulty zero gives perfect stage-1 recall") {
  const std::string dir = fresh_dir("georank_ds_easy");
  DatasetConfig cfg;
  cfg.classes = 12;
  cfg.queries = 12;
  cfg.difficulty = 0.0;
  cfg.seed = 31;
  DatasetManifest m = build_dataset(cfg, dir);
  std::vector<Embedding> gallery;
  for (const auto& g : m.gallery) {
    gallery.push_back(handcrafted_descriptor(read_rbim((fs::path(dir) / g.view_paths[0]).string()), g.id));
  }
  GalleryIndex index = GalleryIndex::build(gallery, true);
  std::vector<Ranking> rankings;
  std::vector<std::string> truths;
  for (const auto& q : m.queries) {
    Embedding e = handcrafted_descriptor(read_rbim((fs::path(dir) / q.view_paths[0]).string()), q.id);
    rankings.push_back(rank_stage1(e, index, index.size()));
    truths.push_back(q.class_id);
  }
  CHECK(recall_at_k(rankings, truths, 1) == doctest::Approx(1.0));
  fs::remove_all(dir);
}

TEST_CASE("correspondence map file round trip") {
  CorrespondenceMap m(5, 4);
  SplitMix64 rng(19);
  for (std::size_t i = 0; i < m.valid.size(); ++i) {
    m.sx[i] = static_cast<float>(rng.uniform(0, 64));
    m.sy[i] = static_cast<float>(rng.uniform(0, 64));
    m.valid[i] = rng.next() & 1 ? 1 : 0;
  }
  const std::string path = (fs::temp_directory_path() / "georank_corr.rbcm").string();
  write_corr_map(path, m);
  CorrespondenceMap back = read_corr_map(path);
  CHECK(back.w == 5);
  CHECK(back.h == 4);
  CHECK(back.sx == m.sx);
  CHECK(back.sy == m.sy);
  CHECK(back.valid == m.valid);
  fs::remove(path);
}
