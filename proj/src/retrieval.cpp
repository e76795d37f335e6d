#include "georank/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "georank/detail/binio.hpp"

namespace georank {

int Ranking::position_of(const std::string& reference_id) const {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].reference_id == reference_id) return static_cast<int>(i) + 1;
  }
  return 0;
}

void l2_normalize(std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  if (s <= 0.0) return;
  const float inv = static_cast<float>(1.0 / std::sqrt(s));
  for (float& x : v) x *= inv;
}

GalleryIndex GalleryIndex::build(const std::vector<Embedding>& references, bool normalize) {
  if (references.empty()) throw std::invalid_argument("build_index: empty reference set");
  GalleryIndex index;
  index.dim_ = references[0].values.size();
  index.normalized_ = normalize;
  std::set<std::string> seen;
  for (const Embedding& r : references) {
    if (r.values.size() != index.dim_) throw std::invalid_argument("build_index: dim mismatch");
    if (!seen.insert(r.source_id).second) {
      throw std::invalid_argument("build_index: duplicate reference id " + r.source_id);
    }
    Entry e{r.source_id, r.values};
    if (normalize) l2_normalize(e.vec);
    index.entries_.push_back(std::move(e));
  }
  std::sort(index.entries_.begin(), index.entries_.end(),
            [](const Entry& a, const Entry& b) { return a.id < b.id; });
  return index;
}

Ranking rank_stage1(const Embedding& query, const GalleryIndex& index, std::size_t limit) {
  if (query.values.size() != index.dim()) throw std::invalid_argument("rank_stage1: dim mismatch");
  if (limit == 0) throw std::invalid_argument("rank_stage1: limit must be >= 1");
  std::vector<float> q = query.values;
  if (index.normalized()) l2_normalize(q);
  struct Scored {
    float score;
    const GalleryIndex::Entry* entry;
  };
  std::vector<Scored> scored;
  scored.reserve(index.size());
  for (const auto& e : index.entries()) {
    scored.push_back({dot(q.data(), e.vec.data(), q.size()), &e});
  }
  // Entries are stored sorted by id, so a stable sort on score yields the
  // ascending-id tie-break.
  std::stable_sort(scored.begin(), scored.end(),
                   [](const Scored& a, const Scored& b) { return a.score > b.score; });
  Ranking out;
  out.query_id = query.source_id;
  const std::size_t n = std::min(limit, scored.size());
  out.entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.entries.push_back({scored[i].entry->id, scored[i].score});
  }
  return out;
}

FusionParams FusionParams::identity_average(std::size_t d) {
  FusionParams p;
  p.map = LinearT<float>::zeros(3 * d, d);
  for (std::size_t v = 0; v < 3; ++v) {
    for (std::size_t j = 0; j < d; ++j) p.map.w.at(v * d + j, j) = 1.f / 3.f;
  }
  return p;
}

FusionParams FusionParams::seeded(std::size_t d, std::uint64_t seed) {
  FusionParams p;
  p.map = LinearT<float>::make(3 * d, d, seed);
  return p;
}

Embedding fuse_multiview(const std::vector<Embedding>& views, const FusionParams& params) {
  if (views.size() != 3) throw std::invalid_argument("fuse_multiview: exactly 3 views required");
  const std::size_t d = views[0].values.size();
  if (views[1].values.size() != d || views[2].values.size() != d) {
    throw std::invalid_argument("fuse_multiview: view dim mismatch");
  }
  if (params.map.in() != 3 * d || params.map.out() != d) {
    throw std::invalid_argument("fuse_multiview: fusion params dim mismatch");
  }
  Tensorf x({3 * d});
  for (std::size_t v = 0; v < 3; ++v) {
    std::copy(views[v].values.begin(), views[v].values.end(), x.data() + v * d);
  }
  Tensorf y = linear(x, params.map);
  Embedding out;
  out.source_id = views[0].source_id;
  out.view_count = 3;
  out.values.assign(y.data(), y.data() + y.size());
  return out;
}

float reciprocal_rank(const Ranking& ranking, const std::string& true_class) {
  if (ranking.entries.empty()) throw std::invalid_argument("reciprocal_rank: empty ranking");
  const int pos = ranking.position_of(true_class);
  return pos == 0 ? 0.f : 1.f / static_cast<float>(pos);
}

float recall_at_k(const std::vector<Ranking>& rankings, const std::vector<std::string>& truths,
                  std::size_t k) {
  if (rankings.empty() || rankings.size() != truths.size()) {
    throw std::invalid_argument("recall_at_k: rankings/truths mismatch");
  }
  if (k == 0) throw std::invalid_argument("recall_at_k: k must be >= 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    const int pos = rankings[i].position_of(truths[i]);
    if (pos > 0 && static_cast<std::size_t>(pos) <= k) ++hits;
  }
  return static_cast<float>(hits) / static_cast<float>(rankings.size());
}

Embedding handcrafted_descriptor(const ImageView& img, const std::string& source_id) {
  Embedding e;
  e.source_id = source_id;
  e.values.assign(kDescriptorDim, 0.f);

  // 4x4 mean-color grid (48 dims).
  const int gw = img.width / 4, gh = img.height / 4;
  for (int gy = 0; gy < 4; ++gy) {
    for (int gx = 0; gx < 4; ++gx) {
      double acc[3] = {0, 0, 0};
      for (int y = gy * gh; y < (gy + 1) * gh; ++y) {
        for (int x = gx * gw; x < (gx + 1) * gw; ++x) {
          for (int c = 0; c < 3; ++c) acc[c] += img.at(y, x, c);
        }
      }
      const double inv = 1.0 / (static_cast<double>(gw) * gh);
      for (int c = 0; c < 3; ++c) {
        e.values[(gy * 4 + gx) * 3 + c] = static_cast<float>(acc[c] * inv);
      }
    }
  }

  // 16-bin gradient-orientation histogram over luminance (dims 48..63).
  const double two_pi = 6.283185307179586;
  for (int y = 1; y + 1 < img.height; ++y) {
    for (int x = 1; x + 1 < img.width; ++x) {
      const float dx = img.luminance(y, x + 1) - img.luminance(y, x - 1);
      const float dy = img.luminance(y + 1, x) - img.luminance(y - 1, x);
      const double mag = std::sqrt(static_cast<double>(dx) * dx + static_cast<double>(dy) * dy);
      if (mag < 1e-9) continue;
      double angle = std::atan2(static_cast<double>(dy), static_cast<double>(dx));
      if (angle < 0) angle += two_pi;
      int bin = static_cast<int>(angle / two_pi * 16.0);
      if (bin >= 16) bin = 15;
      e.values[48 + bin] += static_cast<float>(mag);
    }
  }
  // Scale the histogram half to a comparable magnitude before the global
  // normalization.
  double hsum = 0.0;
  for (int b = 0; b < 16; ++b) hsum += e.values[48 + b];
  if (hsum > 0) {
    for (int b = 0; b < 16; ++b) e.values[48 + b] = static_cast<float>(e.values[48 + b] / hsum);
  }
  l2_normalize(e.values);
  return e;
}

void write_embeddings(const std::string& path, const std::vector<Embedding>& embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("write_embeddings: empty set");
  const std::size_t dim = embeddings[0].values.size();
  auto os = detail::open_out(path);
  os.write("RBE1", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(embeddings.size()));
  detail::write_u32(os, static_cast<std::uint32_t>(dim));
  for (const Embedding& e : embeddings) {
    if (e.values.size() != dim) throw std::invalid_argument("write_embeddings: dim mismatch");
    detail::write_f32(os, e.values.data(), dim);
  }
  for (const Embedding& e : embeddings) {
    os.write(e.source_id.c_str(), static_cast<std::streamsize>(e.source_id.size() + 1));
  }
  if (!os) throw std::runtime_error("failed writing " + path);
}

std::vector<Embedding> read_embeddings(const std::string& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "RBE1");
  const std::uint32_t count = detail::read_u32(is);
  const std::uint32_t dim = detail::read_u32(is);
  if (count == 0 || dim == 0) throw std::runtime_error("empty embedding file " + path);
  std::vector<Embedding> out(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    out[i].values.assign(dim, 0.f);
    detail::read_f32(is, out[i].values.data(), dim);
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string id;
    char c;
    while (is.get(c) && c != '\0') id.push_back(c);
    if (!is) throw std::runtime_error("truncated id table in " + path);
    out[i].source_id = std::move(id);
  }
  return out;
}

}  // namespace georank
