#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "georank/image.hpp"
#include "georank/ops.hpp"

namespace georank {

// Global descriptor used for stage-1 ranking. For gallery entries source_id
// doubles as the catalog class id (one canonical view per class).
struct Embedding {
  std::string source_id;
  int view_count = 1;
  std::vector<float> values;
};

struct RankedEntry {
  std::string reference_id;
  float score = 0.f;
};

// Ordered candidate list, best first. Stage-1 rankings have non-increasing
// scores with ties broken by ascending reference id; after geometric
// re-ranking the reordered block carries its re-ranking scores while the tail
// keeps the stage-1 scores.
struct Ranking {
  std::string query_id;
  std::vector<RankedEntry> entries;

  int position_of(const std::string& reference_id) const;  // 1-based, 0 if absent
};

class GalleryIndex {
 public:
  struct Entry {
    std::string id;
    std::vector<float> vec;
  };

  GalleryIndex() = default;

  static GalleryIndex build(const std::vector<Embedding>& references, bool normalize);

  std::size_t size() const { return entries_.size(); }
  std::size_t dim() const { return dim_; }
  bool normalized() const { return normalized_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;  // sorted by id
  std::size_t dim_ = 0;
  bool normalized_ = true;
};

// Exhaustive dot-product ranking (cosine when the index is normalized; the
// query is normalized to match). Deterministic tie-break by ascending id.
Ranking rank_stage1(const Embedding& query, const GalleryIndex& index, std::size_t limit);

// 3*d -> d fusion of three view embeddings. Identity-average initialization
// makes the untrained map the arithmetic mean of the views.
struct FusionParams {
  LinearT<float> map;

  static FusionParams identity_average(std::size_t d);
  static FusionParams seeded(std::size_t d, std::uint64_t seed);
};

Embedding fuse_multiview(const std::vector<Embedding>& views, const FusionParams& params);

// Metrics.
float reciprocal_rank(const Ranking& ranking, const std::string& true_class);
float recall_at_k(const std::vector<Ranking>& rankings, const std::vector<std::string>& truths,
                  std::size_t k);

// Built-in embedding provider: 4x4 mean-color grid (48 dims) plus a 16-bin
// gradient-orientation histogram, L2-normalized to 64 dims.
Embedding handcrafted_descriptor(const ImageView& img, const std::string& source_id);
constexpr std::size_t kDescriptorDim = 64;

void l2_normalize(std::vector<float>& v);

// Embedding file: magic "RBE1", u32 count, u32 dim (little-endian), then
// count*dim float32 row-major, then count null-terminated UTF-8 ids.
void write_embeddings(const std::string& path, const std::vector<Embedding>& embeddings);
std::vector<Embedding> read_embeddings(const std::string& path);

// One dataset record: {id, class_id, view_paths[], split}.
struct ManifestRecord {
  std::string id;
  std::string class_id;
  std::vector<std::string> view_paths;
  std::vector<std::string> corr_paths;  // queries only
  std::string split;
};

}  // namespace georank
