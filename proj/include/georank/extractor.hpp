#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "georank/blocks.hpp"
#include "georank/image.hpp"

namespace georank {

struct ExtractorConfig {
  int d3 = 32;
  int heads = 2;
  int blocks = 4;  // even: frame-wise / global pairs
  int stride = 4;
  int ffn_dim = 64;
  // Weight of the additive sinusoidal code. Kept well below the content
  // magnitude so correlation volumes match appearance rather than grid
  // position; attention still sees the spatial layout.
  float pe_scale = 0.25f;
  // Standardize each view per channel before patching. Cancels per-channel
  // affine recolor, which the frozen random backbone has no other way to
  // absorb, while keeping patch-to-patch contrast intact.
  bool input_standardize = true;
  // Gaussian smoothing of the input views before patching; softens the
  // patch-misalignment sensitivity under viewpoint changes.
  float input_blur_sigma = 2.0f;
};

// Per-view spatial grid of d-dimensional features.
template <class T>
struct FeatureMapT {
  int h = 0, w = 0, d = 0;
  std::string view_id;
  std::vector<T> data;  // [i][j][d] row-major

  FeatureMapT() = default;
  FeatureMapT(int h_, int w_, int d_) : h(h_), w(w_), d(d_), data(static_cast<std::size_t>(h_) * w_ * d_, T(0)) {}

  T* cell(int i, int j) { return data.data() + (static_cast<std::size_t>(i) * w + j) * d; }
  const T* cell(int i, int j) const { return data.data() + (static_cast<std::size_t>(i) * w + j) * d; }

  template <class U>
  FeatureMapT<U> cast() const {
    FeatureMapT<U> out(h, w, d);
    out.view_id = view_id;
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using FeatureMap = FeatureMapT<float>;

template <class T>
struct ExtractorBlockT {
  AttnBlockT<T> attn;
  FfnBlockT<T> ffn;
  bool global = false;
};

// Alternating frame-wise / global self-attention over patch tokens. Weights
// are seeded at construction and stay frozen through every training phase.
template <class T>
struct ExtractorParamsT {
  ExtractorConfig cfg;
  std::uint64_t seed = 0;
  LinearT<T> patch_embed;  // (stride*stride*3) x d3
  std::vector<ExtractorBlockT<T>> blocks;

  static ExtractorParamsT make(const ExtractorConfig& cfg, std::uint64_t seed) {
    if (cfg.blocks % 2 != 0) throw std::invalid_argument("extractor: block count must be even");
    if (cfg.d3 % cfg.heads != 0) throw std::invalid_argument("extractor: d3 not divisible by heads");
    ExtractorParamsT p;
    p.cfg = cfg;
    p.seed = seed;
    p.patch_embed = LinearT<T>::make(static_cast<std::size_t>(cfg.stride) * cfg.stride * 3, cfg.d3,
                                     mix_seed(seed, 100));
    for (int b = 0; b < cfg.blocks; ++b) {
      ExtractorBlockT<T> blk;
      blk.attn = AttnBlockT<T>::make(cfg.d3, mix_seed(seed, 200 + b));
      blk.ffn = FfnBlockT<T>::make(cfg.d3, cfg.ffn_dim, mix_seed(seed, 300 + b));
      blk.global = b % 2 == 1;
      p.blocks.push_back(std::move(blk));
    }
    return p;
  }

  template <class U>
  ExtractorParamsT<U> cast() const {
    ExtractorParamsT<U> p;
    p.cfg = cfg;
    p.seed = seed;
    p.patch_embed = patch_embed.template cast<U>();
    for (const auto& b : blocks) {
      p.blocks.push_back({b.attn.template cast<U>(), b.ffn.template cast<U>(), b.global});
    }
    return p;
  }
};

using ExtractorParams = ExtractorParamsT<float>;

// Fixed 2D sinusoidal code for a (h x w) grid, identical for every view.
template <class T>
Tensor<T> sinusoidal_positions(int h, int w, int d) {
  Tensor<T> pe({static_cast<std::size_t>(h) * w, static_cast<std::size_t>(d)});
  const int quarters = d / 4;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      T* row = pe.data() + (static_cast<std::size_t>(i) * w + j) * d;
      for (int q = 0; q < quarters; ++q) {
        const double freq = std::pow(10000.0, -4.0 * q / d);
        row[4 * q + 0] = static_cast<T>(std::sin(j * freq));
        row[4 * q + 1] = static_cast<T>(std::cos(j * freq));
        row[4 * q + 2] = static_cast<T>(std::sin(i * freq));
        row[4 * q + 3] = static_cast<T>(std::cos(i * freq));
      }
    }
  }
  return pe;
}

// Flattens each stride x stride x 3 patch, embeds it to d3, adds the scaled
// position code. Input preprocessing (blur, standardization) happens in
// extract_dense_features.
template <class T>
Tensor<T> patch_tokens(const ImageView& view, const ExtractorParamsT<T>& params) {
  const int s = params.cfg.stride;
  if (view.width % s != 0 || view.height % s != 0) {
    throw std::invalid_argument("patch_tokens: image dimensions not divisible by stride");
  }
  const int h = view.height / s, w = view.width / s;
  const std::size_t pdim = static_cast<std::size_t>(s) * s * 3;
  Tensor<T> patches({static_cast<std::size_t>(h) * w, pdim});
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      T* row = patches.data() + (static_cast<std::size_t>(i) * w + j) * pdim;
      std::size_t t = 0;
      for (int dy = 0; dy < s; ++dy) {
        for (int dx = 0; dx < s; ++dx) {
          for (int c = 0; c < 3; ++c) row[t++] = static_cast<T>(view.at(i * s + dy, j * s + dx, c));
        }
      }
    }
  }
  Tensor<T> tokens = linear(patches, params.patch_embed);
  Tensor<T> pe = sinusoidal_positions<T>(h, w, params.cfg.d3);
  axpy_inplace(tokens, static_cast<T>(params.cfg.pe_scale), pe);
  return tokens;
}

// Frame-wise blocks attend within each view; global blocks attend over the
// concatenation of all views' tokens.
template <class T>
std::vector<FeatureMapT<T>> extract_dense_features(const std::vector<ImageView>& views,
                                                   const ExtractorParamsT<T>& params) {
  if (views.empty()) throw std::invalid_argument("extract_dense_features: no views");
  for (const auto& v : views) {
    if (v.width != views[0].width || v.height != views[0].height) {
      throw std::invalid_argument("extract_dense_features: view dimension mismatch");
    }
  }
  const int s = params.cfg.stride;
  const int h = views[0].height / s, w = views[0].width / s;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const std::size_t d = params.cfg.d3;
  const std::size_t vcount = views.size();

  Tensor<T> tokens({vcount * n, d});
  for (std::size_t v = 0; v < vcount; ++v) {
    ImageView prepped = views[v];
    if (params.cfg.input_blur_sigma > 0) prepped = blur_image(prepped, params.cfg.input_blur_sigma);
    if (params.cfg.input_standardize) prepped = standardize_image(prepped);
    Tensor<T> t = patch_tokens(prepped, params);
    std::copy(t.data(), t.data() + t.size(), tokens.data() + v * n * d);
  }

  const std::size_t heads = params.cfg.heads;
  for (const auto& blk : params.blocks) {
    if (blk.global || vcount == 1) {
      tokens = attn_block_self(tokens, blk.attn, heads);
    } else {
      for (std::size_t v = 0; v < vcount; ++v) {
        Tensor<T> slice({n, d});
        std::copy(tokens.data() + v * n * d, tokens.data() + (v + 1) * n * d, slice.data());
        slice = attn_block_self(slice, blk.attn, heads);
        std::copy(slice.data(), slice.data() + slice.size(), tokens.data() + v * n * d);
      }
    }
    tokens = ffn_block_forward(tokens, blk.ffn, static_cast<const AdapterT<T>*>(nullptr));
  }
  // Final per-token norm. Every cell feature then has identical L2 norm
  // sqrt(d3), so a cell's correlation with itself is maximal by construction.
  tokens = layer_norm(tokens, static_cast<T>(kLayerNormEps));

  std::vector<FeatureMapT<T>> maps;
  maps.reserve(vcount);
  for (std::size_t v = 0; v < vcount; ++v) {
    FeatureMapT<T> m(h, w, static_cast<int>(d));
    m.view_id = views[v].view_id;
    std::copy(tokens.data() + v * n * d, tokens.data() + (v + 1) * n * d, m.data.data());
    maps.push_back(std::move(m));
  }
  return maps;
}

// Feature-map file: magic "RBF1", u32 view_count, u32 h, u32 w, u32 d3, then
// little-endian float32 data per view.
void write_feature_maps(const std::string& path, const std::vector<FeatureMap>& maps);
std::vector<FeatureMap> read_feature_maps(const std::string& path);

// Checkpoint: JSON {format:"extractor-v1", seed, config, weights}.
void save_extractor(const std::string& path, const ExtractorParams& params);
ExtractorParams load_extractor(const std::string& path);

// Canonical byte serialization of the weights, used by the freeze guarantee.
std::string extractor_weight_bytes(const ExtractorParams& params);

}  // namespace georank
