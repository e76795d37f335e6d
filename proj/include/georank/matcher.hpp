#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "georank/blocks.hpp"
#include "georank/extractor.hpp"
#include "georank/keypoints.hpp"
#include "georank/retrieval.hpp"

namespace georank {

struct MatcherConfig {
  int keypoints = 20;  // S
  int iterations = 2;
  int heads = 2;
  int d3 = 32;
  int stride = 4;
  int corr_window = 7;
  int adapter_dim = 8;  // d3 >= 256 would keep the reference 64
  int ffn_dim = 64;
  float alpha = 1.0f;
  float tau = 0.1f;               // candidate-softmax temperature for training
  float softargmax_temp = 0.05f;  // correlation soft-argmax temperature
  bool adapters_enabled = true;
};

// One predicted correspondence.
template <class T>
struct MatchT {
  Keypoint source;
  T px = T(0), py = T(0);   // predicted match in reference pixel coordinates
  T confidence = T(0.5);    // in [0,1]
};

template <class T>
struct MatchSetT {
  std::string candidate_id;
  std::vector<MatchT<T>> matches;  // exactly S entries
};

using Match = MatchT<float>;
using MatchSet = MatchSetT<float>;

struct CandidateScore {
  std::string candidate_id;
  float c_tilde = 0.f;  // mean confidence, in [0,1]
  std::vector<float> per_view;
};

// Point-match refinement transformer: one self and one cross block applied
// `iterations` times (weights shared across rounds), heads on the token
// features, coordinate and confidence heads on the final tokens. Heads start
// at zero so an untrained matcher degrades to raw soft-argmax with 0.5
// confidence, leaving the stage-1 order untouched.
template <class T>
struct MatcherParamsT {
  MatcherConfig cfg;
  std::uint64_t seed = 0;
  LinearT<T> token_init;  // (d3 + window^2) x d3
  AttnBlockT<T> self_attn;
  FfnBlockT<T> self_ffn;
  AdapterT<T> self_adapter;
  AttnBlockT<T> cross_attn;
  FfnBlockT<T> cross_ffn;
  AdapterT<T> cross_adapter;
  LinearT<T> coord_head;  // d3 x 2
  LinearT<T> conf_head;   // d3 x 1

  // Raw per-match descriptor: sampled feature, flattened correlation window
  // around the initial peak, then geometric fields (normalized by the image
  // extent): source position, peak position, offset, absolute offset, the
  // offset-consensus density across keypoints, and the offset relative to the
  // consensus with its absolute value. The density fields summarize how well
  // this match agrees with the dominant motion of the other keypoints.
  static constexpr std::size_t kPositionFields = 13;

  static std::size_t descriptor_dim(const MatcherConfig& cfg) {
    return static_cast<std::size_t>(cfg.d3) +
           static_cast<std::size_t>(cfg.corr_window) * cfg.corr_window + kPositionFields;
  }

  // The two heads read the refined token concatenated with the raw descriptor
  // (a skip past the frozen blocks, so window shape and offsets reach the
  // trainable layers undiluted).
  static MatcherParamsT make(const MatcherConfig& cfg, std::uint64_t seed) {
    if (cfg.d3 % cfg.heads != 0) throw std::invalid_argument("matcher: d3 not divisible by heads");
    MatcherParamsT p;
    p.cfg = cfg;
    p.seed = seed;
    p.token_init = LinearT<T>::make(descriptor_dim(cfg), cfg.d3, mix_seed(seed, 400));
    p.self_attn = AttnBlockT<T>::make(cfg.d3, mix_seed(seed, 401));
    p.self_ffn = FfnBlockT<T>::make(cfg.d3, cfg.ffn_dim, mix_seed(seed, 402));
    p.self_adapter =
        AdapterT<T>::make(cfg.d3, cfg.adapter_dim, cfg.d3, static_cast<T>(cfg.alpha), mix_seed(seed, 403));
    p.cross_attn = AttnBlockT<T>::make(cfg.d3, mix_seed(seed, 404));
    p.cross_ffn = FfnBlockT<T>::make(cfg.d3, cfg.ffn_dim, mix_seed(seed, 405));
    p.cross_adapter =
        AdapterT<T>::make(cfg.d3, cfg.adapter_dim, cfg.d3, static_cast<T>(cfg.alpha), mix_seed(seed, 406));
    p.coord_head = LinearT<T>::zeros(cfg.d3 + descriptor_dim(cfg), 2);
    p.conf_head = LinearT<T>::zeros(cfg.d3 + descriptor_dim(cfg), 1);
    return p;
  }

  template <class U>
  MatcherParamsT<U> cast() const {
    MatcherParamsT<U> p;
    p.cfg = cfg;
    p.seed = seed;
    p.token_init = token_init.template cast<U>();
    p.self_attn = self_attn.template cast<U>();
    p.self_ffn = self_ffn.template cast<U>();
    p.self_adapter = self_adapter.template cast<U>();
    p.cross_attn = cross_attn.template cast<U>();
    p.cross_ffn = cross_ffn.template cast<U>();
    p.cross_adapter = cross_adapter.template cast<U>();
    p.coord_head = coord_head.template cast<U>();
    p.conf_head = conf_head.template cast<U>();
    return p;
  }
};

using MatcherParams = MatcherParamsT<float>;

template <class T>
struct MatcherGradsT {
  AdapterGrads<T> self_adapter, cross_adapter;
  LinearGrads<T> coord_head, conf_head;

  static MatcherGradsT like(const MatcherParamsT<T>& p) {
    return {AdapterGrads<T>::like(p.self_adapter), AdapterGrads<T>::like(p.cross_adapter),
            LinearGrads<T>::like(p.coord_head), LinearGrads<T>::like(p.conf_head)};
  }
  void zero() {
    self_adapter.down.zero();
    self_adapter.up.zero();
    cross_adapter.down.zero();
    cross_adapter.up.zero();
    coord_head.zero();
    conf_head.zero();
  }
};

// Bilinear interpolation of the four surrounding cells; pixel coordinates are
// mapped to the grid by /stride and clamped at the borders.
template <class T>
std::vector<T> bilinear_sample(const FeatureMapT<T>& map, const Keypoint& point, int stride) {
  const double gx = static_cast<double>(point.x) / stride;
  const double gy = static_cast<double>(point.y) / stride;
  if (point.x < 0 || point.y < 0 || gx > map.w - 1 + 1e-9 || gy > map.h - 1 + 1e-9) {
    // A point inside the image maps inside [0, w-1] by construction; anything
    // else is a caller error.
    if (point.x < 0 || point.y < 0 || gx >= static_cast<double>(map.w) ||
        gy >= static_cast<double>(map.h)) {
      throw std::out_of_range("bilinear_sample: point outside feature map");
    }
  }
  const int x0 = std::min(static_cast<int>(gx), map.w - 1);
  const int y0 = std::min(static_cast<int>(gy), map.h - 1);
  const int x1 = std::min(x0 + 1, map.w - 1);
  const int y1 = std::min(y0 + 1, map.h - 1);
  const T fx = static_cast<T>(gx - x0);
  const T fy = static_cast<T>(gy - y0);
  const T* c00 = map.cell(y0, x0);
  const T* c01 = map.cell(y0, x1);
  const T* c10 = map.cell(y1, x0);
  const T* c11 = map.cell(y1, x1);
  std::vector<T> out(map.d);
  for (int c = 0; c < map.d; ++c) {
    const T top = c00[c] + fx * (c01[c] - c00[c]);
    const T bot = c10[c] + fx * (c11[c] - c10[c]);
    out[c] = top + fy * (bot - top);
  }
  return out;
}

// Raw correlation volume: inner product of the keypoint feature with every
// reference cell, no normalization.
template <class T>
Tensor<T> correlate(const std::vector<T>& kp_feature, const FeatureMapT<T>& reference) {
  if (static_cast<int>(kp_feature.size()) != reference.d) {
    throw std::invalid_argument("correlate: feature dim mismatch");
  }
  Tensor<T> out({static_cast<std::size_t>(reference.h), static_cast<std::size_t>(reference.w)});
  for (int i = 0; i < reference.h; ++i) {
    for (int j = 0; j < reference.w; ++j) {
      out.at(i, j) = dot(kp_feature.data(), reference.cell(i, j), kp_feature.size());
    }
  }
  return out;
}

// Soft-argmax of a correlation map in pixel coordinates (cell (i,j) sits at
// pixel (j*stride, i*stride)).
template <class T>
void soft_argmax(const Tensor<T>& corr, int stride, T temp, T* out_x, T* out_y) {
  const std::size_t n = corr.size();
  const T* v = corr.data();
  T m = v[0];
  for (std::size_t i = 1; i < n; ++i) m = v[i] > m ? v[i] : m;
  T sum = T(0);
  T sx = T(0), sy = T(0);
  const std::size_t w = corr.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const T e = static_cast<T>(std::exp(static_cast<double>((v[i] - m) / temp)));
    sum += e;
    sx += e * static_cast<T>((i % w) * stride);
    sy += e * static_cast<T>((i / w) * stride);
  }
  *out_x = sx / sum;
  *out_y = sy / sum;
}

template <class T>
struct RefineCtx {
  std::vector<AttnBlockCtx<T>> self_attn;
  std::vector<FfnBlockCtx<T>> self_ffn;
  std::vector<AttnBlockCtx<T>> cross_attn;
  std::vector<FfnBlockCtx<T>> cross_ffn;
  LinearCtx<T> coord, conf;
  Tensor<T> conf_logits;  // S x 1
};

// Full refinement pass: tokens from sampled features plus a flattened
// corr_window x corr_window correlation patch around the initial soft-argmax
// peak, `iterations` shared-weight rounds of self attention among the match
// tokens and cross attention into the reference cells, then the two heads.
template <class T>
MatchSetT<T> refine_matches(const std::vector<Tensor<T>>& correlations, const Tensor<T>& kp_features,
                            const std::vector<Keypoint>& sources, const FeatureMapT<T>& reference,
                            const MatcherParamsT<T>& params, RefineCtx<T>* ctx = nullptr) {
  const std::size_t S = correlations.size();
  if (S == 0 || kp_features.dim(0) != S || sources.size() != S) {
    throw std::invalid_argument("refine_matches: inconsistent inputs");
  }
  const int d3 = params.cfg.d3;
  const int win = params.cfg.corr_window;
  const int halo = win / 2;
  const T temp = static_cast<T>(params.cfg.softargmax_temp);
  const int stride = params.cfg.stride;

  const T extent_x = static_cast<T>(reference.w * stride);
  const T extent_y = static_cast<T>(reference.h * stride);
  std::vector<T> base_x(S), base_y(S);
  Tensor<T> init({S, MatcherParamsT<T>::descriptor_dim(params.cfg)});
  for (std::size_t j = 0; j < S; ++j) {
    const Tensor<T>& corr = correlations[j];
    if (corr.dim(0) != static_cast<std::size_t>(reference.h) ||
        corr.dim(1) != static_cast<std::size_t>(reference.w)) {
      throw std::invalid_argument("refine_matches: correlation shape mismatch");
    }
    soft_argmax(corr, stride, temp, &base_x[j], &base_y[j]);
    const int cj = std::min(std::max(static_cast<int>(std::lround(base_x[j] / stride)), 0),
                            reference.w - 1);
    const int ci = std::min(std::max(static_cast<int>(std::lround(base_y[j] / stride)), 0),
                            reference.h - 1);
    T* row = init.data() + j * init.dim(1);
    for (int c = 0; c < d3; ++c) row[c] = kp_features.at(j, c);
    std::size_t t = d3;
    for (int dy = -halo; dy <= halo; ++dy) {
      for (int dx = -halo; dx <= halo; ++dx) {
        const int yy = ci + dy, xx = cj + dx;
        row[t++] = (yy >= 0 && yy < reference.h && xx >= 0 && xx < reference.w)
                       ? corr.at(yy, xx)
                       : T(0);
      }
    }
    const T dx = (base_x[j] - static_cast<T>(sources[j].x)) / extent_x;
    const T dy = (base_y[j] - static_cast<T>(sources[j].y)) / extent_y;
    row[t++] = static_cast<T>(sources[j].x) / extent_x;
    row[t++] = static_cast<T>(sources[j].y) / extent_y;
    row[t++] = base_x[j] / extent_x;
    row[t++] = base_y[j] / extent_y;
    row[t++] = dx;
    row[t++] = dy;
    row[t++] = dx < T(0) ? -dx : dx;
    row[t++] = dy < T(0) ? -dy : dy;
  }

  // Offset-consensus fields: a Gaussian kernel density over the S offset
  // vectors (bandwidth 1.5 cells) and each offset's deviation from the
  // density-weighted mean offset.
  {
    const std::size_t fields_at = init.dim(1) - 5;
    std::vector<T> off_x(S), off_y(S), density(S);
    for (std::size_t j = 0; j < S; ++j) {
      off_x[j] = base_x[j] - static_cast<T>(sources[j].x);
      off_y[j] = base_y[j] - static_cast<T>(sources[j].y);
    }
    const T bw = static_cast<T>(1.5 * stride);
    T dens_sum = T(0);
    for (std::size_t j = 0; j < S; ++j) {
      T den = T(0);
      for (std::size_t k = 0; k < S; ++k) {
        const T ddx = off_x[j] - off_x[k];
        const T ddy = off_y[j] - off_y[k];
        den += static_cast<T>(std::exp(static_cast<double>(-(ddx * ddx + ddy * ddy) / (2 * bw * bw))));
      }
      density[j] = den / static_cast<T>(S);
      dens_sum += density[j];
    }
    T mean_x = T(0), mean_y = T(0);
    for (std::size_t j = 0; j < S; ++j) {
      mean_x += density[j] * off_x[j];
      mean_y += density[j] * off_y[j];
    }
    mean_x /= dens_sum;
    mean_y /= dens_sum;
    for (std::size_t j = 0; j < S; ++j) {
      T* row = init.data() + j * init.dim(1) + fields_at;
      const T rx = (off_x[j] - mean_x) / extent_x;
      const T ry = (off_y[j] - mean_y) / extent_y;
      row[0] = density[j];
      row[1] = rx;
      row[2] = ry;
      row[3] = rx < T(0) ? -rx : rx;
      row[4] = ry < T(0) ? -ry : ry;
    }
  }

  Tensor<T> tokens = linear(init, params.token_init);

  // Frozen reference side, projected once.
  Tensor<T> ref_tokens = Tensor<T>::from(
      {static_cast<std::size_t>(reference.h) * reference.w, static_cast<std::size_t>(d3)},
      reference.data);
  Tensor<T> ln_ref = layer_norm(ref_tokens, static_cast<T>(kLayerNormEps));
  Tensor<T> k_pre = linear(ln_ref, params.cross_attn.wk);
  Tensor<T> v_pre = linear(ln_ref, params.cross_attn.wv);

  const int iters = params.cfg.iterations;
  if (ctx) {
    ctx->self_attn.resize(iters);
    ctx->self_ffn.resize(iters);
    ctx->cross_attn.resize(iters);
    ctx->cross_ffn.resize(iters);
  }
  const AdapterT<T>* self_ad = params.cfg.adapters_enabled ? &params.self_adapter : nullptr;
  const AdapterT<T>* cross_ad = params.cfg.adapters_enabled ? &params.cross_adapter : nullptr;
  const std::size_t heads = params.cfg.heads;
  for (int it = 0; it < iters; ++it) {
    tokens = attn_block_self(tokens, params.self_attn, heads, ctx ? &ctx->self_attn[it] : nullptr);
    tokens = ffn_block_forward(tokens, params.self_ffn, self_ad, ctx ? &ctx->self_ffn[it] : nullptr);
    tokens = attn_block_cross_cached(tokens, k_pre, v_pre, params.cross_attn, heads,
                                     ctx ? &ctx->cross_attn[it] : nullptr);
    tokens =
        ffn_block_forward(tokens, params.cross_ffn, cross_ad, ctx ? &ctx->cross_ffn[it] : nullptr);
  }

  // Heads read [refined token ; raw descriptor].
  Tensor<T> head_in({S, static_cast<std::size_t>(d3) + init.dim(1)});
  for (std::size_t j = 0; j < S; ++j) {
    T* row = head_in.data() + j * head_in.dim(1);
    for (int c = 0; c < d3; ++c) row[c] = tokens.at(j, c);
    const T* irow = init.data() + j * init.dim(1);
    for (std::size_t c = 0; c < init.dim(1); ++c) row[d3 + c] = irow[c];
  }
  Tensor<T> offsets = linear(head_in, params.coord_head, ctx ? &ctx->coord : nullptr);
  Tensor<T> logits = linear(head_in, params.conf_head, ctx ? &ctx->conf : nullptr);
  if (ctx) ctx->conf_logits = logits;
  if (!logits.all_finite() || !offsets.all_finite()) {
    throw std::runtime_error("refine_matches: non-finite activations");
  }

  MatchSetT<T> out;
  out.matches.resize(S);
  for (std::size_t j = 0; j < S; ++j) {
    MatchT<T>& m = out.matches[j];
    m.source = sources[j];
    m.px = base_x[j] + offsets.at(j, 0);
    m.py = base_y[j] + offsets.at(j, 1);
    m.confidence = logistic(logits.at(j, 0));
  }
  return out;
}

// Backward for the trainable subset (adapters and the two heads). dconf is
// d(loss)/d(confidence_j); dcoord optionally injects a coordinate-level
// upstream gradient.
template <class T>
void refine_backward(const RefineCtx<T>& ctx, const MatcherParamsT<T>& params,
                     const std::vector<T>& dconf, const Tensor<T>* dcoord,
                     MatcherGradsT<T>* grads) {
  const std::size_t S = dconf.size();
  Tensor<T> dlogits({S, 1});
  for (std::size_t j = 0; j < S; ++j) {
    const T c = logistic(ctx.conf_logits.at(j, 0));
    dlogits.at(j, 0) = dconf[j] * c * (T(1) - c);
  }
  Tensor<T> dhead = linear_backward(ctx.conf, params.conf_head, dlogits, grads ? &grads->conf_head : nullptr);
  if (dcoord) {
    Tensor<T> d2 = linear_backward(ctx.coord, params.coord_head, *dcoord,
                                   grads ? &grads->coord_head : nullptr);
    add_inplace(dhead, d2);
  }
  // Only the refined-token slice of the head input continues upstream; the
  // raw descriptor side is frozen.
  const std::size_t d3 = params.cfg.d3;
  Tensor<T> dtokens({S, d3});
  for (std::size_t j = 0; j < S; ++j) {
    for (std::size_t c = 0; c < d3; ++c) dtokens.at(j, c) = dhead.at(j, c);
  }
  const AdapterT<T>* self_ad = params.cfg.adapters_enabled ? &params.self_adapter : nullptr;
  const AdapterT<T>* cross_ad = params.cfg.adapters_enabled ? &params.cross_adapter : nullptr;
  const std::size_t heads = params.cfg.heads;
  FfnBlockGrads<T>* const no_ffn_grads = nullptr;
  AttnBlockGrads<T>* const no_attn_grads = nullptr;
  for (int it = params.cfg.iterations - 1; it >= 0; --it) {
    dtokens = ffn_block_backward(ctx.cross_ffn[it], params.cross_ffn, cross_ad, dtokens,
                                 no_ffn_grads, grads ? &grads->cross_adapter : nullptr);
    dtokens = attn_block_backward(ctx.cross_attn[it], params.cross_attn, heads, dtokens, no_attn_grads);
    dtokens = ffn_block_backward(ctx.self_ffn[it], params.self_ffn, self_ad, dtokens, no_ffn_grads,
                                 grads ? &grads->self_adapter : nullptr);
    dtokens = attn_block_backward(ctx.self_attn[it], params.self_attn, heads, dtokens, no_attn_grads);
  }
  // Token init and everything upstream is frozen.
}

CandidateScore similarity_score(const MatchSet& matches);
CandidateScore multiview_score(const std::vector<CandidateScore>& per_view);

// Reorders the top-K block by c_tilde (stable on ties), keeps the tail.
Ranking rerank(const Ranking& stage1, const std::vector<CandidateScore>& scores, std::size_t k);

// One query view scored against one reference view. Keypoints are detected on
// the query view by the caller (they do not depend on the candidate).
template <class T>
MatchSetT<T> score_pair(const ImageView& query_view, const ImageView& reference_view,
                        const std::vector<Keypoint>& keypoints, const ExtractorParamsT<T>& extractor,
                        const MatcherParamsT<T>& matcher, RefineCtx<T>* ctx = nullptr) {
  std::vector<FeatureMapT<T>> maps = extract_dense_features<T>({query_view, reference_view}, extractor);
  const FeatureMapT<T>& fq = maps[0];
  const FeatureMapT<T>& fr = maps[1];
  const std::size_t S = keypoints.size();
  Tensor<T> kp_feats({S, static_cast<std::size_t>(fq.d)});
  std::vector<Tensor<T>> corrs;
  corrs.reserve(S);
  for (std::size_t j = 0; j < S; ++j) {
    std::vector<T> f = bilinear_sample(fq, keypoints[j], matcher.cfg.stride);
    for (int c = 0; c < fq.d; ++c) kp_feats.at(j, c) = f[c];
    corrs.push_back(correlate(f, fr));
  }
  return refine_matches(corrs, kp_feats, keypoints, fr, matcher, ctx);
}

struct MatcherTrainConfig {
  int epochs = 4;
  float lr = 0.05f;
  float tau = 0.1f;
  int k_pool = 16;
  std::uint64_t seed = 7;
};

struct TrainQuery {
  std::string query_id;
  std::string true_class;
  std::vector<ImageView> views;
};

struct MatcherTrainResult {
  MatcherParams params;
  int used_queries = 0;
  int skipped_queries = 0;
  int steps = 0;
  double final_epoch_loss = 0.0;
};

// Adapter and head training: one positive (highest-ranked correct candidate in
// the stage-1 top-K) against the three top-ranked incorrect candidates,
// cross-entropy over the four scores at temperature tau. Queries without a
// correct candidate or with fewer than three incorrect candidates in the pool
// are skipped and counted. Extractor and base matcher weights stay frozen.
MatcherTrainResult train_matcher_adapters(const std::vector<TrainQuery>& queries,
                                          const std::vector<Ranking>& stage1_rankings,
                                          const std::map<std::string, ImageView>& gallery_views,
                                          const ExtractorParams& extractor, MatcherParams params,
                                          const MatcherTrainConfig& cfg);

// Checkpoint: JSON {format:"matcher-v1", seed, config, weights}.
void save_matcher(const std::string& path, const MatcherParams& params);
MatcherParams load_matcher(const std::string& path);

}  // namespace georank
