#pragma once

#include <cstdint>

#include "georank/gate.hpp"
#include "georank/ops.hpp"

namespace georank {

// Pre-norm transformer sublayers shared by the dense-feature extractor and
// the keypoint matcher. Attention sublayer:
//   y = x_q + Wo * attention(Wq LN(x_q), Wk LN(x_kv), Wv LN(x_kv))
// Feed-forward sublayer (optionally with a bottleneck adapter branch):
//   ln = LN(x)
//   y  = fc2(GELU(fc1(ln))) + alpha * up(GELU(down(ln))) + x

template <class T>
struct AttnBlockT {
  LinearT<T> wq, wk, wv, wo;

  static AttnBlockT make(std::size_t d, std::uint64_t seed) {
    AttnBlockT b;
    b.wq = LinearT<T>::make(d, d, mix_seed(seed, 11));
    b.wk = LinearT<T>::make(d, d, mix_seed(seed, 12));
    b.wv = LinearT<T>::make(d, d, mix_seed(seed, 13));
    b.wo = LinearT<T>::make(d, d, mix_seed(seed, 14));
    return b;
  }

  template <class U>
  AttnBlockT<U> cast() const {
    AttnBlockT<U> b;
    b.wq = wq.template cast<U>();
    b.wk = wk.template cast<U>();
    b.wv = wv.template cast<U>();
    b.wo = wo.template cast<U>();
    return b;
  }
};

template <class T>
struct AttnBlockGrads {
  LinearGrads<T> wq, wk, wv, wo;
  static AttnBlockGrads like(const AttnBlockT<T>& p) {
    return {LinearGrads<T>::like(p.wq), LinearGrads<T>::like(p.wk), LinearGrads<T>::like(p.wv),
            LinearGrads<T>::like(p.wo)};
  }
};

template <class T>
struct AttnBlockCtx {
  LayerNormCtx<T> ln_q, ln_kv;
  LinearCtx<T> q_proj, k_proj, v_proj, o_proj;
  AttentionCtx<T> attn;
  bool self = true;
  bool cached_kv = false;
};

// Self-attention over one token set.
template <class T>
Tensor<T> attn_block_self(const Tensor<T>& x, const AttnBlockT<T>& p, std::size_t heads,
                          AttnBlockCtx<T>* ctx = nullptr) {
  Tensor<T> ln = layer_norm(x, static_cast<T>(kLayerNormEps), ctx ? &ctx->ln_q : nullptr);
  Tensor<T> q = linear(ln, p.wq, ctx ? &ctx->q_proj : nullptr);
  Tensor<T> k = linear(ln, p.wk, ctx ? &ctx->k_proj : nullptr);
  Tensor<T> v = linear(ln, p.wv, ctx ? &ctx->v_proj : nullptr);
  Tensor<T> a = attention(q, k, v, heads, ctx ? &ctx->attn : nullptr);
  Tensor<T> o = linear(a, p.wo, ctx ? &ctx->o_proj : nullptr);
  if (ctx) {
    ctx->self = true;
    ctx->cached_kv = false;
  }
  add_inplace(o, x);
  return o;
}

// Cross-attention against pre-projected keys/values (frozen context side).
template <class T>
Tensor<T> attn_block_cross_cached(const Tensor<T>& x_q, const Tensor<T>& k_pre,
                                  const Tensor<T>& v_pre, const AttnBlockT<T>& p, std::size_t heads,
                                  AttnBlockCtx<T>* ctx = nullptr) {
  Tensor<T> ln = layer_norm(x_q, static_cast<T>(kLayerNormEps), ctx ? &ctx->ln_q : nullptr);
  Tensor<T> q = linear(ln, p.wq, ctx ? &ctx->q_proj : nullptr);
  Tensor<T> a = attention(q, k_pre, v_pre, heads, ctx ? &ctx->attn : nullptr);
  Tensor<T> o = linear(a, p.wo, ctx ? &ctx->o_proj : nullptr);
  if (ctx) {
    ctx->self = false;
    ctx->cached_kv = true;
  }
  add_inplace(o, x_q);
  return o;
}

// Returns grad wrt x (query side). Parameter grads are accumulated when a
// grads struct is supplied; dK/dV of a cached cross block are discarded.
template <class T>
Tensor<T> attn_block_backward(const AttnBlockCtx<T>& ctx, const AttnBlockT<T>& p, std::size_t heads,
                              const Tensor<T>& gy, AttnBlockGrads<T>* grads = nullptr) {
  (void)heads;
  Tensor<T> ga = linear_backward(ctx.o_proj, p.wo, gy, grads ? &grads->wo : nullptr);
  Tensor<T> gq, gk, gv;
  attention_backward(ctx.attn, ga, &gq, ctx.cached_kv ? nullptr : &gk,
                     ctx.cached_kv ? nullptr : &gv);
  Tensor<T> gln = linear_backward(ctx.q_proj, p.wq, gq, grads ? &grads->wq : nullptr);
  if (!ctx.cached_kv) {
    Tensor<T> gk_in = linear_backward(ctx.k_proj, p.wk, gk, grads ? &grads->wk : nullptr);
    Tensor<T> gv_in = linear_backward(ctx.v_proj, p.wv, gv, grads ? &grads->wv : nullptr);
    add_inplace(gln, gk_in);
    add_inplace(gln, gv_in);
  }
  Tensor<T> gx = layer_norm_backward(ctx.ln_q, gln);
  add_inplace(gx, gy);
  return gx;
}

template <class T>
struct AdapterT {
  LinearT<T> down;  // d x d_bottleneck
  LinearT<T> up;    // d_bottleneck x d'
  T alpha = T(1);

  // The bottleneck branch is a pure pair of projections (no biases).
  static AdapterT make(std::size_t d, std::size_t bottleneck, std::size_t d_out, T alpha,
                       std::uint64_t seed) {
    AdapterT a;
    a.down = LinearT<T>::make(d, bottleneck, mix_seed(seed, 21), /*bias=*/false);
    a.up = LinearT<T>::make(bottleneck, d_out, mix_seed(seed, 22), /*bias=*/false);
    a.alpha = alpha;
    return a;
  }

  template <class U>
  AdapterT<U> cast() const {
    AdapterT<U> a;
    a.down = down.template cast<U>();
    a.up = up.template cast<U>();
    a.alpha = static_cast<U>(alpha);
    return a;
  }
};

template <class T>
struct AdapterGrads {
  LinearGrads<T> down, up;
  static AdapterGrads like(const AdapterT<T>& p) {
    return {LinearGrads<T>::like(p.down), LinearGrads<T>::like(p.up)};
  }
};

template <class T>
struct FfnBlockT {
  LinearT<T> fc1, fc2;

  static FfnBlockT make(std::size_t d, std::size_t hidden, std::uint64_t seed) {
    FfnBlockT f;
    f.fc1 = LinearT<T>::make(d, hidden, mix_seed(seed, 31));
    f.fc2 = LinearT<T>::make(hidden, d, mix_seed(seed, 32));
    return f;
  }

  template <class U>
  FfnBlockT<U> cast() const {
    FfnBlockT<U> f;
    f.fc1 = fc1.template cast<U>();
    f.fc2 = fc2.template cast<U>();
    return f;
  }
};

template <class T>
struct FfnBlockGrads {
  LinearGrads<T> fc1, fc2;
  static FfnBlockGrads like(const FfnBlockT<T>& p) {
    return {LinearGrads<T>::like(p.fc1), LinearGrads<T>::like(p.fc2)};
  }
};

template <class T>
struct FfnBlockCtx {
  LayerNormCtx<T> ln;
  LinearCtx<T> fc1;
  Tensor<T> fc1_pre;
  LinearCtx<T> fc2;
  LinearCtx<T> down;
  Tensor<T> down_pre;
  LinearCtx<T> up;
  bool has_adapter = false;
};

// Feed-forward sublayer; `adapter` may be null.
template <class T>
Tensor<T> ffn_block_forward(const Tensor<T>& x, const FfnBlockT<T>& p, const AdapterT<T>* adapter,
                            FfnBlockCtx<T>* ctx = nullptr) {
  Tensor<T> ln = layer_norm(x, static_cast<T>(kLayerNormEps), ctx ? &ctx->ln : nullptr);
  Tensor<T> h = linear(ln, p.fc1, ctx ? &ctx->fc1 : nullptr);
  if (ctx) ctx->fc1_pre = h;
  h = gelu(h);
  Tensor<T> y = linear(h, p.fc2, ctx ? &ctx->fc2 : nullptr);
  if (adapter) {
    Tensor<T> a = linear(ln, adapter->down, ctx ? &ctx->down : nullptr);
    if (ctx) ctx->down_pre = a;
    a = gelu(a);
    a = linear(a, adapter->up, ctx ? &ctx->up : nullptr);
    axpy_inplace(y, adapter->alpha, a);
  }
  if (ctx) ctx->has_adapter = adapter != nullptr;
  add_inplace(y, x);
  return y;
}

template <class T>
Tensor<T> ffn_block_backward(const FfnBlockCtx<T>& ctx, const FfnBlockT<T>& p,
                             const AdapterT<T>* adapter, const Tensor<T>& gy,
                             FfnBlockGrads<T>* grads = nullptr,
                             AdapterGrads<T>* adapter_grads = nullptr) {
  Tensor<T> gh = linear_backward(ctx.fc2, p.fc2, gy, grads ? &grads->fc2 : nullptr);
  gh = gelu_backward(ctx.fc1_pre, gh);
  Tensor<T> gln = linear_backward(ctx.fc1, p.fc1, gh, grads ? &grads->fc1 : nullptr);
  if (adapter && ctx.has_adapter) {
    Tensor<T> ga = gy;
    scale_inplace(ga, adapter->alpha);
    ga = linear_backward(ctx.up, adapter->up, ga, adapter_grads ? &adapter_grads->up : nullptr);
    ga = gelu_backward(ctx.down_pre, ga);
    ga = linear_backward(ctx.down, adapter->down, ga,
                         adapter_grads ? &adapter_grads->down : nullptr);
    add_inplace(gln, ga);
  }
  Tensor<T> gx = layer_norm_backward(ctx.ln, gln);
  add_inplace(gx, gy);
  return gx;
}

// The two-path adapter composition on a single feature vector, exposed for
// direct use and testing: FFN(LN(x')) + alpha * up(GELU(LN(x') down)) + x'.
template <class T>
Tensor<T> adapter_forward(const Tensor<T>& x_prime, const FfnBlockT<T>& base_ffn,
                          const AdapterT<T>& adapter) {
  if (x_prime.cols() != base_ffn.fc1.in() || x_prime.cols() != adapter.down.in()) {
    throw std::invalid_argument("adapter_forward: dim mismatch");
  }
  return ffn_block_forward(x_prime, base_ffn, &adapter);
}

}  // namespace georank
