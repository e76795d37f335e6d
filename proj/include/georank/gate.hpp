#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "georank/gradcheck.hpp"
#include "georank/ops.hpp"
#include "georank/retrieval.hpp"

namespace georank {

constexpr int kGatePositiveClass = 1;  // index 1 = "3D re-ranking helps"
constexpr float kLayerNormEps = 1e-5f;

// Two-layer projection over the query embedding: LN -> linear -> GELU -> linear.
template <class T>
struct GateParamsT {
  LinearT<T> hidden;  // d_2d x d_hidden
  LinearT<T> cls;     // d_hidden x 2

  std::size_t input_dim() const { return hidden.in(); }
  std::size_t hidden_dim() const { return hidden.out(); }

  static GateParamsT make(std::size_t d_2d, std::size_t d_hidden, std::uint64_t seed) {
    GateParamsT p;
    p.hidden = LinearT<T>::make(d_2d, d_hidden, mix_seed(seed, 1));
    p.cls = LinearT<T>::make(d_hidden, 2, mix_seed(seed, 2));
    return p;
  }

  template <class U>
  GateParamsT<U> cast() const {
    GateParamsT<U> p;
    p.hidden = hidden.template cast<U>();
    p.cls = cls.template cast<U>();
    return p;
  }
};

using GateParams = GateParamsT<float>;

template <class T>
struct GateGradsT {
  LinearGrads<T> hidden;
  LinearGrads<T> cls;

  static GateGradsT like(const GateParamsT<T>& p) {
    return GateGradsT{LinearGrads<T>::like(p.hidden), LinearGrads<T>::like(p.cls)};
  }
  void zero() {
    hidden.zero();
    cls.zero();
  }
};

template <class T>
struct GateCtx {
  LayerNormCtx<T> ln;
  LinearCtx<T> hidden;
  Tensor<T> pre_act;
  LinearCtx<T> cls;
};

template <class T>
Tensor<T> gate_forward(const Tensor<T>& q, const GateParamsT<T>& params, GateCtx<T>* ctx = nullptr) {
  if (q.cols() != params.input_dim()) throw std::invalid_argument("gate_forward: dim mismatch");
  Tensor<T> x = layer_norm(q, static_cast<T>(kLayerNormEps), ctx ? &ctx->ln : nullptr);
  x = linear(x, params.hidden, ctx ? &ctx->hidden : nullptr);
  if (ctx) ctx->pre_act = x;
  x = gelu(x);
  return linear(x, params.cls, ctx ? &ctx->cls : nullptr);
}

template <class T>
Tensor<T> gate_backward(const GateCtx<T>& ctx, const GateParamsT<T>& params, const Tensor<T>& glogits,
                        GateGradsT<T>* grads) {
  Tensor<T> g = linear_backward(ctx.cls, params.cls, glogits, grads ? &grads->cls : nullptr);
  g = gelu_backward(ctx.pre_act, g);
  g = linear_backward(ctx.hidden, params.hidden, g, grads ? &grads->hidden : nullptr);
  return layer_norm_backward(ctx.ln, g);
}

Tensorf gate_logits(const Embedding& q, const GateParams& params);

// Argmax decision; an exact tie keeps the cheap 2D-only path.
bool gate_decide(const Embedding& q, const GateParams& params);
bool gate_decide_logits(const Tensorf& logits);

// MRR-delta label: positive iff the reciprocal rank strictly improves.
struct GateLabel {
  std::string query_id;
  int y = 0;
  float rr_before = 0.f;
  float rr_after = 0.f;
};

GateLabel m3at_label(const Ranking& rank_2d, const Ranking& rank_3d, const std::string& true_class);

struct GateTrainConfig {
  float weight_negative = 1.f;
  float weight_positive = 4.f;
  float lr = 0.5f;
  int epochs = 2000;
  std::uint64_t seed = 1;
};

struct GateTrainResult {
  GateParams params;
  float final_loss = 0.f;
  bool single_class_warning = false;
  int positives = 0;
  int negatives = 0;
};

// Class c contributes w_c * (-log p_c); the batch loss is the mean over
// samples. Full-batch gradient descent, deterministic from the seed.
GateTrainResult train_gate(const std::vector<Embedding>& features,
                           const std::vector<GateLabel>& labels, const GateTrainConfig& cfg);

// Weighted cross-entropy over a logit batch (n x 2); fills dlogits if given.
template <class T>
double weighted_ce(const Tensor<T>& logits, const std::vector<int>& targets, T w_neg, T w_pos,
                   Tensor<T>* dlogits = nullptr) {
  const std::size_t n = logits.dim(0);
  if (targets.size() != n) throw std::invalid_argument("weighted_ce: label count mismatch");
  Tensor<T> probs = softmax(logits);
  if (dlogits) *dlogits = Tensor<T>({n, logits.dim(1)});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = targets[i];
    const T w = y == kGatePositiveClass ? w_pos : w_neg;
    const double p = std::max(static_cast<double>(probs.at(i, y)), 1e-30);
    loss += static_cast<double>(w) * -std::log(p);
    if (dlogits) {
      for (std::size_t c = 0; c < logits.dim(1); ++c) {
        const T target = c == static_cast<std::size_t>(y) ? T(1) : T(0);
        dlogits->at(i, c) = w * (probs.at(i, c) - target) / static_cast<T>(n);
      }
    }
  }
  return loss / static_cast<double>(n);
}

// Checkpoint: JSON {format:"gate-v1", d_2d, d_hidden, seed, weights, positive_class_index}.
void save_gate(const std::string& path, const GateParams& params, std::uint64_t seed);
GateParams load_gate(const std::string& path);

}  // namespace georank
