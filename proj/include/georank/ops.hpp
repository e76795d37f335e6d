#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "georank/rng.hpp"
#include "georank/tensor.hpp"

namespace georank {

// Error function via Cody's rational Chebyshev approximation (W. J. Cody,
// Math. Comp. 23, 1969; the netlib CALERF kernels). Self-contained so results
// do not depend on the platform's libm. |error| well below 1e-7.
inline double erf_cody(double x) {
  static const double kA[5] = {3.16112374387056560e+00, 1.13864154151050156e+02,
                               3.77485237685302021e+02, 3.20937758913846947e+03,
                               1.85777706184603153e-01};
  static const double kB[4] = {2.36012909523441209e+01, 2.44024637934444173e+02,
                               1.28261652607737228e+03, 2.84423683343917062e+03};
  static const double kC[9] = {5.64188496988670089e-01, 8.88314979438837594e+00,
                               6.61191906371416295e+01, 2.98635138197400131e+02,
                               8.81952221241769090e+02, 1.71204761263407058e+03,
                               2.05107837782607147e+03, 1.23033935479799725e+03,
                               2.15311535474403846e-08};
  static const double kD[8] = {1.57449261107098347e+01, 1.17693950891312499e+02,
                               5.37181101862009858e+02, 1.62138957456669019e+03,
                               3.29079923573345963e+03, 4.36261909014324716e+03,
                               3.43936767414372164e+03, 1.23033935480374942e+03};
  static const double kP[6] = {3.05326634961232344e-01, 3.60344899949804439e-01,
                               1.25781726111229246e-01, 1.60837851487422766e-02,
                               6.58749161529837803e-04, 1.63153871373020978e-02};
  static const double kQ[5] = {2.56852019228982242e+00, 1.87295284992346047e+00,
                               5.27905102951428412e-01, 6.05183413124413191e-02,
                               2.33520497626869185e-03};
  const double y = std::fabs(x);
  if (y <= 0.46875) {
    const double z = y > 1.11e-16 ? y * y : 0.0;
    double num = kA[4] * z;
    double den = z;
    for (int i = 0; i < 3; ++i) {
      num = (num + kA[i]) * z;
      den = (den + kB[i]) * z;
    }
    return x * (num + kA[3]) / (den + kB[3]);
  }
  double result;
  if (y <= 4.0) {
    double num = kC[8] * y;
    double den = y;
    for (int i = 0; i < 7; ++i) {
      num = (num + kC[i]) * y;
      den = (den + kD[i]) * y;
    }
    result = (num + kC[7]) / (den + kD[7]);
  } else {
    const double z = 1.0 / (y * y);
    double num = kP[5] * z;
    double den = z;
    for (int i = 0; i < 4; ++i) {
      num = (num + kP[i]) * z;
      den = (den + kQ[i]) * z;
    }
    result = z * (num + kP[4]) / (den + kQ[4]);
    result = (5.6418958354775628695e-01 - result) / y;
  }
  // erfc(y) = exp(-y^2) * result, split for accuracy.
  const double ysq = std::floor(y * 16.0) / 16.0;
  const double del = (y - ysq) * (y + ysq);
  const double erfc_y = std::exp(-ysq * ysq) * std::exp(-del) * result;
  return x >= 0.0 ? 1.0 - erfc_y : erfc_y - 1.0;
}

// Standard normal CDF.
inline double phi_cdf(double x) { return 0.5 * (1.0 + erf_cody(x * 0.7071067811865476)); }

// Standard normal PDF.
inline double phi_pdf(double x) { return 0.3989422804014327 * std::exp(-0.5 * x * x); }

// Exact Gaussian-CDF GELU, x * Phi(x).
template <class T>
inline T gelu(T x) {
  return static_cast<T>(static_cast<double>(x) * phi_cdf(static_cast<double>(x)));
}

// d/dx gelu(x) = Phi(x) + x * phi(x)
template <class T>
inline T gelu_grad(T x) {
  const double xd = static_cast<double>(x);
  return static_cast<T>(phi_cdf(xd) + xd * phi_pdf(xd));
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = gelu(y[i]);
  return y;
}

template <class T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
  Tensor<T> gx = x;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gelu_grad(x[i]) * gy[i];
  return gx;
}

template <class T>
inline T logistic(T x) {
  return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension (rows of a matrix, or a whole vector).
// No learned affine by default; optional scale/shift handled by callers that
// enable it.

template <class T>
struct LayerNormCtx {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps, LayerNormCtx<T>* ctx = nullptr) {
  if (x.empty()) throw std::invalid_argument("layer_norm: empty input");
  const std::size_t d = x.cols();
  const std::size_t n = x.size() / d;
  Tensor<T> y = x;
  if (ctx) ctx->inv_std.assign(n, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    T* row = y.data() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv;
    if (ctx) ctx->inv_std[r] = inv;
  }
  if (ctx) ctx->xhat = y;
  return y;
}

template <class T>
Tensor<T> layer_norm_backward(const LayerNormCtx<T>& ctx, const Tensor<T>& gy) {
  const Tensor<T>& xhat = ctx.xhat;
  if (!xhat.same_shape(gy)) throw std::invalid_argument("layer_norm_backward: shape mismatch");
  const std::size_t d = xhat.cols();
  const std::size_t n = xhat.size() / d;
  Tensor<T> gx = gy;
  for (std::size_t r = 0; r < n; ++r) {
    const T* h = xhat.data() + r * d;
    const T* g = gy.data() + r * d;
    T* o = gx.data() + r * d;
    T mg = T(0), mgh = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      mg += g[j];
      mgh += g[j] * h[j];
    }
    mg /= static_cast<T>(d);
    mgh /= static_cast<T>(d);
    const T inv = ctx.inv_std[r];
    for (std::size_t j = 0; j < d; ++j) o[j] = inv * (g[j] - mg - h[j] * mgh);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Numerically stable softmax (max subtraction).

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.empty()) throw std::invalid_argument("softmax: empty input");
  const std::size_t d = x.cols();
  const std::size_t n = x.size() / d;
  Tensor<T> y = x;
  for (std::size_t r = 0; r < n; ++r) {
    T* row = y.data() + r * d;
    T m = row[0];
    for (std::size_t j = 1; j < d; ++j) m = row[j] > m ? row[j] : m;
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - m)));
      s += row[j];
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < d; ++j) row[j] *= inv;
  }
  return y;
}

// gx = p .* (gy - <gy, p>) per row, with p the softmax output.
template <class T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& gy) {
  if (!probs.same_shape(gy)) throw std::invalid_argument("softmax_backward: shape mismatch");
  const std::size_t d = probs.cols();
  const std::size_t n = probs.size() / d;
  Tensor<T> gx = gy;
  for (std::size_t r = 0; r < n; ++r) {
    const T* p = probs.data() + r * d;
    const T* g = gy.data() + r * d;
    T* o = gx.data() + r * d;
    T acc = T(0);
    for (std::size_t j = 0; j < d; ++j) acc += g[j] * p[j];
    for (std::size_t j = 0; j < d; ++j) o[j] = p[j] * (g[j] - acc);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Linear layer y = x W + b, with explicit backward.

template <class T>
struct LinearT {
  Tensor<T> w;  // in x out
  Tensor<T> b;  // out (empty when bias disabled)

  std::size_t in() const { return w.dim(0); }
  std::size_t out() const { return w.dim(1); }
  bool has_bias() const { return !b.empty(); }

  static LinearT make(std::size_t in, std::size_t out, std::uint64_t seed, bool bias = true) {
    LinearT p;
    p.w = Tensor<T>({in, out});
    SplitMix64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < p.w.size(); ++i) {
      p.w[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    if (bias) p.b = Tensor<T>({out}, T(0));
    return p;
  }

  static LinearT zeros(std::size_t in, std::size_t out, bool bias = true) {
    LinearT p;
    p.w = Tensor<T>({in, out});
    if (bias) p.b = Tensor<T>({out}, T(0));
    return p;
  }

  template <class U>
  LinearT<U> cast() const {
    LinearT<U> p;
    p.w = w.template cast<U>();
    if (has_bias()) p.b = b.template cast<U>();
    return p;
  }
};

template <class T>
struct LinearGrads {
  Tensor<T> w;
  Tensor<T> b;

  static LinearGrads like(const LinearT<T>& p) {
    LinearGrads g;
    g.w = Tensor<T>(p.w.shape(), T(0));
    if (p.has_bias()) g.b = Tensor<T>(p.b.shape(), T(0));
    return g;
  }
  void zero() {
    w.fill(T(0));
    if (!b.empty()) b.fill(T(0));
  }
};

template <class T>
struct LinearCtx {
  Tensor<T> x;
};

template <class T>
Tensor<T> linear(const Tensor<T>& x, const LinearT<T>& p, LinearCtx<T>* ctx = nullptr) {
  const std::size_t d = x.cols();
  if (d != p.in()) throw std::invalid_argument("linear: input dim mismatch");
  const std::size_t n = x.size() / d;
  Tensor<T> y({n, p.out()});
  if (p.has_bias()) {
    for (std::size_t r = 0; r < n; ++r) {
      T* row = y.data() + r * p.out();
      for (std::size_t j = 0; j < p.out(); ++j) row[j] = p.b[j];
    }
  }
  matmul_acc(x.data(), p.w.data(), y.data(), n, d, p.out());
  if (ctx) {
    ctx->x = x;
    if (ctx->x.rank() == 1) ctx->x = Tensor<T>::from({1, d}, ctx->x.values());
  }
  if (x.rank() == 1) return Tensor<T>::from({p.out()}, y.values());
  return y;
}

// Returns grad wrt x; accumulates parameter grads (supports weight sharing).
template <class T>
Tensor<T> linear_backward(const LinearCtx<T>& ctx, const LinearT<T>& p, const Tensor<T>& gy,
                          LinearGrads<T>* grads) {
  Tensor<T> g = gy;
  if (g.rank() == 1) g = Tensor<T>::from({1, gy.size()}, g.values());
  if (grads) {
    Tensor<T> gw = matmul_tn(ctx.x, g);
    add_inplace(grads->w, gw);
    if (!grads->b.empty()) {
      for (std::size_t r = 0; r < g.dim(0); ++r) {
        for (std::size_t j = 0; j < g.dim(1); ++j) grads->b[j] += g.at(r, j);
      }
    }
  }
  Tensor<T> gx = matmul_nt(g, p.w);
  if (gy.rank() == 1) return Tensor<T>::from({p.in()}, gx.values());
  return gx;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention on already-projected matrices.
// queries: (n_q x d), keys/values: (n_k x d); d divisible by heads.

template <class T>
struct AttentionCtx {
  Tensor<T> q, k, v;
  std::vector<Tensor<T>> probs;  // per head, n_q x n_k
  std::size_t heads = 1;
};

template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    AttentionCtx<T>* ctx = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument("attention: rank-2 inputs required");
  }
  const std::size_t d = q.dim(1);
  if (heads == 0 || d % heads != 0 || k.dim(1) != d || v.dim(1) != d || k.dim(0) != v.dim(0)) {
    throw std::invalid_argument("attention: dimension mismatch");
  }
  const std::size_t nq = q.dim(0), nk = k.dim(0), dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> out({nq, d});
  if (ctx) {
    ctx->q = q;
    ctx->k = k;
    ctx->v = v;
    ctx->heads = heads;
    ctx->probs.assign(heads, Tensor<T>());
  }
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    Tensor<T> scores({nq, nk});
    for (std::size_t i = 0; i < nq; ++i) {
      const T* qrow = q.data() + i * d + off;
      for (std::size_t j = 0; j < nk; ++j) {
        scores.at(i, j) = dot(qrow, k.data() + j * d + off, dh) * scale;
      }
    }
    Tensor<T> probs = softmax(scores);
    for (std::size_t i = 0; i < nq; ++i) {
      T* orow = out.data() + i * d + off;
      const T* prow = probs.data() + i * nk;
      for (std::size_t j = 0; j < nk; ++j) {
        const T pv = prow[j];
        const T* vrow = v.data() + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += pv * vrow[c];
      }
    }
    if (ctx) ctx->probs[h] = std::move(probs);
  }
  return out;
}

template <class T>
void attention_backward(const AttentionCtx<T>& ctx, const Tensor<T>& gout, Tensor<T>* gq,
                        Tensor<T>* gk, Tensor<T>* gv) {
  const std::size_t d = ctx.q.dim(1);
  const std::size_t nq = ctx.q.dim(0), nk = ctx.k.dim(0);
  const std::size_t heads = ctx.heads, dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  if (gq) *gq = Tensor<T>({nq, d});
  if (gk) *gk = Tensor<T>({nk, d});
  if (gv) *gv = Tensor<T>({nk, d});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    const Tensor<T>& probs = ctx.probs[h];
    // dV and dP
    Tensor<T> dp({nq, nk});
    for (std::size_t i = 0; i < nq; ++i) {
      const T* grow = gout.data() + i * d + off;
      const T* prow = probs.data() + i * nk;
      for (std::size_t j = 0; j < nk; ++j) {
        const T* vrow = ctx.v.data() + j * d + off;
        dp.at(i, j) = dot(grow, vrow, dh);
        if (gv) {
          T* gvrow = gv->data() + j * d + off;
          const T pv = prow[j];
          for (std::size_t c = 0; c < dh; ++c) gvrow[c] += pv * grow[c];
        }
      }
    }
    // dScores via softmax backward, then dQ, dK
    Tensor<T> ds = softmax_backward(probs, dp);
    for (std::size_t i = 0; i < nq; ++i) {
      const T* dsrow = ds.data() + i * nk;
      T* gqrow = gq ? gq->data() + i * d + off : nullptr;
      const T* qrow = ctx.q.data() + i * d + off;
      for (std::size_t j = 0; j < nk; ++j) {
        const T sv = dsrow[j] * scale;
        const T* krow = ctx.k.data() + j * d + off;
        if (gqrow) {
          for (std::size_t c = 0; c < dh; ++c) gqrow[c] += sv * krow[c];
        }
        if (gk) {
          T* gkrow = gk->data() + j * d + off;
          for (std::size_t c = 0; c < dh; ++c) gkrow[c] += sv * qrow[c];
        }
      }
    }
  }
}

}  // namespace georank
