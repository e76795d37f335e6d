#include <doctest.h>

#include <cmath>

#include "georank/gate.hpp"
#include "georank/gradcheck.hpp"
#include "georank/ops.hpp"
#include "georank/optim.hpp"
#include "georank/rng.hpp"
#include "georank/tensor.hpp"

using namespace georank;

namespace {

// Independent high-precision erf: Maclaurin series for small arguments and the
// asymptotic complement beyond. Test-only oracle for the rational kernel.
double erf_series(double x) {
  const double ax = std::fabs(x);
  if (ax < 4.0) {
    double term = ax;
    double sum = ax;
    for (int n = 1; n < 200; ++n) {
      term *= -ax * ax / n;
      const double add = term / (2 * n + 1);
      sum += add;
      if (std::fabs(add) < 1e-18 * std::fabs(sum)) break;
    }
    const double r = sum * 2.0 / std::sqrt(3.141592653589793);
    return x < 0 ? -r : r;
  }
  double acc = 1.0, term = 1.0;
  for (int k = 1; k <= 8; ++k) {
    term *= -(2 * k - 1) / (2.0 * ax * ax);
    acc += term;
  }
  const double erfc_val = std::exp(-ax * ax) / (ax * std::sqrt(3.141592653589793)) * acc;
  return x < 0 ? erfc_val - 1.0 : 1.0 - erfc_val;
}

Tensorf random_tensor(std::vector<std::size_t> shape, SplitMix64& rng, double lo = -1, double hi = 1) {
  Tensorf t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("erf kernel matches independent series oracle") {
  for (double x = -6.0; x <= 6.0; x += 0.037) {
    CHECK(std::fabs(erf_cody(x) - erf_series(x)) < 1e-7);
  }
  CHECK(erf_cody(0.0) == doctest::Approx(0.0));
  CHECK(std::fabs(erf_cody(1.0) - 0.8427007929497149) < 1e-9);
  CHECK(std::fabs(erf_cody(0.5) - 0.5204998778130465) < 1e-9);
  CHECK(std::fabs(erf_cody(2.0) - 0.9953222650189527) < 1e-9);
}

TEST_CASE("gelu exact values") {
  CHECK(gelu(0.f) == 0.f);
  CHECK(std::fabs(gelu(10.0) - 10.0) < 1e-6);
  // x * Phi(x) at x=1 with Phi(1) from the high-precision oracle
  const double phi1 = 0.5 * (1.0 + erf_series(1.0 / std::sqrt(2.0)));
  CHECK(std::fabs(phi1 - 0.8413447460685429) < 1e-12);
  CHECK(std::fabs(gelu(1.0) - 0.841345) < 1e-6);
  CHECK(std::fabs(gelu(1.0) - phi1) < 1e-9);
}

TEST_CASE("gelu derivative matches finite differences") {
  for (double x = -3.0; x <= 3.0; x += 0.17) {
    const double eps = 1e-6;
    const double numeric = (gelu(x + eps) - gelu(x - eps)) / (2 * eps);
    CHECK(std::fabs(gelu_grad(x) - numeric) < 1e-6);
  }
}

TEST_CASE("layer_norm basics") {
  Tensorf constant = Tensorf::from({3}, {2.5f, 2.5f, 2.5f});
  Tensorf y = layer_norm(constant, 1e-5f);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::fabs(y[i]) < 1e-3);

  Tensorf pm = Tensorf::from({2}, {1.f, -1.f});
  Tensorf z = layer_norm(pm, 1e-12f);
  CHECK(z[0] == doctest::Approx(1.f).epsilon(1e-5));
  CHECK(z[1] == doctest::Approx(-1.f).epsilon(1e-5));

  CHECK_THROWS(layer_norm(Tensorf(), 1e-5f));
}

TEST_CASE("layer_norm output statistics") {
  SplitMix64 rng(11);
  Tensorf x = random_tensor({32}, rng, -4, 4);
  Tensorf y = layer_norm(x, 1e-5f);
  double mean = 0, var = 0;
  for (std::size_t i = 0; i < y.size(); ++i) mean += y[i];
  mean /= y.size();
  for (std::size_t i = 0; i < y.size(); ++i) var += (y[i] - mean) * (y[i] - mean);
  var /= y.size();
  CHECK(std::fabs(mean) < 1e-5);
  CHECK(std::fabs(var - 1.0) < 1e-3);
}

TEST_CASE("layer_norm jacobian vs central differences") {
  SplitMix64 rng(12);
  Tensord x = random_tensor({8}, rng, -2, 2).cast<double>();
  Tensord gy = random_tensor({8}, rng).cast<double>();
  LayerNormCtx<double> ctx;
  layer_norm(x, 1e-5, &ctx);
  Tensord gx = layer_norm_backward(ctx, gy);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensord xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    Tensord yp = layer_norm(xp, 1e-5);
    Tensord ym = layer_norm(xm, 1e-5);
    double numeric = 0;
    for (std::size_t j = 0; j < x.size(); ++j) numeric += gy[j] * (yp[j] - ym[j]) / (2 * eps);
    const double rel = std::fabs(gx[i] - numeric) / std::max(1e-8, std::fabs(gx[i]) + std::fabs(numeric));
    CHECK(rel < 1e-3);
  }
}

TEST_CASE("softmax basics and stability") {
  Tensorf z = softmax(Tensorf::from({2}, {0.f, 0.f}));
  CHECK(z[0] == doctest::Approx(0.5));
  CHECK(z[1] == doctest::Approx(0.5));

  Tensorf big = softmax(Tensorf::from({2}, {3.f, 1003.f}));
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(big[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("softmax properties: sum to one and shift invariance") {
  SplitMix64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Tensorf x = random_tensor({1 + rng.below(12)}, rng, -5, 5);
    Tensorf p = softmax(x);
    double sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(p[i] > 0.f);
      sum += p[i];
    }
    CHECK(std::fabs(sum - 1.0) < 1e-6);
    Tensorf shifted = x;
    const float c = static_cast<float>(rng.uniform(-3, 3));
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += c;
    Tensorf p2 = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::fabs(p[i] - p2[i]) < 1e-6);
  }
}

TEST_CASE("softmax gradient vs finite differences") {
  SplitMix64 rng(14);
  Tensord x = random_tensor({6}, rng, -2, 2).cast<double>();
  Tensord gy = random_tensor({6}, rng).cast<double>();
  Tensord p = softmax(x);
  Tensord gx = softmax_backward(p, gy);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensord xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    Tensord pp = softmax(xp), pm = softmax(xm);
    double numeric = 0;
    for (std::size_t j = 0; j < x.size(); ++j) numeric += gy[j] * (pp[j] - pm[j]) / (2 * eps);
    CHECK(std::fabs(gx[i] - numeric) / std::max(1e-8, std::fabs(gx[i]) + std::fabs(numeric)) < 1e-3);
  }
}

TEST_CASE("attention degenerate cases") {
  // single token: softmax over one key is 1, output equals the value row
  Tensorf q = Tensorf::from({1, 4}, {0.3f, -0.7f, 1.2f, 0.05f});
  Tensorf k = Tensorf::from({1, 4}, {2.f, 0.f, -1.f, 0.5f});
  Tensorf v = Tensorf::from({1, 4}, {5.f, 6.f, 7.f, 8.f});
  Tensorf out = attention(q, k, v, 2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(v[i]));

  // identical keys: output is the mean of the values
  SplitMix64 rng(15);
  Tensorf q2 = random_tensor({3, 4}, rng);
  Tensorf k2({4, 4});
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 4; ++c) k2.at(r, c) = 0.25f * (c + 1);
  }
  Tensorf v2 = random_tensor({4, 4}, rng);
  Tensorf out2 = attention(q2, k2, v2, 2);
  for (std::size_t c = 0; c < 4; ++c) {
    float mean = 0;
    for (std::size_t r = 0; r < 4; ++r) mean += v2.at(r, c);
    mean /= 4;
    for (std::size_t r = 0; r < 3; ++r) CHECK(out2.at(r, c) == doctest::Approx(mean).epsilon(1e-5));
  }

  CHECK_THROWS(attention(q, Tensorf({2, 6}), v, 2));
}

TEST_CASE("attention gradient vs finite differences") {
  SplitMix64 rng(16);
  Tensord q = random_tensor({3, 4}, rng).cast<double>();
  Tensord k = random_tensor({5, 4}, rng).cast<double>();
  Tensord v = random_tensor({5, 4}, rng).cast<double>();
  Tensord gy = random_tensor({3, 4}, rng).cast<double>();
  AttentionCtx<double> ctx;
  attention(q, k, v, 2, &ctx);
  Tensord gq, gk, gv;
  attention_backward(ctx, gy, &gq, &gk, &gv);

  auto scalar_loss = [&](const Tensord& qq, const Tensord& kk, const Tensord& vv) {
    Tensord out = attention(qq, kk, vv, 2);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += gy[i] * out[i];
    return s;
  };
  const double eps = 1e-6;
  auto check_input = [&](Tensord& target, const Tensord& analytic) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double saved = target[i];
      target[i] = saved + eps;
      const double up = scalar_loss(q, k, v);
      target[i] = saved - eps;
      const double down = scalar_loss(q, k, v);
      target[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      CHECK(std::fabs(analytic[i] - numeric) /
                std::max(1e-8, std::fabs(analytic[i]) + std::fabs(numeric)) <
            1e-3);
    }
  };
  check_input(q, gq);
  check_input(k, gk);
  check_input(v, gv);
}

TEST_CASE("linear forward/backward") {
  // identity weights, zero bias
  LinearT<float> id = LinearT<float>::zeros(3, 3);
  for (int i = 0; i < 3; ++i) id.w.at(i, i) = 1.f;
  Tensorf x = Tensorf::from({3}, {1.f, 2.f, 3.f});
  Tensorf y = linear(x, id);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == x[i]);

  // zero weights -> bias
  LinearT<float> zb = LinearT<float>::zeros(3, 2);
  zb.b[0] = 4.f;
  zb.b[1] = -1.f;
  Tensorf y2 = linear(x, zb);
  CHECK(y2[0] == 4.f);
  CHECK(y2[1] == -1.f);

  CHECK_THROWS(linear(Tensorf({4}), id));
}

TEST_CASE("linear grad check under both accumulation modes") {
  auto run = [](auto tag, double eps, double tol) {
    using T = decltype(tag);
    SplitMix64 rng(17);
    LinearT<T> p = LinearT<T>::make(5, 3, 99);
    Tensor<T> x = random_tensor({4, 5}, rng).cast<T>();
    Tensor<T> gy = random_tensor({4, 3}, rng).cast<T>();
    LinearCtx<T> ctx;
    linear(x, p, &ctx);
    LinearGrads<T> grads = LinearGrads<T>::like(p);
    linear_backward(ctx, p, gy, &grads);
    std::vector<ParamRef<T>> refs = {{"w", &p.w, &grads.w}, {"b", &p.b, &grads.b}};
    auto loss = [&]() {
      Tensor<T> y = linear(x, p);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(gy[i]) * y[i];
      return s;
    };
    GradCheckReport report = grad_check<T>(loss, refs, eps);
    CHECK(report.max_rel_error < tol);
  };
  run(1.f, 1e-3, 1e-3);
  run(1.0, 1e-6, 1e-5);
}

TEST_CASE("optimizer_step basics") {
  // lr = 0 leaves parameters unchanged
  Tensorf w = Tensorf::from({2}, {1.f, -2.f});
  Tensorf g = Tensorf::from({2}, {0.5f, 0.25f});
  std::vector<ParamRef<float>> refs = {{"w", &w, &g}};
  sgd_step(refs, SgdConfig{0.0, 0.0});
  CHECK(w[0] == 1.f);
  CHECK(w[1] == -2.f);

  // one step on f(w)=w^2 at w=1 with lr=0.1: grad 2 -> w=0.8
  Tensorf w2 = Tensorf::from({1}, {1.f});
  Tensorf g2 = Tensorf::from({1}, {2.f});
  std::vector<ParamRef<float>> refs2 = {{"w", &w2, &g2}};
  sgd_step(refs2, SgdConfig{0.1, 0.0});
  CHECK(w2[0] == doctest::Approx(0.8f));

  Tensorf bad = Tensorf::from({3}, {0.f, 0.f, 0.f});
  std::vector<ParamRef<float>> refs3 = {{"w", &w2, &bad}};
  CHECK_THROWS(sgd_step(refs3, SgdConfig{0.1, 0.0}));
}

TEST_CASE("sgd trains a 2-layer net on xor") {
  LinearT<float> l1 = LinearT<float>::make(2, 8, mix_seed(42, 1));
  LinearT<float> l2 = LinearT<float>::make(8, 1, mix_seed(42, 2));
  const float inputs[4][2] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  const float targets[4] = {0, 1, 1, 0};
  LinearGrads<float> g1 = LinearGrads<float>::like(l1);
  LinearGrads<float> g2 = LinearGrads<float>::like(l2);
  std::vector<ParamRef<float>> refs = {{"w1", &l1.w, &g1.w},
                                       {"b1", &l1.b, &g1.b},
                                       {"w2", &l2.w, &g2.w},
                                       {"b2", &l2.b, &g2.b}};
  SgdConfig sgd{0.5, 0.9};
  SgdState<float> state;
  double loss = 1e9;
  int steps = 0;
  for (; steps < 5000 && loss >= 0.01; ++steps) {
    g1.zero();
    g2.zero();
    loss = 0;
    Tensorf batch({4, 2});
    for (int i = 0; i < 4; ++i) {
      batch.at(i, 0) = inputs[i][0];
      batch.at(i, 1) = inputs[i][1];
    }
    LinearCtx<float> c1, c2;
    Tensorf h = linear(batch, l1, &c1);
    Tensorf hpre = h;
    h = gelu(h);
    LinearCtx<float> cg;
    cg.x = h;
    Tensorf out = linear(h, l2, &c2);
    Tensorf gout({4, 1});
    for (int i = 0; i < 4; ++i) {
      const float d = out.at(i, 0) - targets[i];
      loss += 0.25 * d * d;
      gout.at(i, 0) = 0.5f * d;
    }
    Tensorf gh = linear_backward(c2, l2, gout, &g2);
    gh = gelu_backward(hpre, gh);
    linear_backward(c1, l1, gh, &g1);
    sgd_step(refs, sgd, &state);
  }
  CHECK(loss < 0.01);
  CHECK(steps < 5000);
}

TEST_CASE("grad_check on a linear model and a constant closure") {
  // linear model in double mode: central differences are essentially exact
  LinearT<double> p = LinearT<double>::make(6, 2, 7);
  SplitMix64 rng(18);
  Tensord x = random_tensor({3, 6}, rng).cast<double>();
  Tensord gy = random_tensor({3, 2}, rng).cast<double>();
  LinearCtx<double> ctx;
  linear(x, p, &ctx);
  LinearGrads<double> grads = LinearGrads<double>::like(p);
  linear_backward(ctx, p, gy, &grads);
  std::vector<ParamRef<double>> refs = {{"w", &p.w, &grads.w}, {"b", &p.b, &grads.b}};
  auto loss = [&]() {
    Tensord y = linear(x, p);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += gy[i] * y[i];
    return s;
  };
  GradCheckReport report = grad_check<double>(loss, refs, 1e-6);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.per_param.size() == 2);

  // constant closure: zero analytic and numeric gradients
  Tensord wc({4}, 0.5);
  Tensord gc({4}, 0.0);
  std::vector<ParamRef<double>> crefs = {{"w", &wc, &gc}};
  auto closs = [] { return 3.25; };
  GradCheckReport creport = grad_check<double>(closs, crefs, 1e-6);
  CHECK(creport.max_rel_error == 0.0);
}

TEST_CASE("grad_check on the full gate mlp") {
  SplitMix64 rng(19);
  GateParams params = GateParams::make(16, 8, 5);
  Tensorf q = random_tensor({16}, rng);
  GateCtx<float> ctx;
  Tensorf logits = gate_forward(q, params, &ctx);
  Tensorf glogits = Tensorf::from({2}, {0.7f, -0.4f});
  GateGradsT<float> grads = GateGradsT<float>::like(params);
  gate_backward(ctx, params, glogits, &grads);
  std::vector<ParamRef<float>> refs = {
      {"w_hidden", &params.hidden.w, &grads.hidden.w}, {"b_hidden", &params.hidden.b, &grads.hidden.b},
      {"w_class", &params.cls.w, &grads.cls.w},        {"b_class", &params.cls.b, &grads.cls.b}};
  auto loss = [&]() {
    Tensorf out = gate_forward(q, params);
    return static_cast<double>(glogits[0]) * out[0] + static_cast<double>(glogits[1]) * out[1];
  };
  GradCheckReport report = grad_check<float>(loss, refs, 1e-3);
  CHECK(report.max_rel_error < 1e-3);

  // 64-bit accumulation mode tightens the bound
  GateParamsT<double> dparams = params.cast<double>();
  Tensord dq = q.cast<double>();
  GateCtx<double> dctx;
  gate_forward(dq, dparams, &dctx);
  GateGradsT<double> dgrads = GateGradsT<double>::like(dparams);
  gate_backward(dctx, dparams, Tensord::from({2}, {0.7, -0.4}), &dgrads);
  std::vector<ParamRef<double>> drefs = {{"w_hidden", &dparams.hidden.w, &dgrads.hidden.w},
                                         {"b_hidden", &dparams.hidden.b, &dgrads.hidden.b},
                                         {"w_class", &dparams.cls.w, &dgrads.cls.w},
                                         {"b_class", &dparams.cls.b, &dgrads.cls.b}};
  auto dloss = [&]() {
    Tensord out = gate_forward(dq, dparams);
    return 0.7 * out[0] - 0.4 * out[1];
  };
  GradCheckReport dreport = grad_check<double>(dloss, drefs, 1e-6);
  CHECK(dreport.max_rel_error < 1e-5);
}

TEST_CASE("determinism: identical seeds give bit-identical parameters") {
  LinearT<float> a = LinearT<float>::make(12, 9, 1234);
  LinearT<float> b = LinearT<float>::make(12, 9, 1234);
  for (std::size_t i = 0; i < a.w.size(); ++i) CHECK(a.w[i] == b.w[i]);
  LinearT<float> c = LinearT<float>::make(12, 9, 1235);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.w.size(); ++i) any_diff |= a.w[i] != c.w[i];
  CHECK(any_diff);
}
