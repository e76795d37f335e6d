#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "georank/gate.hpp"
#include "georank/gradcheck.hpp"
#include "georank/rng.hpp"

using namespace georank;

namespace {

Embedding emb(std::vector<float> v) {
  Embedding e;
  e.source_id = "q";
  e.values = std::move(v);
  return e;
}

Ranking ranking_with_truth_at(const std::string& truth, int position, int total) {
  Ranking r;
  r.query_id = "q";
  float score = 1.f;
  int filler = 0;
  for (int i = 1; i <= total; ++i) {
    score -= 0.01f;
    if (i == position) {
      r.entries.push_back({truth, score});
    } else {
      r.entries.push_back({"filler" + std::to_string(filler++), score});
    }
  }
  return r;
}

}  // namespace

TEST_CASE("gate_forward degenerate cases") {
  GateParams p = GateParams::make(8, 4, 21);
  // zero classifier weights and bias -> zero logits
  GateParams zero_cls = p;
  zero_cls.cls.w.fill(0.f);
  zero_cls.cls.b.fill(0.f);
  Tensorf logits = gate_forward(Tensorf::from({8}, {1, 2, 3, 4, 5, 6, 7, 8}), zero_cls);
  CHECK(logits[0] == 0.f);
  CHECK(logits[1] == 0.f);

  // constant input: LN collapses to zeros, only the bias path remains
  Tensorf constant({8}, 3.5f);
  Tensorf out = gate_forward(constant, p);
  Tensorf hidden_bias = p.hidden.b;
  Tensorf expect = linear(gelu(hidden_bias), p.cls);
  for (int c = 0; c < 2; ++c) CHECK(out[c] == doctest::Approx(expect[c]).epsilon(1e-5));

  CHECK_THROWS(gate_forward(Tensorf({5}), p));
}

TEST_CASE("gate_forward matches a step-by-step composition oracle") {
  SplitMix64 rng(22);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t d = 6 + rng.below(10);
    GateParams p = GateParams::make(d, 8, rng.next());
    std::vector<double> q(d);
    for (double& x : q) x = rng.uniform(-2, 2);

    // oracle in plain double arithmetic
    double mean = 0;
    for (double x : q) mean += x;
    mean /= d;
    double var = 0;
    for (double x : q) var += (x - mean) * (x - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> h(8, 0.0);
    for (std::size_t j = 0; j < 8; ++j) {
      double acc = p.hidden.b[j];
      for (std::size_t i = 0; i < d; ++i) acc += (q[i] - mean) * inv * p.hidden.w.at(i, j);
      h[j] = acc * phi_cdf(acc);
    }
    double expect[2];
    for (int c = 0; c < 2; ++c) {
      double acc = p.cls.b[c];
      for (std::size_t j = 0; j < 8; ++j) acc += h[j] * p.cls.w.at(j, c);
      expect[c] = acc;
    }

    Tensorf qf({d});
    for (std::size_t i = 0; i < d; ++i) qf[i] = static_cast<float>(q[i]);
    Tensorf logits = gate_forward(qf, p);
    CHECK(std::fabs(logits[0] - expect[0]) < 1e-5);
    CHECK(std::fabs(logits[1] - expect[1]) < 1e-5);
  }
}

TEST_CASE("m3at_label strict improvement rule") {
  Ranking r4 = ranking_with_truth_at("t", 4, 8);
  Ranking r2 = ranking_with_truth_at("t", 2, 8);
  Ranking r1 = ranking_with_truth_at("t", 1, 8);
  Ranking r3 = ranking_with_truth_at("t", 3, 8);

  CHECK(m3at_label(r4, r2, "t").y == 1);   // 0.25 -> 0.5
  CHECK(m3at_label(r1, r1, "t").y == 0);   // tie
  CHECK(m3at_label(r2, r3, "t").y == 0);   // 0.5 -> 0.33
}

TEST_CASE("m3at_label agrees with an independent sign test on random pairs") {
  SplitMix64 rng(23);
  for (int trial = 0; trial < 500; ++trial) {
    const int total = 3 + static_cast<int>(rng.below(10));
    const int before = 1 + static_cast<int>(rng.below(total + 1));  // total+1 means absent
    const int after = 1 + static_cast<int>(rng.below(total + 1));
    Ranking r2 = ranking_with_truth_at("t", before > total ? 0 : before, total);
    Ranking r3 = ranking_with_truth_at("t", after > total ? 0 : after, total);
    GateLabel label = m3at_label(r2, r3, "t");
    const double rrb = before > total ? 0.0 : 1.0 / before;
    const double rra = after > total ? 0.0 : 1.0 / after;
    CHECK(label.y == (rra > rrb ? 1 : 0));
    CHECK(label.rr_before == doctest::Approx(rrb));
    CHECK(label.rr_after == doctest::Approx(rra));
  }
}

TEST_CASE("gate_decide rules") {
  CHECK(gate_decide_logits(Tensorf::from({2}, {2.f, -1.f})) == false);
  CHECK(gate_decide_logits(Tensorf::from({2}, {-1.f, 2.f})) == true);
  CHECK(gate_decide_logits(Tensorf::from({2}, {0.f, 0.f})) == false);  // tie keeps the cheap path

  // invariant under adding a constant to both logits
  SplitMix64 rng(24);
  for (int trial = 0; trial < 100; ++trial) {
    const float a = static_cast<float>(rng.uniform(-3, 3));
    const float b = static_cast<float>(rng.uniform(-3, 3));
    const float c = static_cast<float>(rng.uniform(-5, 5));
    CHECK(gate_decide_logits(Tensorf::from({2}, {a, b})) ==
          gate_decide_logits(Tensorf::from({2}, {a + c, b + c})));
  }
}

TEST_CASE("weighted cross-entropy gradient passes grad_check") {
  SplitMix64 rng(25);
  GateParamsT<double> p = GateParams::make(10, 6, 31).cast<double>();
  Tensord batch({4, 10});
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.uniform(-1, 1);
  std::vector<int> targets = {0, 1, 1, 0};
  GateCtx<double> ctx;
  Tensord logits = gate_forward(batch, p, &ctx);
  Tensord dlogits;
  weighted_ce<double>(logits, targets, 1.0, 4.0, &dlogits);
  GateGradsT<double> grads = GateGradsT<double>::like(p);
  gate_backward(ctx, p, dlogits, &grads);
  std::vector<ParamRef<double>> refs = {{"w_hidden", &p.hidden.w, &grads.hidden.w},
                                        {"b_hidden", &p.hidden.b, &grads.hidden.b},
                                        {"w_class", &p.cls.w, &grads.cls.w},
                                        {"b_class", &p.cls.b, &grads.cls.b}};
  auto loss = [&]() {
    Tensord out = gate_forward(batch, p);
    return weighted_ce<double>(out, targets, 1.0, 4.0);
  };
  GradCheckReport report = grad_check<double>(loss, refs, 1e-6);
  CHECK(report.max_rel_error < 1e-3);
}

TEST_CASE("train_gate separates two clusters") {
  SplitMix64 rng(26);
  std::vector<Embedding> features;
  std::vector<GateLabel> labels;
  for (int i = 0; i < 60; ++i) {
    const bool pos = i % 2 == 0;
    std::vector<float> v(8);
    for (float& x : v) x = static_cast<float>(rng.gaussian(pos ? 1.2 : -1.2, 0.4));
    features.push_back(emb(std::move(v)));
    GateLabel l;
    l.query_id = "q" + std::to_string(i);
    l.y = pos ? 1 : 0;
    labels.push_back(l);
  }
  GateTrainConfig cfg;
  cfg.epochs = 2000;
  cfg.seed = 77;
  GateTrainResult result = train_gate(features, labels, cfg);
  CHECK_FALSE(result.single_class_warning);
  int correct = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const bool pred = gate_decide(features[i], result.params);
    if (pred == (labels[i].y == 1)) ++correct;
  }
  CHECK(static_cast<double>(correct) / features.size() >= 0.99);
}

TEST_CASE("unit class weights reduce to unweighted cross entropy") {
  SplitMix64 rng(27);
  Tensord logits({6, 2});
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = rng.uniform(-2, 2);
  std::vector<int> targets = {0, 1, 0, 1, 0, 1};
  const double weighted = weighted_ce<double>(logits, targets, 1.0, 1.0);
  // plain cross entropy
  double plain = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double a = logits.at(i, 0), b = logits.at(i, 1);
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    plain += -(logits.at(i, targets[i]) - lse);
  }
  plain /= 6;
  CHECK(std::fabs(weighted - plain) < 1e-6);
}

TEST_CASE("single-class training warns and saturates") {
  SplitMix64 rng(28);
  std::vector<Embedding> features;
  std::vector<GateLabel> labels;
  for (int i = 0; i < 20; ++i) {
    std::vector<float> v(6);
    for (float& x : v) x = static_cast<float>(rng.uniform(-1, 1));
    features.push_back(emb(std::move(v)));
    GateLabel l;
    l.y = 1;
    labels.push_back(l);
  }
  GateTrainConfig cfg;
  cfg.epochs = 500;
  GateTrainResult result = train_gate(features, labels, cfg);
  CHECK(result.single_class_warning);
  for (const Embedding& f : features) CHECK(gate_decide(f, result.params));
}

TEST_CASE("raising the positive weight never decreases positive predictions") {
  SplitMix64 rng(29);
  std::vector<Embedding> features;
  std::vector<GateLabel> labels;
  for (int i = 0; i < 40; ++i) {
    const bool pos = i % 4 == 0;
    std::vector<float> v(6);
    for (float& x : v) x = static_cast<float>(rng.gaussian(pos ? 0.6 : -0.3, 1.0));
    features.push_back(emb(std::move(v)));
    GateLabel l;
    l.y = pos ? 1 : 0;
    labels.push_back(l);
  }
  int prev = -1;
  for (float wp : {1.f, 2.f, 4.f, 8.f}) {
    GateTrainConfig cfg;
    cfg.weight_positive = wp;
    cfg.epochs = 600;
    cfg.seed = 5;
    GateTrainResult result = train_gate(features, labels, cfg);
    int positives = 0;
    for (const Embedding& f : features) positives += gate_decide(f, result.params) ? 1 : 0;
    CHECK(positives >= prev);
    prev = positives;
  }
}

TEST_CASE("oracle-gate monotonicity on randomized instances") {
  SplitMix64 rng(30);
  for (int trial = 0; trial < 200; ++trial) {
    const int total = 4 + static_cast<int>(rng.below(8));
    const int before = 1 + static_cast<int>(rng.below(total));
    const int after = 1 + static_cast<int>(rng.below(total));
    Ranking r2 = ranking_with_truth_at("t", before, total);
    Ranking r3 = ranking_with_truth_at("t", after, total);
    GateLabel label = m3at_label(r2, r3, "t");
    // decisions taken from ground-truth labels can never lower the rank
    const Ranking& chosen = label.y ? r3 : r2;
    CHECK(reciprocal_rank(chosen, "t") >= reciprocal_rank(r2, "t"));
  }
}

TEST_CASE("gate checkpoint round trip") {
  GateParams p = GateParams::make(12, 64, 91);
  const std::string path =
      (std::filesystem::temp_directory_path() / "georank_gate_test.json").string();
  save_gate(path, p, 91);
  GateParams back = load_gate(path);
  CHECK(back.hidden.w.values() == p.hidden.w.values());
  CHECK(back.hidden.b.values() == p.hidden.b.values());
  CHECK(back.cls.w.values() == p.cls.w.values());
  CHECK(back.cls.b.values() == p.cls.b.values());
  std::remove(path.c_str());
}
