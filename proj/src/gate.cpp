#include "georank/gate.hpp"

#include "georank/detail/jsonio.hpp"
#include "georank/optim.hpp"

namespace georank {

Tensorf gate_logits(const Embedding& q, const GateParams& params) {
  Tensorf x = Tensorf::from({q.values.size()}, std::vector<float>(q.values));
  return gate_forward(x, params);
}

bool gate_decide_logits(const Tensorf& logits) {
  // argmax with ties resolved to the cheap path
  return logits[kGatePositiveClass] > logits[1 - kGatePositiveClass];
}

bool gate_decide(const Embedding& q, const GateParams& params) {
  return gate_decide_logits(gate_logits(q, params));
}

GateLabel m3at_label(const Ranking& rank_2d, const Ranking& rank_3d, const std::string& true_class) {
  GateLabel label;
  label.query_id = rank_2d.query_id;
  label.rr_before = reciprocal_rank(rank_2d, true_class);
  label.rr_after = reciprocal_rank(rank_3d, true_class);
  label.y = label.rr_after > label.rr_before ? 1 : 0;
  return label;
}

GateTrainResult train_gate(const std::vector<Embedding>& features,
                           const std::vector<GateLabel>& labels, const GateTrainConfig& cfg) {
  if (features.empty() || features.size() != labels.size()) {
    throw std::invalid_argument("train_gate: features/labels mismatch");
  }
  if (cfg.weight_negative <= 0 || cfg.weight_positive <= 0) {
    throw std::invalid_argument("train_gate: class weights must be positive");
  }
  const std::size_t n = features.size();
  const std::size_t d = features[0].values.size();
  Tensorf batch({n, d});
  std::vector<int> targets(n);
  GateTrainResult result;
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].values.size() != d) throw std::invalid_argument("train_gate: dim mismatch");
    std::copy(features[i].values.begin(), features[i].values.end(), batch.data() + i * d);
    targets[i] = labels[i].y ? 1 : 0;
    (labels[i].y ? result.positives : result.negatives)++;
  }
  result.single_class_warning = result.positives == 0 || result.negatives == 0;

  GateParams params = GateParams::make(d, 64, cfg.seed);
  GateGradsT<float> grads = GateGradsT<float>::like(params);
  std::vector<ParamRef<float>> refs = {
      {"w_hidden", &params.hidden.w, &grads.hidden.w}, {"b_hidden", &params.hidden.b, &grads.hidden.b},
      {"w_class", &params.cls.w, &grads.cls.w},        {"b_class", &params.cls.b, &grads.cls.b}};
  SgdConfig sgd{cfg.lr, 0.0};

  double loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    GateCtx<float> ctx;
    Tensorf logits = gate_forward(batch, params, &ctx);
    Tensorf dlogits;
    loss = weighted_ce(logits, targets, cfg.weight_negative, cfg.weight_positive, &dlogits);
    if (!std::isfinite(loss)) throw std::runtime_error("train_gate: non-finite loss");
    grads.zero();
    gate_backward(ctx, params, dlogits, &grads);
    sgd_step(refs, sgd);
  }
  result.params = std::move(params);
  result.final_loss = static_cast<float>(loss);
  return result;
}

void save_gate(const std::string& path, const GateParams& params, std::uint64_t seed) {
  detail::json j;
  j["format"] = "gate-v1";
  j["d_2d"] = params.input_dim();
  j["d_hidden"] = params.hidden_dim();
  j["seed"] = seed;
  j["positive_class_index"] = kGatePositiveClass;
  j["weights"]["hidden"] = detail::linear_to_json(params.hidden);
  j["weights"]["class"] = detail::linear_to_json(params.cls);
  detail::write_json_file(path, j);
}

GateParams load_gate(const std::string& path) {
  const detail::json j = detail::read_json_file(path);
  if (j.value("format", "") != "gate-v1") throw std::runtime_error("not a gate checkpoint: " + path);
  GateParams p;
  p.hidden = detail::linear_from_json(j.at("weights").at("hidden"));
  p.cls = detail::linear_from_json(j.at("weights").at("class"));
  if (p.cls.out() != 2) throw std::runtime_error("gate checkpoint must have 2 logits");
  return p;
}

}  // namespace georank
