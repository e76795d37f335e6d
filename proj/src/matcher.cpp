#include "georank/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "georank/detail/jsonio.hpp"
#include "georank/optim.hpp"

namespace georank {

CandidateScore similarity_score(const MatchSet& matches) {
  if (matches.matches.empty()) throw std::invalid_argument("similarity_score: empty match set");
  double acc = 0.0;
  for (const Match& m : matches.matches) acc += m.confidence;
  CandidateScore s;
  s.candidate_id = matches.candidate_id;
  s.c_tilde = static_cast<float>(acc / static_cast<double>(matches.matches.size()));
  return s;
}

CandidateScore multiview_score(const std::vector<CandidateScore>& per_view) {
  if (per_view.empty()) throw std::invalid_argument("multiview_score: no views");
  CandidateScore s;
  s.candidate_id = per_view[0].candidate_id;
  double acc = 0.0;
  for (const CandidateScore& v : per_view) {
    acc += v.c_tilde;
    s.per_view.push_back(v.c_tilde);
  }
  s.c_tilde = static_cast<float>(acc / static_cast<double>(per_view.size()));
  return s;
}

Ranking rerank(const Ranking& stage1, const std::vector<CandidateScore>& scores, std::size_t k) {
  const std::size_t block = std::min(k, stage1.entries.size());
  if (scores.size() != block) throw std::invalid_argument("rerank: score/candidate mismatch");
  std::map<std::string, float> by_id;
  for (const CandidateScore& s : scores) by_id[s.candidate_id] = s.c_tilde;
  for (std::size_t i = 0; i < block; ++i) {
    if (by_id.find(stage1.entries[i].reference_id) == by_id.end()) {
      throw std::invalid_argument("rerank: score missing for candidate " +
                                  stage1.entries[i].reference_id);
    }
  }
  Ranking out = stage1;
  std::vector<RankedEntry> head(out.entries.begin(), out.entries.begin() + block);
  for (RankedEntry& e : head) e.score = by_id[e.reference_id];
  std::stable_sort(head.begin(), head.end(),
                   [](const RankedEntry& a, const RankedEntry& b) { return a.score > b.score; });
  std::copy(head.begin(), head.end(), out.entries.begin());
  return out;
}

namespace {

struct EligibleQuery {
  std::size_t query_index = 0;
  std::string positive;
  std::array<std::string, 3> negatives;
};

}  // namespace

MatcherTrainResult train_matcher_adapters(const std::vector<TrainQuery>& queries,
                                          const std::vector<Ranking>& stage1_rankings,
                                          const std::map<std::string, ImageView>& gallery_views,
                                          const ExtractorParams& extractor, MatcherParams params,
                                          const MatcherTrainConfig& cfg) {
  if (queries.size() != stage1_rankings.size()) {
    throw std::invalid_argument("train_matcher_adapters: queries/rankings mismatch");
  }
  MatcherTrainResult result;

  std::vector<EligibleQuery> eligible;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const Ranking& rank = stage1_rankings[qi];
    const std::size_t pool = std::min<std::size_t>(cfg.k_pool, rank.entries.size());
    EligibleQuery e;
    e.query_index = qi;
    std::size_t negs = 0;
    for (std::size_t i = 0; i < pool; ++i) {
      const std::string& id = rank.entries[i].reference_id;
      if (id == queries[qi].true_class) {
        if (e.positive.empty()) e.positive = id;
      } else if (negs < 3) {
        e.negatives[negs++] = id;
      }
    }
    if (!e.positive.empty() && negs == 3) {
      eligible.push_back(std::move(e));
    } else {
      ++result.skipped_queries;
    }
  }
  if (eligible.empty()) throw std::runtime_error("train_matcher_adapters: no eligible queries");
  result.used_queries = static_cast<int>(eligible.size());

  // Keypoints depend only on the query views.
  std::vector<std::vector<std::vector<Keypoint>>> keypoints(queries.size());
  for (const EligibleQuery& e : eligible) {
    const TrainQuery& q = queries[e.query_index];
    keypoints[e.query_index].reserve(q.views.size());
    for (const ImageView& v : q.views) {
      keypoints[e.query_index].push_back(detect_keypoints(v, params.cfg.keypoints));
    }
  }

  MatcherGradsT<float> grads = MatcherGradsT<float>::like(params);
  std::vector<ParamRef<float>> refs = {
      {"self_adapter_down", &params.self_adapter.down.w, &grads.self_adapter.down.w},
      {"self_adapter_up", &params.self_adapter.up.w, &grads.self_adapter.up.w},
      {"cross_adapter_down", &params.cross_adapter.down.w, &grads.cross_adapter.down.w},
      {"cross_adapter_up", &params.cross_adapter.up.w, &grads.cross_adapter.up.w},
      {"coord_head_w", &params.coord_head.w, &grads.coord_head.w},
      {"coord_head_b", &params.coord_head.b, &grads.coord_head.b},
      {"conf_head_w", &params.conf_head.w, &grads.conf_head.w},
      {"conf_head_b", &params.conf_head.b, &grads.conf_head.b}};
  SgdConfig sgd{cfg.lr, 0.0};
  const float tau = cfg.tau;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(eligible.size());
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 shuffle_rng(mix_seed(cfg.seed, 0x5a5a + epoch));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    for (std::size_t oi : order) {
      const EligibleQuery& e = eligible[oi];
      const TrainQuery& q = queries[e.query_index];
      const std::size_t vcount = q.views.size();

      std::array<std::string, 4> candidates = {e.positive, e.negatives[0], e.negatives[1],
                                               e.negatives[2]};
      std::array<float, 4> c_tilde{};
      // ctxs[c][v]
      std::vector<std::vector<RefineCtx<float>>> ctxs(4);
      std::vector<std::vector<std::size_t>> match_counts(4);
      for (int c = 0; c < 4; ++c) {
        const auto it = gallery_views.find(candidates[c]);
        if (it == gallery_views.end()) {
          throw std::runtime_error("train_matcher_adapters: missing gallery view " + candidates[c]);
        }
        double acc = 0.0;
        ctxs[c].resize(vcount);
        for (std::size_t v = 0; v < vcount; ++v) {
          MatchSet ms = score_pair(q.views[v], it->second, keypoints[e.query_index][v], extractor,
                                   params, &ctxs[c][v]);
          acc += similarity_score(ms).c_tilde;
        }
        c_tilde[c] = static_cast<float>(acc / static_cast<double>(vcount));
      }

      // Cross-entropy over the four candidate scores at temperature tau.
      float mx = c_tilde[0];
      for (int c = 1; c < 4; ++c) mx = std::max(mx, c_tilde[c]);
      std::array<double, 4> p{};
      double z = 0.0;
      for (int c = 0; c < 4; ++c) {
        p[c] = std::exp(static_cast<double>((c_tilde[c] - mx) / tau));
        z += p[c];
      }
      for (int c = 0; c < 4; ++c) p[c] /= z;
      const double loss = -std::log(std::max(p[0], 1e-30));
      if (!std::isfinite(loss)) throw std::runtime_error("train_matcher_adapters: non-finite loss");
      epoch_loss += loss;

      grads.zero();
      const std::size_t S = params.cfg.keypoints;
      for (int c = 0; c < 4; ++c) {
        const float dscore =
            static_cast<float>((p[c] - (c == 0 ? 1.0 : 0.0)) / static_cast<double>(tau));
        const float dconf_each = dscore / static_cast<float>(vcount * S);
        std::vector<float> dconf(S, dconf_each);
        for (std::size_t v = 0; v < vcount; ++v) {
          refine_backward<float>(ctxs[c][v], params, dconf, nullptr, &grads);
        }
      }
      sgd_step(refs, sgd);
      ++result.steps;
    }
    result.final_epoch_loss = epoch_loss / static_cast<double>(eligible.size());
  }

  result.params = std::move(params);
  return result;
}

namespace {

detail::json matcher_config_to_json(const MatcherConfig& cfg) {
  detail::json j;
  j["keypoints"] = cfg.keypoints;
  j["iterations"] = cfg.iterations;
  j["heads"] = cfg.heads;
  j["d3"] = cfg.d3;
  j["stride"] = cfg.stride;
  j["corr_window"] = cfg.corr_window;
  j["adapter_dim"] = cfg.adapter_dim;
  j["ffn_dim"] = cfg.ffn_dim;
  j["alpha"] = cfg.alpha;
  j["tau"] = cfg.tau;
  j["softargmax_temp"] = cfg.softargmax_temp;
  j["adapters_enabled"] = cfg.adapters_enabled;
  return j;
}

MatcherConfig matcher_config_from_json(const detail::json& j) {
  MatcherConfig cfg;
  cfg.keypoints = j.at("keypoints").get<int>();
  cfg.iterations = j.at("iterations").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.d3 = j.at("d3").get<int>();
  cfg.stride = j.at("stride").get<int>();
  cfg.corr_window = j.at("corr_window").get<int>();
  cfg.adapter_dim = j.at("adapter_dim").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.alpha = j.at("alpha").get<float>();
  cfg.tau = j.at("tau").get<float>();
  cfg.softargmax_temp = j.at("softargmax_temp").get<float>();
  cfg.adapters_enabled = j.at("adapters_enabled").get<bool>();
  return cfg;
}

}  // namespace

void save_matcher(const std::string& path, const MatcherParams& params) {
  detail::json j;
  j["format"] = "matcher-v1";
  j["seed"] = params.seed;
  j["config"] = matcher_config_to_json(params.cfg);
  detail::json w;
  w["token_init"] = detail::linear_to_json(params.token_init);
  w["self_wq"] = detail::linear_to_json(params.self_attn.wq);
  w["self_wk"] = detail::linear_to_json(params.self_attn.wk);
  w["self_wv"] = detail::linear_to_json(params.self_attn.wv);
  w["self_wo"] = detail::linear_to_json(params.self_attn.wo);
  w["self_fc1"] = detail::linear_to_json(params.self_ffn.fc1);
  w["self_fc2"] = detail::linear_to_json(params.self_ffn.fc2);
  w["self_adapter_down"] = detail::linear_to_json(params.self_adapter.down);
  w["self_adapter_up"] = detail::linear_to_json(params.self_adapter.up);
  w["cross_wq"] = detail::linear_to_json(params.cross_attn.wq);
  w["cross_wk"] = detail::linear_to_json(params.cross_attn.wk);
  w["cross_wv"] = detail::linear_to_json(params.cross_attn.wv);
  w["cross_wo"] = detail::linear_to_json(params.cross_attn.wo);
  w["cross_fc1"] = detail::linear_to_json(params.cross_ffn.fc1);
  w["cross_fc2"] = detail::linear_to_json(params.cross_ffn.fc2);
  w["cross_adapter_down"] = detail::linear_to_json(params.cross_adapter.down);
  w["cross_adapter_up"] = detail::linear_to_json(params.cross_adapter.up);
  w["coord_head"] = detail::linear_to_json(params.coord_head);
  w["conf_head"] = detail::linear_to_json(params.conf_head);
  j["weights"] = std::move(w);
  detail::write_json_file(path, j);
}

MatcherParams load_matcher(const std::string& path) {
  const detail::json j = detail::read_json_file(path);
  if (j.value("format", "") != "matcher-v1") throw std::runtime_error("not a matcher checkpoint: " + path);
  MatcherParams p;
  p.seed = j.value("seed", 0ull);
  p.cfg = matcher_config_from_json(j.at("config"));
  const auto& w = j.at("weights");
  p.token_init = detail::linear_from_json(w.at("token_init"));
  p.self_attn.wq = detail::linear_from_json(w.at("self_wq"));
  p.self_attn.wk = detail::linear_from_json(w.at("self_wk"));
  p.self_attn.wv = detail::linear_from_json(w.at("self_wv"));
  p.self_attn.wo = detail::linear_from_json(w.at("self_wo"));
  p.self_ffn.fc1 = detail::linear_from_json(w.at("self_fc1"));
  p.self_ffn.fc2 = detail::linear_from_json(w.at("self_fc2"));
  p.self_adapter.down = detail::linear_from_json(w.at("self_adapter_down"));
  p.self_adapter.up = detail::linear_from_json(w.at("self_adapter_up"));
  p.self_adapter.alpha = p.cfg.alpha;
  p.cross_attn.wq = detail::linear_from_json(w.at("cross_wq"));
  p.cross_attn.wk = detail::linear_from_json(w.at("cross_wk"));
  p.cross_attn.wv = detail::linear_from_json(w.at("cross_wv"));
  p.cross_attn.wo = detail::linear_from_json(w.at("cross_wo"));
  p.cross_ffn.fc1 = detail::linear_from_json(w.at("cross_fc1"));
  p.cross_ffn.fc2 = detail::linear_from_json(w.at("cross_fc2"));
  p.cross_adapter.down = detail::linear_from_json(w.at("cross_adapter_down"));
  p.cross_adapter.up = detail::linear_from_json(w.at("cross_adapter_up"));
  p.cross_adapter.alpha = p.cfg.alpha;
  p.coord_head = detail::linear_from_json(w.at("coord_head"));
  p.conf_head = detail::linear_from_json(w.at("conf_head"));
  return p;
}

}  // namespace georank
