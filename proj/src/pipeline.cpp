#include "georank/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "georank/detail/jsonio.hpp"

namespace georank {

namespace fs = std::filesystem;

using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

PipelineConfig load_pipeline_config(const std::string& path) {
  detail::json j;
  try {
    j = detail::read_json_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  PipelineConfig cfg;
  try {
    cfg.k_candidates = j.value("k_candidates", cfg.k_candidates);
    cfg.keypoints = j.value("keypoints", cfg.keypoints);
    cfg.gate_enabled = j.value("gate_enabled", cfg.gate_enabled);
    cfg.force_2d = j.value("force_2d", cfg.force_2d);
    cfg.force_3d = j.value("force_3d", cfg.force_3d);
    cfg.normalize = j.value("normalize", cfg.normalize);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.gate_checkpoint = j.value("gate_checkpoint", cfg.gate_checkpoint);
    cfg.matcher_checkpoint = j.value("matcher_checkpoint", cfg.matcher_checkpoint);
    cfg.extractor_checkpoint = j.value("extractor_checkpoint", cfg.extractor_checkpoint);
    cfg.oracle_labels = j.value("oracle_labels", cfg.oracle_labels);
    cfg.query_embeddings = j.value("query_embeddings", cfg.query_embeddings);
    cfg.gallery_embeddings = j.value("gallery_embeddings", cfg.gallery_embeddings);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad pipeline config: ") + e.what());
  }
  if (cfg.k_candidates < 1) throw ConfigError("k_candidates must be >= 1");
  if (cfg.force_2d && cfg.force_3d) throw ConfigError("force_2d and force_3d are exclusive");
  return cfg;
}

void save_pipeline_config(const std::string& path, const PipelineConfig& cfg) {
  detail::json j;
  j["k_candidates"] = cfg.k_candidates;
  j["keypoints"] = cfg.keypoints;
  j["gate_enabled"] = cfg.gate_enabled;
  j["force_2d"] = cfg.force_2d;
  j["force_3d"] = cfg.force_3d;
  j["normalize"] = cfg.normalize;
  j["seed"] = cfg.seed;
  j["gate_checkpoint"] = cfg.gate_checkpoint;
  j["matcher_checkpoint"] = cfg.matcher_checkpoint;
  j["extractor_checkpoint"] = cfg.extractor_checkpoint;
  j["oracle_labels"] = cfg.oracle_labels;
  j["query_embeddings"] = cfg.query_embeddings;
  j["gallery_embeddings"] = cfg.gallery_embeddings;
  detail::write_json_file(path, j);
}

LoadedPipeline load_pipeline(const std::string& dataset_dir, const DatasetManifest& manifest,
                             const PipelineConfig& cfg) {
  LoadedPipeline p;
  std::vector<Embedding> gallery_embeds;
  if (!cfg.gallery_embeddings.empty()) {
    gallery_embeds = read_embeddings(cfg.gallery_embeddings);
  }
  for (const ManifestRecord& rec : manifest.gallery) {
    if (rec.view_paths.empty()) throw DataError("gallery record without views: " + rec.id);
    ImageView img = read_rbim((fs::path(dataset_dir) / rec.view_paths[0]).string());
    img.view_id = rec.id;
    if (cfg.gallery_embeddings.empty()) {
      gallery_embeds.push_back(handcrafted_descriptor(img, rec.id));
    }
    p.gallery_views.emplace(rec.id, std::move(img));
  }
  p.index = GalleryIndex::build(gallery_embeds, cfg.normalize);
  p.fusion = FusionParams::identity_average(p.index.dim());

  if (!cfg.query_embeddings.empty()) {
    for (Embedding& e : read_embeddings(cfg.query_embeddings)) {
      p.query_embeddings.emplace(e.source_id, std::move(e));
    }
  }
  if (!cfg.extractor_checkpoint.empty()) {
    p.extractor = load_extractor(cfg.extractor_checkpoint);
  } else {
    p.extractor = ExtractorParams::make(ExtractorConfig{}, mix_seed(cfg.seed, 0xe7));
  }
  if (!cfg.matcher_checkpoint.empty()) {
    p.matcher = load_matcher(cfg.matcher_checkpoint);
    p.has_matcher = true;
  } else {
    MatcherConfig mc;
    mc.stride = p.extractor.cfg.stride;
    mc.d3 = p.extractor.cfg.d3;
    mc.keypoints = cfg.keypoints;
    p.matcher = MatcherParams::make(mc, mix_seed(cfg.seed, 0x3a));
  }
  if (p.matcher.cfg.d3 != p.extractor.cfg.d3 || p.matcher.cfg.stride != p.extractor.cfg.stride) {
    throw ConfigError("matcher and extractor checkpoints disagree on d3/stride");
  }
  if (!cfg.gate_checkpoint.empty()) {
    p.gate = load_gate(cfg.gate_checkpoint);
    p.has_gate = true;
  }
  return p;
}

std::vector<QueryRecord> load_queries(const std::string& dataset_dir,
                                      const DatasetManifest& manifest, const std::string& split) {
  std::vector<QueryRecord> out;
  for (const ManifestRecord& rec : manifest.queries) {
    if (!split.empty() && rec.split != split) continue;
    QueryRecord q;
    q.rec = rec;
    for (const std::string& rel : rec.view_paths) {
      ImageView img = read_rbim((fs::path(dataset_dir) / rel).string());
      img.view_id = rec.id;
      q.views.push_back(std::move(img));
    }
    out.push_back(std::move(q));
  }
  return out;
}

Embedding embed_query(const QueryRecord& q, const LoadedPipeline& p, bool normalize) {
  if (!p.query_embeddings.empty()) {
    const auto it = p.query_embeddings.find(q.rec.id);
    if (it == p.query_embeddings.end()) throw DataError("no embedding for query " + q.rec.id);
    return it->second;
  }
  if (q.views.empty()) throw DataError("query without views: " + q.rec.id);
  if (q.views.size() == 1) {
    return handcrafted_descriptor(q.views[0], q.rec.id);
  }
  if (q.views.size() != 3) throw DataError("queries must have 1 or 3 views: " + q.rec.id);
  std::vector<Embedding> per_view;
  per_view.reserve(3);
  for (const ImageView& v : q.views) per_view.push_back(handcrafted_descriptor(v, q.rec.id));
  Embedding fused = fuse_multiview(per_view, p.fusion);
  if (normalize) l2_normalize(fused.values);
  return fused;
}

IdentifyResult identify(const QueryRecord& query, const LoadedPipeline& p,
                        const PipelineConfig& cfg, std::optional<bool> oracle_decision) {
  IdentifyResult result;
  const auto t0 = Clock::now();
  const Embedding q = embed_query(query, p, cfg.normalize);
  result.stage1 = rank_stage1(q, p.index, p.index.size());
  result.stage1_seconds = seconds_since(t0);

  bool use_3d;
  if (cfg.force_2d) {
    use_3d = false;
    result.gate_positive = false;
  } else if (cfg.force_3d) {
    use_3d = true;
    result.gate_positive = true;
  } else if (oracle_decision.has_value()) {
    use_3d = *oracle_decision;
    result.gate_positive = use_3d;
  } else if (cfg.gate_enabled && p.has_gate) {
    use_3d = gate_decide(q, p.gate);
    result.gate_positive = use_3d;
  } else {
    use_3d = false;
    result.gate_positive = false;
  }

  if (!use_3d) {
    result.ranking = result.stage1;
    return result;
  }

  const auto t1 = Clock::now();
  result.stage2_invoked = true;
  const std::size_t k = std::min<std::size_t>(cfg.k_candidates, result.stage1.entries.size());
  std::vector<std::vector<Keypoint>> kps;
  kps.reserve(query.views.size());
  for (const ImageView& v : query.views) kps.push_back(detect_keypoints(v, p.matcher.cfg.keypoints));

  std::vector<CandidateScore> scores;
  scores.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::string& cand = result.stage1.entries[i].reference_id;
    const auto it = p.gallery_views.find(cand);
    if (it == p.gallery_views.end()) throw DataError("missing gallery view for " + cand);
    std::vector<CandidateScore> per_view;
    per_view.reserve(query.views.size());
    for (std::size_t v = 0; v < query.views.size(); ++v) {
      MatchSet ms = score_pair(query.views[v], it->second, kps[v], p.extractor, p.matcher);
      ms.candidate_id = cand;
      per_view.push_back(similarity_score(ms));
    }
    scores.push_back(multiview_score(per_view));
  }
  result.ranking = rerank(result.stage1, scores, k);
  result.stage2_seconds = seconds_since(t1);
  return result;
}

std::map<std::string, bool> load_oracle_labels(const std::string& path) {
  std::map<std::string, bool> out;
  for (const GateLabel& l : load_gate_labels(path)) out[l.query_id] = l.y != 0;
  return out;
}

void save_gate_labels(const std::string& path, const std::vector<GateLabel>& labels) {
  detail::json arr = detail::json::array();
  for (const GateLabel& l : labels) {
    detail::json j;
    j["query_id"] = l.query_id;
    j["y"] = l.y;
    j["rr_before"] = l.rr_before;
    j["rr_after"] = l.rr_after;
    arr.push_back(std::move(j));
  }
  detail::json root;
  root["format"] = "gate-labels-v1";
  root["labels"] = std::move(arr);
  detail::write_json_file(path, root);
}

std::vector<GateLabel> load_gate_labels(const std::string& path) {
  const detail::json root = detail::read_json_file(path);
  if (root.value("format", "") != "gate-labels-v1") throw DataError("not a label file: " + path);
  std::vector<GateLabel> out;
  for (const auto& j : root.at("labels")) {
    GateLabel l;
    l.query_id = j.at("query_id").get<std::string>();
    l.y = j.at("y").get<int>();
    l.rr_before = j.value("rr_before", 0.f);
    l.rr_after = j.value("rr_after", 0.f);
    out.push_back(std::move(l));
  }
  return out;
}

EvalReport evaluate(const std::vector<QueryRecord>& queries, const LoadedPipeline& p,
                    const PipelineConfig& cfg) {
  if (queries.empty()) throw DataError("evaluate: empty split");
  std::map<std::string, bool> oracle;
  const bool use_oracle = !cfg.oracle_labels.empty();
  if (use_oracle) oracle = load_oracle_labels(cfg.oracle_labels);

  EvalReport report;
  const auto t0 = Clock::now();
  std::vector<Ranking> rankings;
  std::vector<std::string> truths;
  rankings.reserve(queries.size());
  double mrr_acc = 0.0;
  for (const QueryRecord& q : queries) {
    std::optional<bool> decision;
    if (use_oracle) {
      const auto it = oracle.find(q.rec.id);
      if (it == oracle.end()) throw DataError("no oracle label for query " + q.rec.id);
      decision = it->second;
    }
    IdentifyResult r = identify(q, p, cfg, decision);
    PerQueryRecord rec;
    rec.query_id = q.rec.id;
    rec.true_class = q.rec.class_id;
    rec.rank_before = r.stage1.position_of(q.rec.class_id);
    rec.rank_after = r.ranking.position_of(q.rec.class_id);
    rec.rr_before = reciprocal_rank(r.stage1, q.rec.class_id);
    rec.rr_after = reciprocal_rank(r.ranking, q.rec.class_id);
    rec.gate_positive = r.gate_positive;
    rec.stage2_invoked = r.stage2_invoked;
    report.per_query.push_back(rec);
    report.stage2_invocations += r.stage2_invoked ? 1 : 0;
    report.stage1_seconds += r.stage1_seconds;
    report.stage2_seconds += r.stage2_seconds;
    mrr_acc += rec.rr_after;
    rankings.push_back(std::move(r.ranking));
    truths.push_back(q.rec.class_id);
  }
  report.query_count = static_cast<int>(queries.size());
  report.recall1 = recall_at_k(rankings, truths, 1);
  report.recall2 = recall_at_k(rankings, truths, 2);
  report.recall3 = recall_at_k(rankings, truths, 3);
  report.mrr = mrr_acc / static_cast<double>(queries.size());
  report.wall_seconds = seconds_since(t0);
  return report;
}

namespace {

detail::json report_to_json(const EvalReport& report, bool include_timings) {
  detail::json j;
  j["recall_at_1"] = report.recall1;
  j["recall_at_2"] = report.recall2;
  j["recall_at_3"] = report.recall3;
  j["mrr"] = report.mrr;
  j["query_count"] = report.query_count;
  j["stage2_invocations"] = report.stage2_invocations;
  detail::json per = detail::json::array();
  for (const PerQueryRecord& r : report.per_query) {
    detail::json q;
    q["query_id"] = r.query_id;
    q["true_class"] = r.true_class;
    q["rank_before"] = r.rank_before;
    q["rank_after"] = r.rank_after;
    q["rr_before"] = r.rr_before;
    q["rr_after"] = r.rr_after;
    q["gate_positive"] = r.gate_positive;
    q["stage2_invoked"] = r.stage2_invoked;
    per.push_back(std::move(q));
  }
  j["per_query"] = std::move(per);
  if (include_timings) {
    j["timings"]["stage1_seconds"] = report.stage1_seconds;
    j["timings"]["stage2_seconds"] = report.stage2_seconds;
    j["timings"]["wall_seconds"] = report.wall_seconds;
  }
  return j;
}

}  // namespace

std::string eval_report_json(const EvalReport& report, bool include_timings) {
  return report_to_json(report, include_timings).dump(1) + "\n";
}

std::string eval_report_table(const EvalReport& report) {
  std::ostringstream os;
  os << "queries            " << report.query_count << "\n";
  os << "recall@1           " << report.recall1 << "\n";
  os << "recall@2           " << report.recall2 << "\n";
  os << "recall@3           " << report.recall3 << "\n";
  os << "mrr                " << report.mrr << "\n";
  os << "stage2 invocations " << report.stage2_invocations << "\n";
  os << "stage1 time (s)    " << report.stage1_seconds << "\n";
  os << "stage2 time (s)    " << report.stage2_seconds << "\n";
  return os.str();
}

void write_eval_report(const std::string& path, const EvalReport& report) {
  detail::write_json_file(path, report_to_json(report, true));
}

std::vector<BenchRow> bench_latency(const std::vector<QueryRecord>& queries,
                                    const LoadedPipeline& p, const PipelineConfig& cfg,
                                    int repetitions) {
  if (repetitions < 1) throw ConfigError("bench_latency: repetitions must be >= 1");
  if (queries.empty()) throw DataError("bench_latency: empty split");
  std::vector<BenchRow> rows;
  for (const std::string& mode : {"2d-only", "gated", "unconditional-3d"}) {
    PipelineConfig run = cfg;
    run.force_2d = mode == std::string("2d-only");
    run.force_3d = mode == std::string("unconditional-3d");
    run.oracle_labels.clear();
    std::vector<double> per_rep;
    int invocations = 0;
    for (int rep = 0; rep < repetitions; ++rep) {
      const auto t0 = Clock::now();
      invocations = 0;
      for (const QueryRecord& q : queries) {
        IdentifyResult r = identify(q, p, run);
        invocations += r.stage2_invoked ? 1 : 0;
      }
      per_rep.push_back(seconds_since(t0) / static_cast<double>(queries.size()));
    }
    BenchRow row;
    row.mode = mode;
    for (double v : per_rep) row.mean_seconds += v;
    row.mean_seconds /= per_rep.size();
    double var = 0;
    for (double v : per_rep) var += (v - row.mean_seconds) * (v - row.mean_seconds);
    row.stddev_seconds = per_rep.size() > 1 ? std::sqrt(var / (per_rep.size() - 1)) : 0.0;
    row.invocation_fraction = static_cast<double>(invocations) / queries.size();
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "mode                mean_s      stddev_s    stage2_fraction\n";
  for (const BenchRow& r : rows) {
    os << r.mode;
    for (std::size_t i = r.mode.size(); i < 20; ++i) os << ' ';
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-12.6f%-12.6f%.4f\n", r.mean_seconds, r.stddev_seconds,
                  r.invocation_fraction);
    os << buf;
  }
  return os.str();
}

M3atResult run_m3at_workflow(const std::vector<QueryRecord>& train_queries,
                             const LoadedPipeline& p, const PipelineConfig& cfg,
                             const GateTrainConfig& gate_cfg, const RerankFn& rerank_override) {
  if (train_queries.empty()) throw DataError("run_m3at_workflow: empty training split");
  if (!rerank_override && !p.has_matcher) {
    throw ConfigError("run_m3at_workflow: matcher checkpoint required");
  }
  M3atResult result;
  std::vector<Embedding> features;
  features.reserve(train_queries.size());
  PipelineConfig forced = cfg;
  forced.force_2d = false;
  forced.force_3d = true;
  forced.oracle_labels.clear();
  for (const QueryRecord& q : train_queries) {
    Ranking rank_3d;
    Ranking rank_2d;
    if (rerank_override) {
      PipelineConfig plain = cfg;
      plain.force_2d = true;
      IdentifyResult r = identify(q, p, plain);
      rank_2d = std::move(r.stage1);
      rank_3d = rerank_override(q, rank_2d);
    } else {
      IdentifyResult r = identify(q, p, forced);
      rank_2d = std::move(r.stage1);
      rank_3d = std::move(r.ranking);
    }
    result.labels.push_back(m3at_label(rank_2d, rank_3d, q.rec.class_id));
    features.push_back(embed_query(q, p, cfg.normalize));
  }
  GateTrainResult trained = train_gate(features, result.labels, gate_cfg);
  result.gate = std::move(trained.params);
  result.final_loss = trained.final_loss;
  result.positives = trained.positives;
  result.negatives = trained.negatives;
  result.all_negative_warning = trained.positives == 0;
  return result;
}

std::vector<SweepRow> sweep_candidate_pool(const std::vector<QueryRecord>& queries,
                                           const LoadedPipeline& p, const PipelineConfig& cfg,
                                           const std::vector<int>& ks) {
  std::vector<SweepRow> rows;
  // Stage-1 rankings do not depend on K.
  std::vector<Ranking> stage1;
  std::vector<std::string> truths;
  PipelineConfig plain = cfg;
  plain.force_2d = true;
  for (const QueryRecord& q : queries) {
    stage1.push_back(identify(q, p, plain).stage1);
    truths.push_back(q.rec.class_id);
  }
  for (int k : ks) {
    SweepRow row;
    row.k = k;
    row.stage1_recall_at_k = recall_at_k(stage1, truths, static_cast<std::size_t>(k));
    PipelineConfig run = cfg;
    run.k_candidates = k;
    std::vector<Ranking> finals;
    std::map<std::string, bool> oracle;
    const bool use_oracle = !run.oracle_labels.empty();
    if (use_oracle) oracle = load_oracle_labels(run.oracle_labels);
    for (const QueryRecord& q : queries) {
      std::optional<bool> decision;
      if (use_oracle) {
        const auto it = oracle.find(q.rec.id);
        if (it != oracle.end()) decision = it->second;
      }
      finals.push_back(identify(q, p, run, decision).ranking);
    }
    row.end_to_end_recall1 = recall_at_k(finals, truths, 1);
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << "k,stage1_recall_at_k,end_to_end_recall_at_1\n";
  for (const SweepRow& r : rows) {
    os << r.k << "," << r.stage1_recall_at_k << "," << r.end_to_end_recall1 << "\n";
  }
}

}  // namespace georank
