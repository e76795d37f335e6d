#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "georank/gate.hpp"
#include "georank/matcher.hpp"
#include "georank/synth.hpp"

namespace georank {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PipelineConfig {
  int k_candidates = 16;
  int keypoints = 20;
  bool gate_enabled = true;
  bool force_2d = false;
  bool force_3d = false;
  bool normalize = true;
  std::uint64_t seed = 1;
  std::string gate_checkpoint;
  std::string matcher_checkpoint;
  std::string extractor_checkpoint;
  std::string oracle_labels;      // per-query decisions override the gate
  std::string query_embeddings;   // optional file-based embedding provider
  std::string gallery_embeddings;
};

PipelineConfig load_pipeline_config(const std::string& path);
void save_pipeline_config(const std::string& path, const PipelineConfig& cfg);

struct QueryRecord {
  ManifestRecord rec;
  std::vector<ImageView> views;
};

// Immutable state shared by all queries of a run.
struct LoadedPipeline {
  GalleryIndex index;
  std::map<std::string, ImageView> gallery_views;  // reference id -> canonical view
  std::map<std::string, Embedding> query_embeddings;  // optional file provider
  FusionParams fusion;
  ExtractorParams extractor;
  MatcherParams matcher;
  GateParams gate;
  bool has_gate = false;
  bool has_matcher = false;
};

LoadedPipeline load_pipeline(const std::string& dataset_dir, const DatasetManifest& manifest,
                             const PipelineConfig& cfg);

std::vector<QueryRecord> load_queries(const std::string& dataset_dir,
                                      const DatasetManifest& manifest, const std::string& split);

Embedding embed_query(const QueryRecord& q, const LoadedPipeline& p, bool normalize);

struct IdentifyResult {
  Ranking ranking;
  Ranking stage1;
  bool gate_positive = false;
  bool stage2_invoked = false;
  double stage1_seconds = 0.0;
  double stage2_seconds = 0.0;
};

// Stage-1 ranking, gate decision, conditional geometric re-ranking of the
// top-K block. `oracle_decision`, when present, overrides the gate.
IdentifyResult identify(const QueryRecord& query, const LoadedPipeline& p,
                        const PipelineConfig& cfg,
                        std::optional<bool> oracle_decision = std::nullopt);

struct PerQueryRecord {
  std::string query_id;
  std::string true_class;
  int rank_before = 0;  // 1-based, 0 when absent
  int rank_after = 0;
  float rr_before = 0.f;
  float rr_after = 0.f;
  bool gate_positive = false;
  bool stage2_invoked = false;
};

struct EvalReport {
  double recall1 = 0, recall2 = 0, recall3 = 0;
  double mrr = 0;
  int stage2_invocations = 0;
  int query_count = 0;
  std::vector<PerQueryRecord> per_query;
  double stage1_seconds = 0, stage2_seconds = 0, wall_seconds = 0;
};

std::string eval_report_json(const EvalReport& report, bool include_timings = true);
std::string eval_report_table(const EvalReport& report);
void write_eval_report(const std::string& path, const EvalReport& report);

EvalReport evaluate(const std::vector<QueryRecord>& queries, const LoadedPipeline& p,
                    const PipelineConfig& cfg);

// Oracle labels: query id -> use_3d decision, read/written as gate labels.
std::map<std::string, bool> load_oracle_labels(const std::string& path);
void save_gate_labels(const std::string& path, const std::vector<GateLabel>& labels);
std::vector<GateLabel> load_gate_labels(const std::string& path);

struct BenchRow {
  std::string mode;
  double mean_seconds = 0;
  double stddev_seconds = 0;
  double invocation_fraction = 0;
};

std::vector<BenchRow> bench_latency(const std::vector<QueryRecord>& queries,
                                    const LoadedPipeline& p, const PipelineConfig& cfg,
                                    int repetitions);
std::string bench_table(const std::vector<BenchRow>& rows);

using RerankFn = std::function<Ranking(const QueryRecord&, const Ranking& stage1)>;

struct M3atResult {
  GateParams gate;
  std::vector<GateLabel> labels;
  float final_loss = 0.f;
  int positives = 0;
  int negatives = 0;
  bool all_negative_warning = false;
};

// Unconditional stage-2 pass over the training queries, MRR-delta labels,
// then weighted-CE gate training. `rerank_override` lets tests plant the
// stage-2 behaviour.
M3atResult run_m3at_workflow(const std::vector<QueryRecord>& train_queries,
                             const LoadedPipeline& p, const PipelineConfig& cfg,
                             const GateTrainConfig& gate_cfg,
                             const RerankFn& rerank_override = nullptr);

// K-sweep (stage-1 recall at K and end-to-end recall@1) written as CSV.
struct SweepRow {
  int k = 0;
  double stage1_recall_at_k = 0;
  double end_to_end_recall1 = 0;
};
std::vector<SweepRow> sweep_candidate_pool(const std::vector<QueryRecord>& queries,
                                           const LoadedPipeline& p, const PipelineConfig& cfg,
                                           const std::vector<int>& ks);
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

}  // namespace georank
