#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "georank/pipeline.hpp"

using namespace georank;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  std::string dir;
  DatasetManifest manifest;
  PipelineConfig cfg;

  Fixture() {
    dir = (fs::temp_directory_path() / "georank_pipe_fixture").string();
    fs::remove_all(dir);
    DatasetConfig dc;
    dc.classes = 8;
    dc.queries = 16;
    dc.difficulty = 0.45;
    dc.seed = 71;
    manifest = build_dataset(dc, dir);

    ExtractorConfig ec;
    ec.d3 = 16;
    ec.heads = 2;
    ec.blocks = 4;
    ec.stride = 8;
    ec.ffn_dim = 32;
    ExtractorParams ex = ExtractorParams::make(ec, 72);
    save_extractor(dir + "/extractor.json", ex);

    MatcherConfig mc;
    mc.keypoints = 8;
    mc.d3 = 16;
    mc.stride = 8;
    mc.ffn_dim = 32;
    mc.adapter_dim = 4;
    MatcherParams matcher = MatcherParams::make(mc, 73);
    save_matcher(dir + "/matcher.json", matcher);

    cfg.k_candidates = 4;
    cfg.extractor_checkpoint = dir + "/extractor.json";
    cfg.matcher_checkpoint = dir + "/matcher.json";
    cfg.gate_enabled = false;
    cfg.seed = 74;
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("identify honours force flags and gate-negative path") {
  Fixture& f = fixture();
  LoadedPipeline p = load_pipeline(f.dir, f.manifest, f.cfg);
  auto queries = load_queries(f.dir, f.manifest, "");
  REQUIRE(queries.size() == 16);

  // no gate loaded and not forced: stage-1 ranking is returned unchanged
  PipelineConfig plain = f.cfg;
  IdentifyResult r = identify(queries[0], p, plain);
  CHECK_FALSE(r.stage2_invoked);
  REQUIRE(r.ranking.entries.size() == r.stage1.entries.size());
  for (std::size_t i = 0; i < r.ranking.entries.size(); ++i) {
    CHECK(r.ranking.entries[i].reference_id == r.stage1.entries[i].reference_id);
    CHECK(r.ranking.entries[i].score == r.stage1.entries[i].score);
  }

  // force-2d: stage 2 never invoked
  PipelineConfig f2 = f.cfg;
  f2.force_2d = true;
  CHECK_FALSE(identify(queries[1], p, f2).stage2_invoked);

  // force-3d with the untrained matcher: every confidence is 0.5, the
  // tie-break reproduces the stage-1 order
  PipelineConfig f3 = f.cfg;
  f3.force_3d = true;
  IdentifyResult r3 = identify(queries[2], p, f3);
  CHECK(r3.stage2_invoked);
  for (std::size_t i = 0; i < r3.ranking.entries.size(); ++i) {
    CHECK(r3.ranking.entries[i].reference_id == r3.stage1.entries[i].reference_id);
  }
}

TEST_CASE("identify preserves the tail beyond K") {
  Fixture& f = fixture();
  LoadedPipeline p = load_pipeline(f.dir, f.manifest, f.cfg);
  auto queries = load_queries(f.dir, f.manifest, "test");
  PipelineConfig f3 = f.cfg;
  f3.force_3d = true;
  for (const auto& q : queries) {
    IdentifyResult r = identify(q, p, f3);
    for (std::size_t i = f3.k_candidates; i < r.ranking.entries.size(); ++i) {
      CHECK(r.ranking.entries[i].reference_id == r.stage1.entries[i].reference_id);
    }
  }
}

TEST_CASE("evaluate on the easy dataset reaches perfect recall in 2d mode") {
  const std::string dir = (fs::temp_directory_path() / "georank_pipe_easy").string();
  fs::remove_all(dir);
  DatasetConfig dc;
  dc.classes = 6;
  dc.queries = 8;
  dc.difficulty = 0.0;
  dc.seed = 81;
  DatasetManifest m = build_dataset(dc, dir);
  PipelineConfig cfg;
  cfg.force_2d = true;
  LoadedPipeline p = load_pipeline(dir, m, cfg);
  auto queries = load_queries(dir, m, "");
  EvalReport report = evaluate(queries, p, cfg);
  CHECK(report.recall1 == doctest::Approx(1.0));
  CHECK(report.stage2_invocations == 0);
  fs::remove_all(dir);
}

TEST_CASE("evaluate accounting and audit-trail consistency") {
  Fixture& f = fixture();
  LoadedPipeline p = load_pipeline(f.dir, f.manifest, f.cfg);
  auto queries = load_queries(f.dir, f.manifest, "test");
  PipelineConfig f3 = f.cfg;
  f3.force_3d = true;
  EvalReport report = evaluate(queries, p, f3);
  CHECK(report.stage2_invocations == static_cast<int>(queries.size()));

  // recall values recomputable from the per-query audit trail
  for (std::size_t k = 1; k <= 3; ++k) {
    int hits = 0;
    for (const auto& q : report.per_query) {
      if (q.rank_after > 0 && q.rank_after <= static_cast<int>(k)) ++hits;
    }
    const double expect = static_cast<double>(hits) / report.per_query.size();
    const double got = k == 1 ? report.recall1 : k == 2 ? report.recall2 : report.recall3;
    CHECK(got == doctest::Approx(expect));
  }

  // single query: mrr equals that query's reciprocal rank
  std::vector<QueryRecord> one(queries.begin(), queries.begin() + 1);
  EvalReport single = evaluate(one, p, f3);
  CHECK(single.mrr == doctest::Approx(single.per_query[0].rr_after));

  CHECK_THROWS_AS(evaluate({}, p, f3), DataError);
}

TEST_CASE("m3at workflow with a planted reranker labels exactly the planted set") {
  Fixture& f = fixture();
  LoadedPipeline p = load_pipeline(f.dir, f.manifest, f.cfg);
  auto queries = load_queries(f.dir, f.manifest, "train");
  REQUIRE(queries.size() >= 4);

  std::set<std::string> planted;
  for (std::size_t i = 0; i < queries.size(); i += 2) planted.insert(queries[i].rec.id);

  RerankFn plant = [&](const QueryRecord& q, const Ranking& stage1) {
    Ranking out = stage1;
    if (planted.count(q.rec.id)) {
      // move the true class to the front
      for (std::size_t i = 0; i < out.entries.size(); ++i) {
        if (out.entries[i].reference_id == q.rec.class_id) {
          RankedEntry e = out.entries[i];
          out.entries.erase(out.entries.begin() + i);
          out.entries.insert(out.entries.begin(), e);
          break;
        }
      }
    }
    return out;
  };

  GateTrainConfig gc;
  gc.epochs = 50;
  M3atResult result = run_m3at_workflow(queries, p, f.cfg, gc, plant);
  REQUIRE(result.labels.size() == queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& label = result.labels[i];
    // positive iff planted and the query was not already rank 1
    const bool expected = planted.count(queries[i].rec.id) && label.rr_before < 1.f;
    CHECK(label.y == (expected ? 1 : 0));
  }

  // a reranker that never changes anything yields all-negative labels + warning
  RerankFn noop = [](const QueryRecord&, const Ranking& stage1) { return stage1; };
  M3atResult negative = run_m3at_workflow(queries, p, f.cfg, gc, noop);
  CHECK(negative.all_negative_warning);
  for (const auto& l : negative.labels) CHECK(l.y == 0);
}

TEST_CASE("m3at workflow is deterministic including checkpoint bytes") {
  Fixture& f = fixture();
  LoadedPipeline p = load_pipeline(f.dir, f.manifest, f.cfg);
  auto queries = load_queries(f.dir, f.manifest, "train");
  GateTrainConfig gc;
  gc.epochs = 30;
  gc.seed = 17;
  PipelineConfig cfg = f.cfg;
  M3atResult a = run_m3at_workflow(queries, p, cfg, gc);
  M3atResult b = run_m3at_workflow(queries, p, cfg, gc);
  const std::string pa = f.dir + "/gate_a.json";
  const std::string pb = f.dir + "/gate_b.json";
  save_gate(pa, a.gate, gc.seed);
  save_gate(pb, b.gate, gc.seed);
  std::ifstream ia(pa, std::ios::binary), ib(pb, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(ia)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(ib)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK(!sa.empty());
}

TEST_CASE("oracle labels and gate labels round trip") {
  Fixture& f = fixture();
  std::vector<GateLabel> labels;
  for (int i = 0; i < 5; ++i) {
    GateLabel l;
    l.query_id = "q" + std::to_string(i);
    l.y = i % 2;
    l.rr_before = 0.25f * i;
    l.rr_after = 0.3f * i;
    labels.push_back(l);
  }
  const std::string path = f.dir + "/labels.json";
  save_gate_labels(path, labels);
  auto back = load_gate_labels(path);
  REQUIRE(back.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(back[i].query_id == labels[i].query_id);
    CHECK(back[i].y == labels[i].y);
  }
  auto oracle = load_oracle_labels(path);
  CHECK(oracle.at("q1"));
  CHECK_FALSE(oracle.at("q0"));
}

TEST_CASE("pipeline config round trip and validation") {
  Fixture& f = fixture();
  PipelineConfig cfg;
  cfg.k_candidates = 7;
  cfg.keypoints = 11;
  cfg.gate_checkpoint = "gate.json";
  const std::string path = f.dir + "/cfg.json";
  save_pipeline_config(path, cfg);
  PipelineConfig back = load_pipeline_config(path);
  CHECK(back.k_candidates == 7);
  CHECK(back.keypoints == 11);
  CHECK(back.gate_checkpoint == "gate.json");

  CHECK_THROWS_AS(load_pipeline_config(f.dir + "/missing.json"), ConfigError);
  PipelineConfig bad;
  bad.force_2d = true;
  bad.force_3d = true;
  save_pipeline_config(path, bad);
  CHECK_THROWS_AS(load_pipeline_config(path), ConfigError);
}

TEST_CASE("bench_latency shapes and accounting") {
  Fixture& f = fixture();
  LoadedPipeline p = load_pipeline(f.dir, f.manifest, f.cfg);
  auto queries = load_queries(f.dir, f.manifest, "test");
  PipelineConfig cfg = f.cfg;
  auto rows = bench_latency(queries, p, cfg, 1);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].mode == "2d-only");
  CHECK(rows[0].invocation_fraction == 0.0);
  CHECK(rows[2].mode == "unconditional-3d");
  CHECK(rows[2].invocation_fraction == 1.0);
  // strictly less work in 2d-only than unconditional-3d
  CHECK(rows[0].mean_seconds < rows[2].mean_seconds);
  CHECK_THROWS_AS(bench_latency(queries, p, cfg, 0), ConfigError);
}
