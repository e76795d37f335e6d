#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "georank/pipeline.hpp"

using namespace georank;
namespace fs = std::filesystem;

namespace {

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  if (out.empty()) throw ConfigError("empty K list");
  return out;
}

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  bool has_seed = false;
  bool force_2d = false;
  bool force_3d = false;
  std::string oracle_gate;
};

PipelineConfig resolve_config(const CommonArgs& common) {
  PipelineConfig cfg;
  if (!common.config_path.empty()) cfg = load_pipeline_config(common.config_path);
  if (common.has_seed) cfg.seed = common.seed;
  if (common.force_2d) cfg.force_2d = true;
  if (common.force_3d) cfg.force_3d = true;
  if (!common.oracle_gate.empty()) cfg.oracle_labels = common.oracle_gate;
  if (cfg.force_2d && cfg.force_3d) throw ConfigError("force-2d and force-3d are exclusive");
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& common) {
  cmd->add_option("--config", common.config_path, "pipeline config JSON");
  cmd->add_option("--seed", common.seed, "seed override")->each([&common](const std::string&) {
    common.has_seed = true;
  });
  cmd->add_flag("--force-2d", common.force_2d, "never invoke geometric re-ranking");
  cmd->add_flag("--force-3d", common.force_3d, "always invoke geometric re-ranking");
  cmd->add_option("--oracle-gate", common.oracle_gate, "gate decisions from a label file");
}

std::vector<Embedding> embeddings_for_records(const std::string& data_dir,
                                              const std::vector<ManifestRecord>& records,
                                              const FusionParams* fusion, bool normalize) {
  std::vector<Embedding> out;
  for (const ManifestRecord& rec : records) {
    std::vector<Embedding> views;
    for (const std::string& rel : rec.view_paths) {
      views.push_back(handcrafted_descriptor(read_rbim((fs::path(data_dir) / rel).string()), rec.id));
    }
    if (views.size() == 1) {
      out.push_back(std::move(views[0]));
    } else if (views.size() == 3 && fusion) {
      Embedding fused = fuse_multiview(views, *fusion);
      if (normalize) l2_normalize(fused.values);
      out.push_back(std::move(fused));
    } else {
      throw DataError("record " + rec.id + " has unsupported view count");
    }
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"two-stage object identification: embedding retrieval with gated geometric re-ranking"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic benchmark");
  std::string gen_out;
  DatasetConfig dc;
  CommonArgs gen_common;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--classes", dc.classes, "number of catalog classes");
  gen->add_option("--queries", dc.queries, "number of queries");
  gen->add_option("--views", dc.views_per_query, "views per query (1 or 3)");
  gen->add_option("--difficulty", dc.difficulty, "perturbation strength in [0,1]");
  gen->add_option("--train-fraction", dc.train_fraction, "fraction of queries tagged train");
  add_common(gen, gen_common);

  // embed
  auto* embed = app.add_subcommand("embed", "compute descriptors for a manifest subset");
  std::string embed_data, embed_split = "gallery", embed_out;
  CommonArgs embed_common;
  embed->add_option("--data", embed_data, "dataset directory")->required();
  embed->add_option("--split", embed_split, "gallery | train | test | queries");
  embed->add_option("--out", embed_out, "output embedding file")->required();
  add_common(embed, embed_common);

  // index
  auto* index_cmd = app.add_subcommand("index", "normalize and store gallery embeddings");
  std::string index_in, index_out;
  bool index_raw = false;
  index_cmd->add_option("--embeddings", index_in, "input embedding file")->required();
  index_cmd->add_option("--out", index_out, "output index file")->required();
  index_cmd->add_flag("--raw-dot", index_raw, "skip L2 normalization (raw dot-product scores)");

  // rank
  auto* rank_cmd = app.add_subcommand("rank", "stage-1 ranking of query embeddings");
  std::string rank_index, rank_queries, rank_out;
  std::size_t rank_limit = 16;
  bool rank_raw = false;
  rank_cmd->add_option("--index", rank_index, "index embedding file")->required();
  rank_cmd->add_option("--queries", rank_queries, "query embedding file")->required();
  rank_cmd->add_option("--limit", rank_limit, "entries per ranking");
  rank_cmd->add_flag("--raw-dot", rank_raw, "treat the index as unnormalized");
  rank_cmd->add_option("--out", rank_out, "output rankings JSON")->required();

  // train-matcher
  auto* tm = app.add_subcommand("train-matcher", "adapter training for the keypoint matcher");
  std::string tm_data, tm_out, tm_extractor_out;
  MatcherTrainConfig tm_cfg;
  int tm_stride = 4, tm_d3 = 32, tm_keypoints = 20;
  CommonArgs tm_common;
  tm->add_option("--data", tm_data, "dataset directory")->required();
  tm->add_option("--out", tm_out, "matcher checkpoint path")->required();
  tm->add_option("--extractor-out", tm_extractor_out, "extractor checkpoint path (created if absent)");
  tm->add_option("--epochs", tm_cfg.epochs, "training epochs");
  tm->add_option("--lr", tm_cfg.lr, "learning rate");
  tm->add_option("--tau", tm_cfg.tau, "candidate softmax temperature");
  tm->add_option("--stride", tm_stride, "feature stride");
  tm->add_option("--d3", tm_d3, "feature dimension");
  tm->add_option("--keypoints", tm_keypoints, "keypoints per view");
  add_common(tm, tm_common);

  // train-gate
  auto* tg = app.add_subcommand("train-gate", "MRR-delta labels plus weighted-CE gate training");
  std::string tg_data, tg_out, tg_labels_out;
  GateTrainConfig tg_cfg;
  double tg_ratio = 4.0;
  CommonArgs tg_common;
  tg->add_option("--data", tg_data, "dataset directory")->required();
  tg->add_option("--out", tg_out, "gate checkpoint path")->required();
  tg->add_option("--labels-out", tg_labels_out, "also write the computed labels");
  tg->add_option("--epochs", tg_cfg.epochs, "training epochs");
  tg->add_option("--lr", tg_cfg.lr, "learning rate");
  tg->add_option("--positive-weight", tg_ratio, "positive:negative class weight ratio");
  add_common(tg, tg_common);

  // identify
  auto* id_cmd = app.add_subcommand("identify", "rank one query through the full pipeline");
  std::string id_data, id_query;
  int id_top = 5;
  CommonArgs id_common;
  id_cmd->add_option("--data", id_data, "dataset directory")->required();
  id_cmd->add_option("--query", id_query, "query id from the manifest")->required();
  id_cmd->add_option("--top", id_top, "entries to print");
  add_common(id_cmd, id_common);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "metrics over a manifest split");
  std::string ev_data, ev_split = "test", ev_report, ev_emit_labels, ev_sweep_csv, ev_sweep_k;
  CommonArgs ev_common;
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "manifest split");
  ev->add_option("--report", ev_report, "write the full report JSON here");
  ev->add_option("--emit-labels", ev_emit_labels, "write MRR-delta labels (force-3d runs)");
  ev->add_option("--sweep-k", ev_sweep_k, "comma-separated candidate-pool sizes");
  ev->add_option("--sweep-csv", ev_sweep_csv, "write the K sweep CSV here");
  add_common(ev, ev_common);

  // bench-latency
  auto* bench = app.add_subcommand("bench-latency", "per-sample stage timings per mode");
  std::string bench_data, bench_split = "test";
  int bench_reps = 3;
  CommonArgs bench_common;
  bench->add_option("--data", bench_data, "dataset directory")->required();
  bench->add_option("--split", bench_split, "manifest split");
  bench->add_option("--reps", bench_reps, "repetitions");
  add_common(bench, bench_common);

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    if (gen_common.has_seed) dc.seed = gen_common.seed;
    DatasetManifest m = build_dataset(dc, gen_out);
    std::printf("wrote %zu gallery entries and %zu queries under %s\n", m.gallery.size(),
                m.queries.size(), gen_out.c_str());
    return 0;
  }

  if (embed->parsed()) {
    DatasetManifest m = load_manifest(embed_data);
    std::vector<ManifestRecord> records;
    if (embed_split == "gallery") {
      records = m.gallery;
    } else {
      for (const auto& r : m.queries) {
        if (embed_split == "queries" || r.split == embed_split) records.push_back(r);
      }
    }
    if (records.empty()) throw DataError("no records in split " + embed_split);
    FusionParams fusion = FusionParams::identity_average(kDescriptorDim);
    write_embeddings(embed_out, embeddings_for_records(embed_data, records, &fusion, true));
    std::printf("wrote %zu embeddings to %s\n", records.size(), embed_out.c_str());
    return 0;
  }

  if (index_cmd->parsed()) {
    auto embeds = read_embeddings(index_in);
    GalleryIndex index = GalleryIndex::build(embeds, !index_raw);
    std::vector<Embedding> stored;
    for (const auto& e : index.entries()) {
      Embedding emb;
      emb.source_id = e.id;
      emb.values = e.vec;
      stored.push_back(std::move(emb));
    }
    write_embeddings(index_out, stored);
    std::printf("indexed %zu references (%s) to %s\n", index.size(),
                index_raw ? "raw dot product" : "cosine", index_out.c_str());
    return 0;
  }

  if (rank_cmd->parsed()) {
    GalleryIndex index = GalleryIndex::build(read_embeddings(rank_index), !rank_raw);
    auto queries = read_embeddings(rank_queries);
    nlohmann::json out = nlohmann::json::array();
    for (const Embedding& q : queries) {
      Ranking r = rank_stage1(q, index, rank_limit);
      nlohmann::json jr;
      jr["query_id"] = q.source_id;
      jr["entries"] = nlohmann::json::array();
      for (const auto& e : r.entries) {
        jr["entries"].push_back({{"id", e.reference_id}, {"score", e.score}});
      }
      out.push_back(std::move(jr));
    }
    std::ofstream os(rank_out);
    if (!os) throw DataError("cannot write " + rank_out);
    os << out.dump(1) << "\n";
    std::printf("ranked %zu queries to %s\n", queries.size(), rank_out.c_str());
    return 0;
  }

  if (tm->parsed()) {
    PipelineConfig cfg = resolve_config(tm_common);
    DatasetManifest m = load_manifest(tm_data);

    ExtractorParams extractor;
    if (!cfg.extractor_checkpoint.empty() && fs::exists(cfg.extractor_checkpoint)) {
      extractor = load_extractor(cfg.extractor_checkpoint);
    } else {
      ExtractorConfig ec;
      ec.stride = tm_stride;
      ec.d3 = tm_d3;
      extractor = ExtractorParams::make(ec, mix_seed(cfg.seed, 0xe7));
      const std::string ex_path = tm_extractor_out.empty()
                                      ? (fs::path(tm_out).parent_path() / "extractor.json").string()
                                      : tm_extractor_out;
      save_extractor(ex_path, extractor);
      std::printf("wrote fresh extractor checkpoint to %s\n", ex_path.c_str());
    }

    MatcherConfig mc;
    mc.stride = extractor.cfg.stride;
    mc.d3 = extractor.cfg.d3;
    mc.ffn_dim = extractor.cfg.ffn_dim;
    mc.keypoints = tm_keypoints;
    mc.tau = tm_cfg.tau;
    MatcherParams matcher = MatcherParams::make(mc, mix_seed(cfg.seed, 0x3a));

    std::vector<Embedding> gallery_embeds;
    std::map<std::string, ImageView> gallery_views;
    for (const auto& rec : m.gallery) {
      ImageView img = read_rbim((fs::path(tm_data) / rec.view_paths[0]).string());
      gallery_embeds.push_back(handcrafted_descriptor(img, rec.id));
      gallery_views.emplace(rec.id, std::move(img));
    }
    GalleryIndex index = GalleryIndex::build(gallery_embeds, cfg.normalize);
    FusionParams fusion = FusionParams::identity_average(index.dim());

    std::vector<TrainQuery> train;
    std::vector<Ranking> rankings;
    for (const auto& rec : m.queries) {
      if (rec.split != "train") continue;
      TrainQuery q;
      q.query_id = rec.id;
      q.true_class = rec.class_id;
      for (const auto& rel : rec.view_paths) {
        q.views.push_back(read_rbim((fs::path(tm_data) / rel).string()));
      }
      std::vector<Embedding> views;
      for (std::size_t v = 0; v < q.views.size(); ++v) {
        views.push_back(handcrafted_descriptor(q.views[v], rec.id));
      }
      Embedding emb;
      if (views.size() == 3) {
        emb = fuse_multiview(views, fusion);
        if (cfg.normalize) l2_normalize(emb.values);
      } else {
        emb = views[0];
      }
      rankings.push_back(rank_stage1(emb, index, index.size()));
      train.push_back(std::move(q));
    }

    tm_cfg.k_pool = cfg.k_candidates;
    tm_cfg.seed = mix_seed(cfg.seed, 0x7a);
    MatcherTrainResult result =
        train_matcher_adapters(train, rankings, gallery_views, extractor, matcher, tm_cfg);
    save_matcher(tm_out, result.params);
    std::printf("trained on %d queries (%d skipped), %d steps, final epoch loss %.4f\n",
                result.used_queries, result.skipped_queries, result.steps, result.final_epoch_loss);
    std::printf("wrote matcher checkpoint to %s\n", tm_out.c_str());
    return 0;
  }

  if (tg->parsed()) {
    PipelineConfig cfg = resolve_config(tg_common);
    if (cfg.matcher_checkpoint.empty()) throw ConfigError("train-gate needs matcher_checkpoint in config");
    DatasetManifest m = load_manifest(tg_data);
    LoadedPipeline p = load_pipeline(tg_data, m, cfg);
    auto train = load_queries(tg_data, m, "train");
    tg_cfg.weight_positive = static_cast<float>(tg_ratio);
    tg_cfg.weight_negative = 1.f;
    tg_cfg.seed = mix_seed(cfg.seed, 0x6e);
    M3atResult result = run_m3at_workflow(train, p, cfg, tg_cfg);
    save_gate(tg_out, result.gate, tg_cfg.seed);
    if (!tg_labels_out.empty()) save_gate_labels(tg_labels_out, result.labels);
    std::printf("labels: %d positive / %d negative%s\n", result.positives, result.negatives,
                result.all_negative_warning ? " (warning: no positives)" : "");
    std::printf("final gate loss %.5f; wrote %s\n", result.final_loss, tg_out.c_str());
    return 0;
  }

  if (id_cmd->parsed()) {
    PipelineConfig cfg = resolve_config(id_common);
    DatasetManifest m = load_manifest(id_data);
    LoadedPipeline p = load_pipeline(id_data, m, cfg);
    auto all = load_queries(id_data, m, "");
    const QueryRecord* found = nullptr;
    for (const auto& q : all) {
      if (q.rec.id == id_query) found = &q;
    }
    if (!found) throw DataError("query id not in manifest: " + id_query);
    std::optional<bool> oracle;
    if (!cfg.oracle_labels.empty()) {
      auto labels = load_oracle_labels(cfg.oracle_labels);
      const auto it = labels.find(id_query);
      if (it != labels.end()) oracle = it->second;
    }
    IdentifyResult r = identify(*found, p, cfg, oracle);
    std::printf("query %s (true class %s), stage-2 %s\n", id_query.c_str(),
                found->rec.class_id.c_str(), r.stage2_invoked ? "invoked" : "skipped");
    for (int i = 0; i < id_top && i < static_cast<int>(r.ranking.entries.size()); ++i) {
      std::printf("%2d. %s  %.6f\n", i + 1, r.ranking.entries[i].reference_id.c_str(),
                  r.ranking.entries[i].score);
    }
    return 0;
  }

  if (ev->parsed()) {
    PipelineConfig cfg = resolve_config(ev_common);
    DatasetManifest m = load_manifest(ev_data);
    LoadedPipeline p = load_pipeline(ev_data, m, cfg);
    auto queries = load_queries(ev_data, m, ev_split);
    if (queries.empty()) throw DataError("empty split " + ev_split);

    EvalReport report = evaluate(queries, p, cfg);
    std::fputs(eval_report_table(report).c_str(), stdout);
    if (!ev_report.empty()) write_eval_report(ev_report, report);

    if (!ev_emit_labels.empty()) {
      if (!cfg.force_3d) throw ConfigError("--emit-labels requires --force-3d");
      std::vector<GateLabel> labels;
      for (const auto& q : report.per_query) {
        GateLabel l;
        l.query_id = q.query_id;
        l.rr_before = q.rr_before;
        l.rr_after = q.rr_after;
        l.y = q.rr_after > q.rr_before ? 1 : 0;
        labels.push_back(l);
      }
      save_gate_labels(ev_emit_labels, labels);
      std::printf("wrote %zu labels to %s\n", labels.size(), ev_emit_labels.c_str());
    }

    if (!ev_sweep_k.empty()) {
      if (ev_sweep_csv.empty()) throw ConfigError("--sweep-k requires --sweep-csv");
      auto rows = sweep_candidate_pool(queries, p, cfg, parse_int_list(ev_sweep_k));
      write_sweep_csv(ev_sweep_csv, rows);
      std::printf("wrote K sweep to %s\n", ev_sweep_csv.c_str());
    }
    return 0;
  }

  if (bench->parsed()) {
    PipelineConfig cfg = resolve_config(bench_common);
    DatasetManifest m = load_manifest(bench_data);
    LoadedPipeline p = load_pipeline(bench_data, m, cfg);
    auto queries = load_queries(bench_data, m, bench_split);
    auto rows = bench_latency(queries, p, cfg, bench_reps);
    std::fputs(bench_table(rows).c_str(), stdout);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    const std::string what = e.what();
    if (what.find("non-finite") != std::string::npos) {
      std::fprintf(stderr, "numerical failure: %s\n", what.c_str());
      return 4;
    }
    std::fprintf(stderr, "data error: %s\n", what.c_str());
    return 3;
  }
}
