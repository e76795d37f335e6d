#include "georank/extractor.hpp"

#include <cstring>
#include <sstream>

#include "georank/detail/binio.hpp"
#include "georank/detail/jsonio.hpp"

namespace georank {

void write_feature_maps(const std::string& path, const std::vector<FeatureMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("write_feature_maps: empty set");
  const int h = maps[0].h, w = maps[0].w, d = maps[0].d;
  auto os = detail::open_out(path);
  os.write("RBF1", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(maps.size()));
  detail::write_u32(os, static_cast<std::uint32_t>(h));
  detail::write_u32(os, static_cast<std::uint32_t>(w));
  detail::write_u32(os, static_cast<std::uint32_t>(d));
  for (const FeatureMap& m : maps) {
    if (m.h != h || m.w != w || m.d != d) throw std::invalid_argument("write_feature_maps: shape mismatch");
    detail::write_f32(os, m.data.data(), m.data.size());
  }
  if (!os) throw std::runtime_error("failed writing " + path);
}

std::vector<FeatureMap> read_feature_maps(const std::string& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "RBF1");
  const std::uint32_t count = detail::read_u32(is);
  const int h = static_cast<int>(detail::read_u32(is));
  const int w = static_cast<int>(detail::read_u32(is));
  const int d = static_cast<int>(detail::read_u32(is));
  if (count == 0 || h <= 0 || w <= 0 || d <= 0) throw std::runtime_error("bad feature map file " + path);
  std::vector<FeatureMap> maps;
  maps.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureMap m(h, w, d);
    detail::read_f32(is, m.data.data(), m.data.size());
    maps.push_back(std::move(m));
  }
  return maps;
}

namespace {

detail::json config_to_json(const ExtractorConfig& cfg) {
  detail::json j;
  j["d3"] = cfg.d3;
  j["heads"] = cfg.heads;
  j["blocks"] = cfg.blocks;
  j["stride"] = cfg.stride;
  j["ffn_dim"] = cfg.ffn_dim;
  j["pe_scale"] = cfg.pe_scale;
  j["input_standardize"] = cfg.input_standardize;
  j["input_blur_sigma"] = cfg.input_blur_sigma;
  return j;
}

ExtractorConfig config_from_json(const detail::json& j) {
  ExtractorConfig cfg;
  cfg.d3 = j.at("d3").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.blocks = j.at("blocks").get<int>();
  cfg.stride = j.at("stride").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.pe_scale = j.value("pe_scale", cfg.pe_scale);
  cfg.input_standardize = j.value("input_standardize", cfg.input_standardize);
  cfg.input_blur_sigma = j.value("input_blur_sigma", cfg.input_blur_sigma);
  return cfg;
}

}  // namespace

void save_extractor(const std::string& path, const ExtractorParams& params) {
  detail::json j;
  j["format"] = "extractor-v1";
  j["seed"] = params.seed;
  j["config"] = config_to_json(params.cfg);
  detail::json w;
  w["patch_embed"] = detail::linear_to_json(params.patch_embed);
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const std::string key = "block" + std::to_string(b);
    const auto& blk = params.blocks[b];
    w[key]["global"] = blk.global;
    w[key]["wq"] = detail::linear_to_json(blk.attn.wq);
    w[key]["wk"] = detail::linear_to_json(blk.attn.wk);
    w[key]["wv"] = detail::linear_to_json(blk.attn.wv);
    w[key]["wo"] = detail::linear_to_json(blk.attn.wo);
    w[key]["fc1"] = detail::linear_to_json(blk.ffn.fc1);
    w[key]["fc2"] = detail::linear_to_json(blk.ffn.fc2);
  }
  j["weights"] = std::move(w);
  detail::write_json_file(path, j);
}

ExtractorParams load_extractor(const std::string& path) {
  const detail::json j = detail::read_json_file(path);
  if (j.value("format", "") != "extractor-v1") {
    throw std::runtime_error("not an extractor checkpoint: " + path);
  }
  ExtractorParams p;
  p.seed = j.value("seed", 0ull);
  p.cfg = config_from_json(j.at("config"));
  const auto& w = j.at("weights");
  p.patch_embed = detail::linear_from_json(w.at("patch_embed"));
  for (int b = 0; b < p.cfg.blocks; ++b) {
    const auto& jb = w.at("block" + std::to_string(b));
    ExtractorBlockT<float> blk;
    blk.global = jb.at("global").get<bool>();
    blk.attn.wq = detail::linear_from_json(jb.at("wq"));
    blk.attn.wk = detail::linear_from_json(jb.at("wk"));
    blk.attn.wv = detail::linear_from_json(jb.at("wv"));
    blk.attn.wo = detail::linear_from_json(jb.at("wo"));
    blk.ffn.fc1 = detail::linear_from_json(jb.at("fc1"));
    blk.ffn.fc2 = detail::linear_from_json(jb.at("fc2"));
    p.blocks.push_back(std::move(blk));
  }
  return p;
}

std::string extractor_weight_bytes(const ExtractorParams& params) {
  std::ostringstream os;
  auto dump = [&os](const LinearT<float>& p) {
    os.write(reinterpret_cast<const char*>(p.w.data()), static_cast<std::streamsize>(p.w.size() * 4));
    if (p.has_bias()) {
      os.write(reinterpret_cast<const char*>(p.b.data()), static_cast<std::streamsize>(p.b.size() * 4));
    }
  };
  dump(params.patch_embed);
  for (const auto& blk : params.blocks) {
    dump(blk.attn.wq);
    dump(blk.attn.wk);
    dump(blk.attn.wv);
    dump(blk.attn.wo);
    dump(blk.ffn.fc1);
    dump(blk.ffn.fc2);
  }
  return os.str();
}

}  // namespace georank
