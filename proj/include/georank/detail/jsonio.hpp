#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "georank/ops.hpp"

namespace georank::detail {

using nlohmann::json;

inline json matrix_to_json(const Tensorf& t) {
  json rows = json::array();
  if (t.rank() == 1) {
    for (std::size_t i = 0; i < t.size(); ++i) rows.push_back(static_cast<double>(t[i]));
    return rows;
  }
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < t.dim(1); ++j) row.push_back(static_cast<double>(t.at(i, j)));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Tensorf matrix_from_json(const json& j) {
  if (j.empty()) return Tensorf();
  if (!j[0].is_array()) {
    Tensorf t({j.size()});
    for (std::size_t i = 0; i < j.size(); ++i) t[i] = static_cast<float>(j[i].get<double>());
    return t;
  }
  const std::size_t rows = j.size(), cols = j[0].size();
  Tensorf t({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    if (j[i].size() != cols) throw std::runtime_error("ragged weight matrix in checkpoint");
    for (std::size_t c = 0; c < cols; ++c) t.at(i, c) = static_cast<float>(j[i][c].get<double>());
  }
  return t;
}

inline json linear_to_json(const LinearT<float>& p) {
  json j;
  j["w"] = matrix_to_json(p.w);
  if (p.has_bias()) j["b"] = matrix_to_json(p.b);
  return j;
}

inline LinearT<float> linear_from_json(const json& j) {
  LinearT<float> p;
  p.w = matrix_from_json(j.at("w"));
  if (j.contains("b")) p.b = matrix_from_json(j.at("b"));
  return p;
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << j.dump(1) << "\n";
}

inline json read_json_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  json j;
  is >> j;
  return j;
}

}  // namespace georank::detail
