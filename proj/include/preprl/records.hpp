#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "preprl/pipeline.hpp"

namespace preprl {

using json = nlohmann::json;

template <typename T>
json trace_to_json(const EpisodeTrace<T>& t) {
  std::vector<std::string> distortion;
  for (const auto& id : t.distortion) distortion.push_back(id.str());
  return {{"image_id", t.image_id},  {"true_label", t.true_label}, {"steps", t.steps},
          {"predicted", t.predicted}, {"q_values", t.q_values},    {"distortion", distortion}};
}

template <typename T>
EpisodeTrace<T> trace_from_json(const json& j) {
  EpisodeTrace<T> t;
  t.image_id = j.at("image_id").get<std::size_t>();
  t.true_label = j.at("true_label").get<std::size_t>();
  t.steps = j.at("steps").get<std::vector<std::string>>();
  t.predicted = j.at("predicted").get<std::size_t>();
  t.q_values = j.at("q_values").get<std::vector<double>>();
  if (j.contains("distortion"))
    for (const auto& s : j.at("distortion").get<std::vector<std::string>>())
      t.distortion.push_back(TransformId::parse(s));
  return t;
}

inline json cell_to_json(const MetricCell& c) {
  return {{"model", c.model}, {"arch", c.arch}, {"dataset", c.dataset}, {"condition", c.condition},
          {"mean", c.mean},   {"std", c.std},   {"runs", c.runs}};
}

inline json record_to_json(const RunRecord& r, const std::string& arch,
                           const std::string& dataset) {
  return {{"run", r.run},   {"seed", r.seed},           {"model", r.model},
          {"arch", arch},   {"dataset", dataset},       {"condition", r.condition},
          {"accuracy", r.accuracy}};
}

inline RunRecord record_from_json(const json& j) {
  return {j.at("run").get<std::size_t>(), j.at("seed").get<std::uint64_t>(),
          j.at("model").get<std::string>(), j.at("condition").get<std::string>(),
          j.at("accuracy").get<double>()};
}

inline void write_jsonl(const std::string& path, const std::vector<json>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : rows) out << r.dump() << "\n";
}

inline std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<json> rows;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace preprl
