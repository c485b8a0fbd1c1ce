#include "evalkit/verdict.hpp"

#include <fstream>

#include <fmt/format.h>

#include "evalkit/errors.hpp"

namespace evalkit {

nlohmann::ordered_json to_json(const EvalVerdict& v) {
  nlohmann::ordered_json j;
  j["dialogue_id"] = v.dialogue_id;
  j["tutor_id"] = v.tutor_id;
  j["dimension"] = dimension_code(v.dimension);
  j["label"] = prediction_name(v.label);
  j["evaluator_id"] = v.evaluator_id;
  j["raw_output"] = v.raw_output;
  j["latency_seconds"] = v.latency_seconds;
  j["error"] = v.error ? nlohmann::ordered_json(*v.error) : nlohmann::ordered_json(nullptr);
  return j;
}

EvalVerdict verdict_from_json(const nlohmann::json& j) {
  try {
    EvalVerdict v;
    v.dialogue_id = j.at("dialogue_id").get<std::string>();
    v.tutor_id = j.at("tutor_id").get<std::string>();
    const auto dim = parse_dimension(j.at("dimension").get<std::string>());
    if (!dim) throw SchemaError(fmt::format("unknown dimension {}", j.at("dimension").dump()));
    v.dimension = *dim;
    const auto label = parse_prediction(j.at("label").get<std::string>());
    if (!label) throw SchemaError(fmt::format("unknown label {}", j.at("label").dump()));
    v.label = *label;
    v.evaluator_id = j.at("evaluator_id").get<std::string>();
    v.raw_output = j.at("raw_output").get<std::string>();
    v.latency_seconds = j.value("latency_seconds", 0.0);
    if (j.contains("error") && !j["error"].is_null()) v.error = j["error"].get<std::string>();
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("malformed verdict: {}", e.what()));
  }
}

void save_verdicts(const std::vector<EvalVerdict>& verdicts, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& v : verdicts) out << to_json(v).dump() << '\n';
  out.flush();
  if (!out) throw StorageError(fmt::format("cannot write verdicts to '{}'", path.string()));
}

std::vector<EvalVerdict> load_verdicts(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EnvironmentError(fmt::format("cannot open verdict file '{}'", path.string()));
  std::vector<EvalVerdict> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(verdict_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(fmt::format("{}:{}: {}", path.string(), n, e.what()));
    } catch (const SchemaError& e) {
      throw SchemaError(fmt::format("{}:{}: {}", path.string(), n, e.what()));
    }
  }
  return out;
}

}  // namespace evalkit
