#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evalkit/labels.hpp"

namespace evalkit {

/// One evaluator's judgment of one tutor response on one dimension.
struct EvalVerdict {
  std::string dialogue_id;
  std::string tutor_id;
  DimensionKey dimension = DimensionKey::mi;
  Prediction label = Prediction::unparseable;
  std::string evaluator_id;
  /// Text the evaluator produced, kept verbatim for audit.
  std::string raw_output;
  double latency_seconds = 0.0;
  /// Set when the evaluator failed; the label is then Unparseable.
  std::optional<std::string> error;

  bool operator==(const EvalVerdict&) const = default;
};

nlohmann::ordered_json to_json(const EvalVerdict& v);
/// Throws SchemaError on malformed input.
EvalVerdict verdict_from_json(const nlohmann::json& j);

/// One JSON object per line. Throws StorageError when the file cannot be
/// written.
void save_verdicts(const std::vector<EvalVerdict>& verdicts, const std::filesystem::path& path);
/// Blank lines are skipped. Throws EnvironmentError for a missing file and
/// SchemaError naming the line for malformed content.
std::vector<EvalVerdict> load_verdicts(const std::filesystem::path& path);

}  // namespace evalkit
