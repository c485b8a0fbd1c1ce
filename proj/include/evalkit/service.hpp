#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evalkit/corpus.hpp"
#include "evalkit/judges.hpp"

namespace evalkit {

struct LomtlEntry {
  std::string id = "lomtl";
  std::string checkpoint;
  std::string config;
  /// Shown in /v1/evaluators; optional.
  std::string model_id;
};

/// Service configuration. Relative paths in a config file are resolved
/// against the file's directory. API keys never appear here: remote judges
/// name the environment variable that holds them.
struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  /// Cache-only serving: no evaluator is ever constructed, so no model is
  /// loaded and no outbound request is made.
  bool static_mode = true;
  std::string demo_split;
  /// Visualizer source; the demo split is used when empty.
  std::string dev_split;
  std::string cache_dir;
  std::string feedback_log;
  /// Enabled evaluator ids; empty enables every defined evaluator.
  std::vector<std::string> evaluators;
  int parallelism = 4;
  std::string cors_origin;
  std::optional<LomtlEntry> lomtl;
  std::vector<JudgeSpec> judges;

  /// Throws ConfigError.
  void validate() const;
  static ServiceConfig from_json(const nlohmann::json& j,
                                 const std::filesystem::path& base_dir = {});
  static ServiceConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;
};

/// Evaluators by id. Factories run at most once, on first use, so merely
/// registering a remote judge reads no credentials and opens no socket.
class EvaluatorRegistry {
 public:
  using Factory = std::function<std::shared_ptr<Evaluator>()>;

  /// Throws ConfigError on a duplicate id.
  void add(EvaluatorInfo info, Factory factory);
  void add(std::shared_ptr<Evaluator> evaluator);

  bool contains(const std::string& id) const;
  std::vector<EvaluatorInfo> list() const;
  /// Throws NotFoundError for an unknown id.
  const EvaluatorInfo& info(const std::string& id) const;
  /// Constructs on first call; construction errors propagate and are
  /// retried on the next call.
  std::shared_ptr<Evaluator> get(const std::string& id);

  /// The lomtl entry and the judges of `config`, restricted to the enabled
  /// ids (ConfigError for an enabled id that is not defined).
  static EvaluatorRegistry from_config(const ServiceConfig& config);

 private:
  struct Entry {
    EvaluatorInfo info;
    Factory factory;
    std::shared_ptr<Evaluator> instance;
  };
  // Held by pointer so the registry stays movable.
  std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
};

/// HTTP+JSON API under /v1.
class EvalService {
 public:
  /// Loads the splits and opens the verdict cache and the feedback log.
  EvalService(ServiceConfig config, EvaluatorRegistry registry);
  ~EvalService();
  EvalService(const EvalService&) = delete;
  EvalService& operator=(const EvalService&) = delete;

  /// Binds the configured address; port 0 picks a free port. Returns the
  /// bound port. Throws EnvironmentError when binding fails.
  int bind();
  /// Serves until stop(). Requires bind().
  void run();
  /// bind() then run() on a background thread; returns the port.
  int start();
  void stop();

  const ServiceConfig& config() const;
  const DatasetSplit& demo() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct PrecomputeSummary {
  std::string evaluator_id;
  std::size_t items = 0;
  std::size_t cached = 0;
  std::size_t computed = 0;
  /// Items whose verdict carries an error; they stay uncached.
  std::size_t failed = 0;
};

/// Fills `cache` with a verdict for every (dialogue, tutor, dimension) of
/// `split` under each evaluator in `ids` (every registered one when empty),
/// so a static-mode service can answer all of them.
std::vector<PrecomputeSummary> precompute_cache(const DatasetSplit& split, EvaluatorRegistry& registry,
                                                VerdictCache& cache, const std::vector<std::string>& ids = {},
                                                int parallelism = 1);

/// The published JSON Schema of every /v1 payload.
const std::string& api_schema_text();

}  // namespace evalkit
