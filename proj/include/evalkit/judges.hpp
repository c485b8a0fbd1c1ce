#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "evalkit/corpus.hpp"
#include "evalkit/labels.hpp"
#include "evalkit/prompting.hpp"
#include "evalkit/verdict.hpp"

namespace evalkit {

enum class JudgeKind { local, remote };

/// How to reach one LLM judge.
///
/// local: `command` (an executable reading the prompt on stdin and writing
/// its answer to stdout) when set, otherwise `model_id` names an evalkit
/// causal-LM directory decoded greedily in process.
/// remote: an OpenAI-style chat-completions endpoint; the bearer token is
/// read from the environment variable named by `credentials_ref`.
struct JudgeSpec {
  std::string judge_id;
  JudgeKind kind = JudgeKind::local;
  std::string model_id;
  std::string endpoint;
  std::string credentials_ref;
  double request_timeout = 60.0;  // seconds
  int max_retries = 3;
  double initial_backoff = 1.0;  // seconds; doubles per retry
  double max_backoff = 30.0;     // seconds
  std::vector<std::string> command;
  /// Prompt template file; empty selects the shipped judge template.
  std::string prompt_template;
  /// Whitespace-token budget for judge prompts.
  std::size_t max_prompt_tokens = 4096;
  int max_new_tokens = 16;

  /// Throws ConfigError on a structurally invalid spec. Does not look at
  /// the environment.
  void validate() const;
  static JudgeSpec from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

/// Maps a prompt to raw model text. Implementations must be safe to call
/// from several threads at once.
class TextGenerator {
 public:
  virtual ~TextGenerator() = default;
  virtual std::string generate(const std::string& prompt) = 0;
};

/// Wraps a callable; used for scripted evaluators and embedding.
class FunctionGenerator final : public TextGenerator {
 public:
  explicit FunctionGenerator(std::function<std::string(const std::string&)> fn)
      : fn_(std::move(fn)) {}
  std::string generate(const std::string& prompt) override { return fn_(prompt); }

 private:
  std::function<std::string(const std::string&)> fn_;
};

/// Chat-completions client with bounded exponential-backoff retries on
/// HTTP 429, 5xx and transport failures. Other statuses fail at once.
/// Throws RemoteError carrying the last status and the attempt count.
class RemoteChatGenerator final : public TextGenerator {
 public:
  /// Reads the credential now: a missing or empty variable is a
  /// ConfigError and no request is ever made.
  explicit RemoteChatGenerator(JudgeSpec spec);
  std::string generate(const std::string& prompt) override;

 private:
  std::string scrub(std::string text) const;

  JudgeSpec spec_;
  std::string token_;
  std::string base_url_;
  std::string path_;
};

/// Runs `command` once per prompt with the prompt on stdin. A non-zero exit
/// status or a timeout is a RemoteError.
class CommandGenerator final : public TextGenerator {
 public:
  CommandGenerator(std::vector<std::string> argv, double timeout_seconds);
  std::string generate(const std::string& prompt) override;

 private:
  std::vector<std::string> argv_;
  double timeout_;
};

struct EvaluatorInfo {
  std::string id;
  /// "lomtl", "local", "remote" or "scripted".
  std::string kind;
  std::string model_id;
};

/// Builds the prompt, calls the generator and normalizes its output.
class Evaluator {
 public:
  Evaluator(EvaluatorInfo info, std::shared_ptr<TextGenerator> generator, PromptTemplate tmpl,
            std::size_t token_budget, TokenCounter counter);

  const EvaluatorInfo& info() const { return info_; }
  const std::string& id() const { return info_.id; }

  PromptInstance prompt_for(const Dialogue& d, std::string_view tutor_id, DimensionKey dim) const;

  /// Generator failures propagate; unrecognised text yields an Unparseable
  /// verdict.
  EvalVerdict evaluate(const Dialogue& d, std::string_view tutor_id, DimensionKey dim) const;

 private:
  EvaluatorInfo info_;
  std::shared_ptr<TextGenerator> generator_;
  PromptTemplate template_;
  std::size_t budget_;
  TokenCounter counter_;
};

/// Validates the spec and constructs its generator (reading credentials for
/// remote judges).
std::shared_ptr<Evaluator> make_judge(const JudgeSpec& spec);

/// The fine-tuned model as an evaluator: base model from the config's
/// MODEL_NAME, adapters from `checkpoint_dir`.
std::shared_ptr<Evaluator> make_lomtl_evaluator(const std::filesystem::path& checkpoint_dir,
                                                const std::filesystem::path& config_path,
                                                std::string id = "lomtl");

/// One call of `spec`'s judge on one (dialogue, tutor, dimension).
EvalVerdict judge(const JudgeSpec& spec, const Dialogue& dialogue, std::string_view tutor_id,
                  DimensionKey dimension);

/// Content-addressed verdict store: one JSON file per verdict under
/// dir/<first two hex digits>/<sha256>.json, written atomically.
class VerdictCache {
 public:
  explicit VerdictCache(std::filesystem::path dir);

  /// SHA-256 over evaluator, dialogue, tutor, dimension and response text.
  static std::string key(std::string_view evaluator_id, std::string_view dialogue_id,
                         std::string_view tutor_id, DimensionKey dim,
                         std::string_view response_text);

  std::optional<EvalVerdict> get(const std::string& key) const;
  /// Error verdicts are not stored.
  void put(const std::string& key, const EvalVerdict& v);
  std::size_t size() const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path path_for(const std::string& key) const;

  std::filesystem::path dir_;
  mutable std::mutex mutex_;
};

struct JudgeItem {
  const Dialogue* dialogue = nullptr;
  std::string tutor_id;
  DimensionKey dimension = DimensionKey::mi;
};

/// Evaluates every item, in input order. Cached verdicts are reused; a
/// failing item yields an Unparseable verdict with `error` set while the
/// others proceed. Runs up to `parallelism` items at once.
std::vector<EvalVerdict> judge_batch(const Evaluator& evaluator, const std::vector<JudgeItem>& items,
                                     VerdictCache* cache = nullptr, int parallelism = 1);

/// Builds the judge (failing fast on a bad spec or missing credentials)
/// and runs judge_batch.
std::vector<EvalVerdict> judge_batch(const JudgeSpec& spec, const std::vector<JudgeItem>& items,
                                     VerdictCache* cache = nullptr, int parallelism = 1);

}  // namespace evalkit
