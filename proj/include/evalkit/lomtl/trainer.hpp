#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "evalkit/lomtl/config.hpp"
#include "evalkit/lomtl/model.hpp"
#include "evalkit/lomtl/sampling.hpp"
#include "evalkit/prompting.hpp"

namespace evalkit::lomtl {

struct EvalRecord {
  long step = 0;
  double val_loss = 0.0;
};

/// The adapters selected by validation loss, plus what they are bound to.
struct Checkpoint {
  long step = 0;
  double val_loss = 0.0;
  std::string config_hash;
  std::string base_fingerprint;
  int lora_r = 0;
  int lora_alpha = 0;
  /// Adapter blob on disk; empty until saved.
  std::filesystem::path adapter_path;
  std::shared_ptr<const LoraAdapters> adapters;
  /// Every evaluation performed, in order (the first is at step 0).
  std::vector<EvalRecord> evaluations;
  bool early_stopped = false;
  long total_steps = 0;

  /// Writes adapter.bin and checkpoint.json into `dir`.
  void save(const std::filesystem::path& dir);
  static Checkpoint load(const std::filesystem::path& dir);
};

/// Token ids for one training sequence: <bos> prompt answer <eos>.
struct EncodedExample {
  std::vector<TokenId> tokens;
  std::size_t answer_begin = 0;
};

/// Lower-case label text the model is trained to emit.
std::string answer_text(TernaryLabel label);

EncodedExample encode_example(const WordTokenizer& tok, const TaskExample& ex);

/// Fine-tunes LoRA adapters on a frozen base. Evaluates at step 0, every
/// EVAL_STEPS optimizer steps and after the last step; stops early after
/// EARLY_PATIENCE evaluations without an improvement larger than
/// EARLY_THRESHOLD. When cfg.output_dir is set, the best checkpoint so far
/// is written there every SAVE_STEPS steps and at the end, together with
/// metrics.jsonl and config.txt.
Checkpoint train(const std::vector<TaskExample>& train_set,
                 const std::vector<TaskExample>& val_set, const TrainConfig& cfg,
                 const CausalLM& base);

/// As above, loading the base model from cfg.base_model_id (a directory).
/// A base that cannot be loaded is an EnvironmentError.
Checkpoint train(const std::vector<TaskExample>& train_set,
                 const std::vector<TaskExample>& val_set, const TrainConfig& cfg);

/// Mean answer-span cross-entropy per token.
double mean_answer_loss(const CausalLM& base, const LoraAdapters* adapters,
                        const std::vector<TaskExample>& examples);

struct DecodeOptions {
  bool do_sample = false;
  double temperature = 1.0;
  int max_new_tokens = 8;
  std::uint64_t seed = 0;
};

/// Decodes from `<bos> prompt`. Pad and bos are never emitted and eos is
/// blocked for the first token, so the result holds 1..max_new_tokens
/// tokens unless the context is exhausted. Throws ArgumentError when the
/// prompt leaves no room to generate.
std::string generate_text(const CausalLM& model, const LoraAdapters* adapters,
                          std::string_view prompt, const DecodeOptions& opts);

/// A base model with trained adapters, ready for generation.
class LomtlModel {
 public:
  /// Throws IntegrityError when the checkpoint was trained under a different
  /// configuration or base model.
  LomtlModel(std::shared_ptr<const CausalLM> base, Checkpoint checkpoint,
             TrainConfig active);

  /// Loads the base from active.base_model_id and the checkpoint from `dir`.
  static LomtlModel load(const std::filesystem::path& checkpoint_dir, const TrainConfig& active);

  /// Generated text, at most max_new_tokens tokens and never empty.
  std::string predict(const PromptInstance& prompt, const DecodeOptions& opts) const;
  std::string predict(const PromptInstance& prompt) const;

  TokenCounter token_counter() const;
  /// Token budget for prompts: MAX_LENGTH minus the answer reserve.
  std::size_t prompt_budget() const;

  const TrainConfig& config() const { return config_; }
  const Checkpoint& checkpoint() const { return checkpoint_; }
  const CausalLM& base() const { return *base_; }

 private:
  std::shared_ptr<const CausalLM> base_;
  Checkpoint checkpoint_;
  TrainConfig config_;
};

/// Loads the template named by cfg.prompt_template (or the shipped LoMTL
/// template) and applies the config's prompt switches.
PromptTemplate template_for(const TrainConfig& cfg);

}  // namespace evalkit::lomtl
