#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "evalkit/labels.hpp"

namespace evalkit::lomtl {

enum class OversampleMethod { none, random };
enum class LrSchedule { linear, constant };

/// Training and evaluation settings. Keys in the config file use the
/// upper-case names listed next to each field; defaults match the reference
/// LoMTL setup.
struct TrainConfig {
  std::string base_model_id = "google/gemma-2-2b-it";  // MODEL_NAME
  std::vector<DimensionKey> dimensions{kAllDimensions.begin(),
                                       kAllDimensions.end()};  // DIMENSIONS
  int max_length = 1024;                                       // MAX_LENGTH
  bool include_label_definitions = true;  // include_label_definitions
  bool include_ground_truth = false;      // INCLUDE_GROUND_TRUTH

  int batch_size = 4;           // BATCH_SIZE
  int grad_accum = 1;           // GRAD_ACCUM
  int epochs = 3;               // EPOCHS
  double learning_rate = 1e-4;  // LEARNING_RATE
  double weight_decay = 0.1;    // WEIGHT_DECAY
  int logging_steps = 50;       // LOGGING_STEPS
  int save_steps = 300;         // SAVE_STEPS
  int eval_steps = 300;         // EVAL_STEPS
  OversampleMethod oversample_method = OversampleMethod::random;  // OVERSAMPLE_METHOD
  std::string metric_for_best = "eval_loss";                      // METRIC_FOR_BEST
  int lora_r = 8;                // LORA_R
  int lora_alpha = 16;           // LORA_ALPHA
  double lora_dropout = 0.1;     // LORA_DROPOUT
  int early_patience = 5;        // EARLY_PATIENCE
  double early_threshold = 0.0;  // EARLY_THRESHOLD
  std::uint64_t seed = 42;       // SEED

  // Choices not fixed by the reference setup.
  std::vector<std::string> lora_targets{"q", "k", "v", "o", "up", "down"};  // LORA_TARGETS
  LrSchedule lr_schedule = LrSchedule::linear;  // LR_SCHEDULER
  double max_grad_norm = 1.0;                   // MAX_GRAD_NORM
  double train_ratio = 0.9;                     // TRAIN_RATIO (train share of dev)

  // Evaluation-only.
  double temperature = 1.0;  // TEMPERATURE
  bool do_sample = false;    // DO_SAMPLE
  int max_new_tokens = 8;    // MAX_NEW_TOKENS

  // I/O; not part of the config hash.
  std::string train_file;     // TRAIN_FILE
  std::string val_file;       // VAL_FILE (optional; otherwise split TRAIN_FILE)
  std::string output_dir;     // OUTPUT_DIR
  std::string prompt_template;  // PROMPT_TEMPLATE

  /// Throws ConfigError on the first violated invariant.
  void validate() const;

  /// Canonical KEY=VALUE text of every field, sorted by key.
  std::string to_text() const;

  /// Hash over the fields that shape the trained adapters; I/O paths and
  /// decoding settings are excluded.
  std::string hash() const;

  /// Applies one KEY=VALUE assignment. Unknown keys are a ConfigError.
  void set(const std::string& key, const std::string& value);

  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);

  /// Every accepted key, in documentation order.
  static const std::vector<std::string>& keys();
};

/// Prompt tokens reserved for the answer span and sequence markers.
inline constexpr int kAnswerReserve = 8;

}  // namespace evalkit::lomtl
