#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "evalkit/corpus.hpp"
#include "evalkit/lomtl/config.hpp"
#include "evalkit/lomtl/model.hpp"
#include "evalkit/lomtl/sampling.hpp"
#include "evalkit/lomtl/trainer.hpp"

namespace evalkit::lomtl {

struct TrainingData {
  std::vector<TaskExample> train;
  std::vector<TaskExample> val;
};

/// Task examples from TRAIN_FILE and VAL_FILE, or from TRAIN_FILE split by
/// TRAIN_RATIO and SEED when VAL_FILE is unset. Prompts are sized with the
/// tokenizer of `base`. Throws ConfigError when TRAIN_FILE is unset.
TrainingData prepare_training_data(const TrainConfig& cfg, const CausalLM& base);

/// Loads the base named by MODEL_NAME, trains, and persists the best
/// checkpoint into OUTPUT_DIR (ConfigError when unset).
Checkpoint run_training(const TrainConfig& cfg);

/// Random stand-in base whose vocabulary covers every word of the prompts
/// `cfg` renders for `split`; shape.vocab_size is filled in.
CausalLM init_base(const DatasetSplit& split, const TrainConfig& cfg, ModelShape shape,
                   std::size_t max_vocab, std::uint64_t seed);

}  // namespace evalkit::lomtl
