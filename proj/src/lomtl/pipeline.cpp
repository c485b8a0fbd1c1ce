#include "evalkit/lomtl/pipeline.hpp"

#include <limits>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "evalkit/errors.hpp"

namespace evalkit::lomtl {

TrainingData prepare_training_data(const TrainConfig& cfg, const CausalLM& base) {
  if (cfg.train_file.empty()) throw ConfigError("TRAIN_FILE is required");
  const DatasetSplit source = load_dataset(cfg.train_file);
  DatasetSplit train_split;
  DatasetSplit val_split;
  if (cfg.val_file.empty()) {
    auto parts = split_train_val(source, cfg.train_ratio, cfg.seed);
    train_split = std::move(parts.train);
    val_split = std::move(parts.val);
  } else {
    train_split = source;
    val_split = load_dataset(cfg.val_file);
  }
  require_gold(train_split, cfg.dimensions);
  require_gold(val_split, cfg.dimensions);

  const PromptTemplate tmpl = template_for(cfg);
  const auto budget = static_cast<std::size_t>(cfg.max_length - kAnswerReserve);
  const TokenCounter counter = [&base](std::string_view t) { return base.tokenizer().count(t); };
  TrainingData data{make_examples(train_split, cfg.dimensions, tmpl, budget, counter),
                    make_examples(val_split, cfg.dimensions, tmpl, budget, counter)};
  spdlog::info("training data: {} train / {} val examples from {} / {} dialogues", data.train.size(),
               data.val.size(), train_split.dialogues.size(), val_split.dialogues.size());
  return data;
}

Checkpoint run_training(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.output_dir.empty()) throw ConfigError("OUTPUT_DIR is required");
  const CausalLM base = CausalLM::load(cfg.base_model_id);
  const auto data = prepare_training_data(cfg, base);
  return train(data.train, data.val, cfg, base);
}

CausalLM init_base(const DatasetSplit& split, const TrainConfig& cfg, ModelShape shape,
                   std::size_t max_vocab, std::uint64_t seed) {
  // Untruncated prompts so every word that can appear is in the vocabulary.
  const PromptTemplate tmpl = template_for(cfg);
  std::vector<std::string> texts;
  for (const auto& d : split.dialogues) {
    for (const auto& r : d.responses) {
      for (auto dim : cfg.dimensions) {
        texts.push_back(build_prompt(d, r.tutor_id, dimension(dim), tmpl,
                                     std::numeric_limits<std::size_t>::max(), whitespace_token_count)
                            .text);
      }
    }
  }
  if (texts.empty()) throw ArgumentError("no prompts to build a vocabulary from");
  auto tok = WordTokenizer::build(texts, max_vocab);
  shape.vocab_size = static_cast<int>(tok.size());
  return CausalLM::random(shape, std::move(tok), seed);
}

}  // namespace evalkit::lomtl
