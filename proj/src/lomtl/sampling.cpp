#include "evalkit/lomtl/sampling.hpp"

#include <algorithm>
#include <array>
#include <map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "evalkit/errors.hpp"
#include "evalkit/rng.hpp"

namespace evalkit::lomtl {

std::vector<TaskExample> make_examples(const DatasetSplit& split,
                                       const std::vector<DimensionKey>& dims,
                                       const PromptTemplate& tmpl,
                                       std::size_t token_budget,
                                       const TokenCounter& counter) {
  require_gold(split, dims);
  std::vector<TaskExample> out;
  for (const auto& d : split.dialogues) {
    for (const auto& r : d.responses) {
      for (DimensionKey key : dims) {
        TaskExample ex;
        ex.dimension = key;
        ex.prompt = build_prompt(d, r.tutor_id, dimension(key), tmpl, token_budget, counter);
        ex.gold = *r.gold_for(key);
        ex.dialogue_id = d.id;
        ex.tutor_id = r.tutor_id;
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

std::vector<TaskExample> oversample(const std::vector<TaskExample>& examples,
                                    OversampleMethod method, std::uint64_t seed) {
  std::vector<TaskExample> out = examples;
  if (method == OversampleMethod::none || examples.empty()) return out;

  // cells[dimension][label] -> indices into `examples`
  std::map<DimensionKey, std::array<std::vector<std::size_t>, 3>> cells;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    cells[examples[i].dimension][static_cast<std::size_t>(examples[i].gold)].push_back(i);
  }
  Rng rng(seed);
  for (const auto& [dim, by_label] : cells) {
    std::size_t majority = 0;
    for (const auto& c : by_label) majority = std::max(majority, c.size());
    for (std::size_t l = 0; l < by_label.size(); ++l) {
      const auto& cell = by_label[l];
      if (cell.empty()) {
        spdlog::warn("oversample: no '{}' examples for {}; cell skipped",
                     label_name(kAllLabels[l]), dimension_code(dim));
        continue;
      }
      for (std::size_t added = cell.size(); added < majority; ++added) {
        out.push_back(examples[cell[rng.below(cell.size())]]);
      }
    }
  }
  return out;
}

std::vector<Batch> build_balanced_batches(const std::vector<TaskExample>& examples,
                                          int batch_size, std::uint64_t seed) {
  if (batch_size <= 0) throw ConfigError("batch size must be positive");
  std::map<DimensionKey, std::vector<std::size_t>> tasks;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    tasks[examples[i].dimension].push_back(i);
  }
  if (tasks.empty()) return {};
  const auto n_tasks = static_cast<int>(tasks.size());
  if (batch_size % n_tasks != 0) {
    throw ConfigError(fmt::format("batch size {} is not divisible by the {} active tasks",
                                  batch_size, n_tasks));
  }
  const std::size_t per_task = static_cast<std::size_t>(batch_size / n_tasks);

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> queues;
  for (auto& [dim, idx] : tasks) {
    rng.shuffle(idx);
    queues.push_back(std::move(idx));
  }
  std::vector<std::size_t> cursor(queues.size(), 0);

  std::vector<Batch> batches;
  while (true) {
    std::size_t min_left = SIZE_MAX;
    std::size_t total_left = 0;
    for (std::size_t t = 0; t < queues.size(); ++t) {
      const std::size_t left = queues[t].size() - cursor[t];
      min_left = std::min(min_left, left);
      total_left += left;
    }
    if (total_left == 0) break;
    const std::size_t take = std::min(min_left + 1, per_task);
    Batch batch;
    for (std::size_t t = 0; t < queues.size(); ++t) {
      const std::size_t n = std::min(queues[t].size() - cursor[t], take);
      for (std::size_t j = 0; j < n; ++j) batch.push_back(examples[queues[t][cursor[t]++]]);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace evalkit::lomtl
