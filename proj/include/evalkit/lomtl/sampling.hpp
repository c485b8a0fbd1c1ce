#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evalkit/corpus.hpp"
#include "evalkit/labels.hpp"
#include "evalkit/lomtl/config.hpp"
#include "evalkit/prompting.hpp"

namespace evalkit::lomtl {

/// One training/evaluation item: a rendered prompt for one dimension (the
/// task) and its gold label.
struct TaskExample {
  DimensionKey dimension = DimensionKey::mi;
  PromptInstance prompt;
  TernaryLabel gold = TernaryLabel::yes;
  std::string dialogue_id;
  std::string tutor_id;
};

/// One example per (response, dimension) pair with a gold label. Throws
/// UnlabeledDataError when a response lacks gold for a requested dimension.
std::vector<TaskExample> make_examples(const DatasetSplit& split,
                                       const std::vector<DimensionKey>& dims,
                                       const PromptTemplate& tmpl,
                                       std::size_t token_budget,
                                       const TokenCounter& counter);

/// Equalizes, per dimension, every present label's count to that
/// dimension's majority count by appending duplicates drawn uniformly with
/// replacement from the same (dimension, label) cell. Empty cells are
/// skipped with a warning. The input order is preserved; additions follow.
std::vector<TaskExample> oversample(const std::vector<TaskExample>& examples,
                                    OversampleMethod method, std::uint64_t seed);

using Batch = std::vector<TaskExample>;

/// Batches with an equal share of every task. batch_size must be a multiple
/// of the number of distinct dimensions present (ConfigError otherwise).
/// Each batch takes min(remaining, m + 1) examples from every task, where m
/// is the smallest remaining task count, capped at batch_size / tasks; full
/// batches therefore hold exactly batch_size / tasks per task and every
/// other batch has per-task counts within one of each other.
std::vector<Batch> build_balanced_batches(const std::vector<TaskExample>& examples,
                                          int batch_size, std::uint64_t seed);

}  // namespace evalkit::lomtl
