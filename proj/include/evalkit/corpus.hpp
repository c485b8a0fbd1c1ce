#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "evalkit/labels.hpp"

namespace evalkit {

inline constexpr int kDatasetFormatVersion = 1;

enum class Speaker { tutor, student };

std::string_view speaker_name(Speaker s) noexcept;

struct Turn {
  Speaker speaker = Speaker::student;
  std::string text;

  bool operator==(const Turn&) const = default;
};

struct ResponseRecord {
  std::string tutor_id;
  std::string text;
  /// Empty for inference-only data.
  std::map<DimensionKey, TernaryLabel> gold;

  std::optional<TernaryLabel> gold_for(DimensionKey d) const {
    auto it = gold.find(d);
    if (it == gold.end()) return std::nullopt;
    return it->second;
  }

  bool operator==(const ResponseRecord&) const = default;
};

struct Dialogue {
  std::string id;
  std::string topic;
  std::vector<Turn> history;
  std::string ground_truth;
  /// Kept in file order; tutor ids are unique within a dialogue.
  std::vector<ResponseRecord> responses;

  const ResponseRecord* find_response(std::string_view tutor_id) const;
  /// Throws LookupError when the tutor did not answer this dialogue.
  const ResponseRecord& response(std::string_view tutor_id) const;

  bool operator==(const Dialogue&) const = default;
};

enum class SplitName { dev, test, train, val, demo };

std::string_view split_name(SplitName s) noexcept;
std::optional<SplitName> parse_split_name(std::string_view s);

struct DatasetSplit {
  SplitName name = SplitName::dev;
  std::vector<Dialogue> dialogues;

  std::size_t response_count() const;
  const Dialogue* find(std::string_view id) const;
  /// Throws NotFoundError.
  const Dialogue& at(std::string_view id) const;
  /// Tutor ids in order of first appearance.
  std::vector<std::string> tutors() const;
  std::vector<std::string> topics() const;

  bool operator==(const DatasetSplit&) const = default;
};

/// Throws ValidationError naming the dialogue id on the first violated
/// invariant.
void validate(const Dialogue& d);
void validate(const DatasetSplit& split);

DatasetSplit split_from_json(const nlohmann::ordered_json& doc,
                             std::optional<SplitName> expected = std::nullopt);
nlohmann::ordered_json split_to_json(const DatasetSplit& split);
nlohmann::ordered_json dialogue_to_json(const Dialogue& d);

/// Parses and validates a split file. When `name` is given, the split name
/// recorded in the file must agree with it.
DatasetSplit load_dataset(const std::filesystem::path& path,
                          std::optional<SplitName> name = std::nullopt);
void save_dataset(const DatasetSplit& split, const std::filesystem::path& path);

struct TrainValSplit {
  DatasetSplit train;
  DatasetSplit val;
};

/// Dialogue-level partition. |train| = round(ratio * |dev|); both parts keep
/// the original relative order of dialogues.
TrainValSplit split_train_val(const DatasetSplit& dev, double ratio,
                              std::uint64_t seed);

/// n dialogues sampled without replacement, in sampled order.
DatasetSplit select_demo_subset(const DatasetSplit& test, std::size_t n,
                                std::uint64_t seed);

/// Throws UnlabeledDataError when any response lacks a gold label for one
/// of `dims`.
void require_gold(const DatasetSplit& split,
                  const std::vector<DimensionKey>& dims);

}  // namespace evalkit
