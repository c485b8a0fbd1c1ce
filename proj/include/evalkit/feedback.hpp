#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "evalkit/corpus.hpp"

namespace evalkit {

enum class Helpfulness { helpful, to_some_extent, not_helpful };
enum class PreferenceOutcome { a, b, both_good, both_bad };

/// "Helpful", "ToSomeExtent", "NotHelpful".
std::string_view helpfulness_name(Helpfulness h) noexcept;
/// Also accepts spaced and lower-case spellings ("To Some Extent").
std::optional<Helpfulness> parse_helpfulness(std::string_view text);
/// "A", "B", "BothGood", "BothBad".
std::string_view outcome_name(PreferenceOutcome o) noexcept;
std::optional<PreferenceOutcome> parse_outcome(std::string_view text);

struct HelpfulnessRating {
  std::string dialogue_id;
  std::string tutor_id;
  std::string rater_id;
  Helpfulness rating = Helpfulness::helpful;
  bool operator==(const HelpfulnessRating&) const = default;
};

struct PairwisePreference {
  std::string dialogue_id;
  std::string tutor_a;
  std::string tutor_b;
  std::string rater_id;
  PreferenceOutcome outcome = PreferenceOutcome::both_good;
  bool operator==(const PairwisePreference&) const = default;
};

using FeedbackItem = std::variant<HelpfulnessRating, PairwisePreference>;

enum class FeedbackKind { helpfulness, pairwise };
std::string_view feedback_kind_name(FeedbackKind k) noexcept;
std::optional<FeedbackKind> parse_feedback_kind(std::string_view text);

/// One stored record. Receipts are assigned in append order and
/// timestamps strictly increase along the log, so (timestamp, receipt)
/// order equals log order.
struct FeedbackRecord {
  std::string receipt;
  std::int64_t timestamp_ms = 0;
  /// Client-chosen idempotency key; a retried submission carrying the same
  /// key returns the original receipt instead of appending again.
  std::string request_id;
  FeedbackItem item;

  FeedbackKind kind() const noexcept;
  const std::string& dialogue_id() const noexcept;
  const std::string& rater_id() const noexcept;
  bool involves_tutor(std::string_view tutor_id) const noexcept;
  bool operator==(const FeedbackRecord&) const = default;
};

nlohmann::ordered_json to_json(const FeedbackRecord& r);
/// Throws SchemaError.
FeedbackRecord feedback_record_from_json(const nlohmann::json& j);
/// Parses a submission (no receipt or timestamp). Throws SchemaError.
FeedbackItem feedback_item_from_json(const nlohmann::json& j);

struct FeedbackFilter {
  std::optional<std::string> dialogue_id;
  /// Matches a rating's tutor or either side of a preference.
  std::optional<std::string> tutor_id;
  std::optional<std::string> rater_id;
  std::optional<FeedbackKind> kind;

  bool matches(const FeedbackRecord& r) const;
};

/// Append-only NDJSON log of human feedback.
///
/// Layout: a header line {"format":"evalkit-feedback-log","version":1}
/// followed by one record per line. Each append is a single write followed
/// by fdatasync; a failed write is truncated away. On open, a torn final
/// line (one without its newline) is dropped; any other damage is a
/// StorageError. An advisory lock keeps a second store off the same file.
class FeedbackStore {
 public:
  /// `served` is the split records must refer to; it must outlive the store.
  FeedbackStore(std::filesystem::path log_path, const DatasetSplit& served);
  ~FeedbackStore();
  FeedbackStore(const FeedbackStore&) = delete;
  FeedbackStore& operator=(const FeedbackStore&) = delete;

  /// Durably appends and returns the receipt. Throws ReferenceError for an
  /// unknown dialogue or tutor or a pair naming one tutor twice,
  /// ArgumentError for a missing rater id and StorageError when the write
  /// cannot be made durable.
  std::string record(const FeedbackItem& item, const std::string& request_id = {});

  /// Records matching `filter` ordered by (timestamp, receipt).
  std::vector<FeedbackRecord> export_records(const FeedbackFilter& filter = {}) const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  void recover();
  void check_references(const FeedbackItem& item) const;

  std::filesystem::path path_;
  const DatasetSplit& served_;
  int fd_ = -1;
  mutable std::shared_mutex mutex_;
  std::vector<FeedbackRecord> records_;
  std::unordered_map<std::string, std::size_t> by_request_;
  std::int64_t last_timestamp_ = 0;
  std::uint64_t next_sequence_ = 1;
};

struct HelpfulnessSummary {
  std::string tutor_id;
  /// Indexed by Helpfulness.
  std::array<std::size_t, 3> counts{};
  std::size_t total = 0;
};

/// Per-tutor rating counts, tutors sorted by id.
std::vector<HelpfulnessSummary> helpfulness_summary(const std::vector<FeedbackRecord>& records);

struct WinRate {
  std::string tutor_id;
  std::size_t comparisons = 0;
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t both_good = 0;
  std::size_t both_bad = 0;
  /// wins / comparisons.
  double win_rate = 0.0;
};

/// Per-tutor pairwise outcomes, tutors sorted by id.
std::vector<WinRate> win_rates(const std::vector<FeedbackRecord>& records);

nlohmann::ordered_json to_json(const HelpfulnessSummary& s);
nlohmann::ordered_json to_json(const WinRate& w);

}  // namespace evalkit
