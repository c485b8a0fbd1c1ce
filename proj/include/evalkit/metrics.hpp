#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evalkit/corpus.hpp"
#include "evalkit/labels.hpp"
#include "evalkit/verdict.hpp"

namespace evalkit {

// Agreement metrics. Both require equal, non-empty lengths (ArgumentError).
// An Unparseable prediction matches no gold label.
double accuracy(const std::vector<TernaryLabel>& gold, const std::vector<Prediction>& pred);

/// Unweighted mean of per-class F1 over the classes that occur in gold or
/// in pred; classes absent from both are left out of the mean.
double macro_f1(const std::vector<TernaryLabel>& gold, const std::vector<Prediction>& pred);

/// F1 per label (indexed by TernaryLabel); nullopt for absent classes.
std::array<std::optional<double>, 3> per_class_f1(const std::vector<TernaryLabel>& gold,
                                                  const std::vector<Prediction>& pred);

struct DimensionMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::size_t n = 0;
  std::size_t unparseable = 0;
};

struct ScoreReport {
  std::string evaluator_id;
  std::map<DimensionKey, DimensionMetrics> per_dimension;
  /// Unweighted means over the dimensions present in per_dimension.
  double averaged_accuracy = 0.0;
  double averaged_macro_f1 = 0.0;
};

/// Fills the averaged fields from per-dimension rows. Throws ArgumentError
/// when there are no rows or a row has n == 0.
ScoreReport finalize_report(std::map<DimensionKey, DimensionMetrics> per_dimension,
                            std::string evaluator_id = {});

/// Scores verdicts against the gold labels of `gold_source`. Verdicts
/// without a gold counterpart raise UnlabeledDataError naming them;
/// duplicate verdicts for one (dialogue, tutor, dimension) or mixed
/// evaluators raise ArgumentError.
ScoreReport score_report(const std::vector<EvalVerdict>& verdicts, const DatasetSplit& gold_source);

nlohmann::ordered_json to_json(const ScoreReport& r);

/// Yes 1.0, To some extent 0.5, No 0.0.
double label_to_score(TernaryLabel label) noexcept;
/// Throws ArgumentError for Unparseable.
double label_to_score(Prediction label);

struct TutorSummary {
  std::string tutor_id;
  std::map<DimensionKey, double> mean;
  std::map<DimensionKey, std::size_t> n;
  /// Label counts per dimension, indexed by TernaryLabel.
  std::map<DimensionKey, std::array<std::size_t, 3>> distribution;
};

/// Per-tutor means of the gold labels, tutors in order of first appearance.
/// A tutor without any gold label is omitted with a warning.
std::vector<TutorSummary> tutor_summary(const DatasetSplit& split);

/// As above over verdicts; Unparseable verdicts are excluded.
std::vector<TutorSummary> tutor_summary(const std::vector<EvalVerdict>& verdicts);

/// Every tutor attaining the maximal mean on each dimension (ties within
/// 1e-12 all win), sorted by tutor id.
std::map<DimensionKey, std::vector<std::string>> best_by_dimension(
    const std::vector<TutorSummary>& summaries);

enum class Leader { a, b, tie };
std::string_view leader_name(Leader l) noexcept;

struct ComparisonResult {
  /// Dimensions where both sides carry a label.
  std::map<DimensionKey, Leader> per_dimension_leader;
  /// score(a) - score(b) per scored dimension.
  std::map<DimensionKey, double> score_differences;
  /// Dimensions where either side is Unparseable; not counted for a winner.
  std::vector<DimensionKey> unscored;
  int leads_a = 0;
  int leads_b = 0;
  Leader overall_winner = Leader::tie;
};

/// Both maps must cover the same dimensions (ArgumentError otherwise).
ComparisonResult compare_pair(const std::map<DimensionKey, Prediction>& a,
                              const std::map<DimensionKey, Prediction>& b);

nlohmann::ordered_json to_json(const ComparisonResult& c);
nlohmann::ordered_json to_json(const TutorSummary& s);

}  // namespace evalkit
