#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace evalkit {

/// The closed annotation vocabulary shared by every dimension.
enum class TernaryLabel { yes, to_some_extent, no };

inline constexpr std::array<TernaryLabel, 3> kAllLabels = {
    TernaryLabel::yes, TernaryLabel::to_some_extent, TernaryLabel::no};

/// Evaluator output: a label, or the marker for text that named none.
/// Unparseable is kept distinct so it is counted and reported rather than
/// coerced into one of the three labels.
enum class Prediction { yes, to_some_extent, no, unparseable };

inline constexpr Prediction to_prediction(TernaryLabel l) noexcept {
  switch (l) {
    case TernaryLabel::yes: return Prediction::yes;
    case TernaryLabel::to_some_extent: return Prediction::to_some_extent;
    case TernaryLabel::no: return Prediction::no;
  }
  return Prediction::unparseable;
}

inline constexpr std::optional<TernaryLabel> to_label(Prediction p) noexcept {
  switch (p) {
    case Prediction::yes: return TernaryLabel::yes;
    case Prediction::to_some_extent: return TernaryLabel::to_some_extent;
    case Prediction::no: return TernaryLabel::no;
    case Prediction::unparseable: return std::nullopt;
  }
  return std::nullopt;
}

/// Canonical spelling: "Yes", "To some extent", "No".
std::string_view label_name(TernaryLabel label) noexcept;
/// As label_name, plus "Unparseable".
std::string_view prediction_name(Prediction p) noexcept;

/// Case-insensitive, whitespace-trimmed. Accepts "TSE" as an abbreviation.
std::optional<TernaryLabel> parse_label(std::string_view text);
std::optional<Prediction> parse_prediction(std::string_view text);

enum class DimensionKey { mi, ml, pg, ac };

inline constexpr std::array<DimensionKey, 4> kAllDimensions = {
    DimensionKey::mi, DimensionKey::ml, DimensionKey::pg, DimensionKey::ac};

/// Short key: "MI", "ML", "PG", "AC".
std::string_view dimension_code(DimensionKey key) noexcept;
/// Configuration name: "Mistake_Identification", ...
std::string_view dimension_config_name(DimensionKey key) noexcept;
/// Display name: "Mistake Identification", ...
std::string_view dimension_display_name(DimensionKey key) noexcept;

/// Accepts the short code, the configuration name or the display name,
/// case-insensitively.
std::optional<DimensionKey> parse_dimension(std::string_view text);

struct Dimension {
  DimensionKey key;
  std::string name;
  std::string definition;
  /// Indexed by TernaryLabel.
  std::array<std::string, 3> label_definitions;
  TernaryLabel desideratum = TernaryLabel::yes;

  const std::string& label_definition(TernaryLabel l) const {
    return label_definitions[static_cast<std::size_t>(l)];
  }
};

/// The four built-in dimensions with their definitions.
const Dimension& dimension(DimensionKey key);

}  // namespace evalkit
