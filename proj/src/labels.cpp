#include "evalkit/labels.hpp"

#include "evalkit/text.hpp"

namespace evalkit {

std::string_view label_name(TernaryLabel label) noexcept {
  switch (label) {
    case TernaryLabel::yes: return "Yes";
    case TernaryLabel::to_some_extent: return "To some extent";
    case TernaryLabel::no: return "No";
  }
  return "No";
}

std::string_view prediction_name(Prediction p) noexcept {
  if (auto l = to_label(p)) return label_name(*l);
  return "Unparseable";
}

std::optional<TernaryLabel> parse_label(std::string_view text) {
  const std::string key = to_lower(trim(text));
  if (key == "yes") return TernaryLabel::yes;
  if (key == "no") return TernaryLabel::no;
  if (key == "to some extent" || key == "tse") return TernaryLabel::to_some_extent;
  return std::nullopt;
}

std::optional<Prediction> parse_prediction(std::string_view text) {
  if (auto l = parse_label(text)) return to_prediction(*l);
  if (to_lower(trim(text)) == "unparseable") return Prediction::unparseable;
  return std::nullopt;
}

std::string_view dimension_code(DimensionKey key) noexcept {
  switch (key) {
    case DimensionKey::mi: return "MI";
    case DimensionKey::ml: return "ML";
    case DimensionKey::pg: return "PG";
    case DimensionKey::ac: return "AC";
  }
  return "MI";
}

std::string_view dimension_config_name(DimensionKey key) noexcept {
  switch (key) {
    case DimensionKey::mi: return "Mistake_Identification";
    case DimensionKey::ml: return "Mistake_Location";
    case DimensionKey::pg: return "Providing_Guidance";
    case DimensionKey::ac: return "Actionability";
  }
  return "Mistake_Identification";
}

std::string_view dimension_display_name(DimensionKey key) noexcept {
  switch (key) {
    case DimensionKey::mi: return "Mistake Identification";
    case DimensionKey::ml: return "Mistake Location";
    case DimensionKey::pg: return "Providing Guidance";
    case DimensionKey::ac: return "Actionability";
  }
  return "Mistake Identification";
}

std::optional<DimensionKey> parse_dimension(std::string_view text) {
  const std::string key = to_lower(trim(text));
  for (DimensionKey d : kAllDimensions) {
    if (key == to_lower(dimension_code(d)) ||
        key == to_lower(dimension_config_name(d)) ||
        key == to_lower(dimension_display_name(d))) {
      return d;
    }
  }
  return std::nullopt;
}

namespace {

Dimension make(DimensionKey key, std::string definition, std::string yes,
               std::string tse, std::string no) {
  return Dimension{key,
                   std::string(dimension_display_name(key)),
                   std::move(definition),
                   {std::move(yes), std::move(tse), std::move(no)},
                   TernaryLabel::yes};
}

const std::array<Dimension, 4>& builtin_dimensions() {
  static const std::array<Dimension, 4> dims = {
      make(DimensionKey::mi,
           "Has the tutor identified a mistake in a student's response?",
           "The response clearly recognises that the student made a mistake.",
           "The response hints that something may be wrong but does not say "
           "so clearly.",
           "The response does not recognise the mistake, or treats the "
           "answer as correct."),
      make(DimensionKey::ml,
           "Does the tutor's response accurately point to a genuine mistake "
           "and its location?",
           "The response points precisely to the erroneous step or quantity.",
           "The response points to the general area of the error but is "
           "vague or partly inaccurate.",
           "The response does not locate the error, or points to the wrong "
           "place."),
      make(DimensionKey::pg,
           "Does the tutor offer correct and relevant guidance, such as an "
           "explanation, elaboration, hint, examples, and so on?",
           "The response gives correct and relevant guidance that helps the "
           "student fix the mistake.",
           "The response gives some guidance, but it is incomplete, generic "
           "or only partly correct.",
           "The response gives no guidance, or the guidance is incorrect or "
           "irrelevant."),
      make(DimensionKey::ac,
           "Is it clear from the tutor's feedback what the student should do "
           "next?",
           "The student knows exactly what to do next.",
           "The next step is suggested but left ambiguous.",
           "The response gives no indication of what the student should do "
           "next."),
  };
  return dims;
}

}  // namespace

const Dimension& dimension(DimensionKey key) {
  return builtin_dimensions()[static_cast<std::size_t>(key)];
}

}  // namespace evalkit
