#pragma once

#include <string_view>

#include "evalkit/labels.hpp"

namespace evalkit::lomtl {

/// Maps free-form model output to a label: the first whole-word mention of
/// "to some extent", "yes" or "no" (case-insensitive, punctuation ignored),
/// where the longer phrase wins when several start at the same word. Text
/// naming no label yields Prediction::unparseable. Never throws.
Prediction normalize_output(std::string_view raw_text) noexcept;

}  // namespace evalkit::lomtl
