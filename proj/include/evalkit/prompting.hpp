#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>

#include "evalkit/corpus.hpp"
#include "evalkit/labels.hpp"

namespace evalkit {

/// Counts tokens the way the consuming model's tokenizer would.
using TokenCounter = std::function<std::size_t(std::string_view)>;

/// Whitespace word count; a stand-in when no tokenizer is available.
std::size_t whitespace_token_count(std::string_view text);

/// A prompt template, loaded from a sectioned text file:
///
///     #! evalkit-prompt-template v1
///     [preamble]
///     ...
///     [dimension]
///     Dimension: {dimension_name}
///     ...
///
/// Sections are rendered in a fixed order (preamble, dimension,
/// label_definitions, ground_truth, context, response, answer). Blocks are
/// separated by a blank line, except label_definitions, which directly
/// follows the dimension block. `{{` and `}}` render literal braces.
struct PromptTemplate {
  std::string name;
  int version = 1;
  std::string preamble;
  std::string dimension_slot;
  std::string label_definitions_slot;
  std::string ground_truth_slot;  // optional section
  std::string context_slot;
  std::string response_slot;
  std::string answer_directive;
  bool include_label_definitions = true;
  bool include_ground_truth = false;

  static PromptTemplate parse(std::string_view text, std::string name = "inline");
  static PromptTemplate load(const std::filesystem::path& path);
};

/// Directory holding the shipped templates (lomtl.txt, judge.txt).
std::filesystem::path default_template_dir();

struct PromptInstance {
  std::string text;
  std::size_t token_budget = 0;
  std::size_t token_count = 0;
  bool truncated = false;
  /// Number of leading history turns dropped to fit the budget.
  std::size_t dropped_turns = 0;
};

/// Renders the full prompt for one (dialogue, tutor response, dimension).
/// When the rendering exceeds `token_budget`, the oldest history turns are
/// dropped one at a time; the dimension block and the response are never
/// cut. Throws LookupError for an unknown tutor, ArgumentError for a zero
/// budget and TruncationError when even an empty history does not fit.
PromptInstance build_prompt(const Dialogue& dialogue, std::string_view tutor_id,
                            const Dimension& dim, const PromptTemplate& tmpl,
                            std::size_t token_budget, const TokenCounter& counter);

/// "Tutor: ..." / "Student: ..." lines, oldest first.
std::string render_history(const std::vector<Turn>& turns, std::size_t skip = 0);

}  // namespace evalkit
