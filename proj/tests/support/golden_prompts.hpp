#pragma once

#include <cctype>
#include <string>
#include <vector>

#include "evalkit/prompting.hpp"
#include "synthetic.hpp"

namespace evalkit::testing {

struct GoldenPromptCase {
  std::string file;
  std::string dialogue_id;
  std::string tutor_id;
  DimensionKey dimension;
  std::size_t budget;
};

/// Twelve full renderings (three fixture dialogues by four dimensions) plus
/// one whose budget forces history truncation.
inline constexpr std::size_t kTruncatedBudget = 150;

inline std::vector<GoldenPromptCase> golden_prompt_cases() {
  std::vector<GoldenPromptCase> out;
  const std::vector<std::pair<std::string, std::string>> picks{
      {"gd-001", "Expert"}, {"gd-002", "Llama-3.1-8B"}, {"gd-003", "Gemini"}};
  for (const auto& [id, tutor] : picks) {
    for (DimensionKey k : kAllDimensions) {
      std::string code(dimension_code(k));
      for (auto& c : code) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out.push_back({id + "_" + code + ".txt", id, tutor, k, 1024});
    }
  }
  out.push_back({"gd-002_ml_truncated.txt", "gd-002", "Expert", DimensionKey::ml, kTruncatedBudget});
  return out;
}

inline std::string render_golden(const GoldenPromptCase& g) {
  const auto split = load_dataset(fixture_dir() / "golden_dialogues.json", SplitName::test);
  const auto tmpl = PromptTemplate::load(default_template_dir() / "lomtl.txt");
  return build_prompt(split.at(g.dialogue_id), g.tutor_id, dimension(g.dimension), tmpl, g.budget,
                      whitespace_token_count)
      .text;
}

}  // namespace evalkit::testing
