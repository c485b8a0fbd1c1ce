#include "evalkit/prompting.hpp"

#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "evalkit/errors.hpp"
#include "evalkit/text.hpp"

#ifndef EVALKIT_TEMPLATE_DIR
#define EVALKIT_TEMPLATE_DIR "templates"
#endif

namespace evalkit {

std::size_t whitespace_token_count(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

std::filesystem::path default_template_dir() {
  if (const char* env = std::getenv("EVALKIT_TEMPLATE_DIR"); env && *env) {
    return env;
  }
  return EVALKIT_TEMPLATE_DIR;
}

namespace {

constexpr std::string_view kHeaderPrefix = "#! evalkit-prompt-template v";

struct SectionSpec {
  std::string_view name;
  std::string PromptTemplate::*field;
  std::vector<std::string_view> placeholders;
  bool required;
};

const std::vector<SectionSpec>& section_specs() {
  static const std::vector<SectionSpec> specs = {
      {"preamble", &PromptTemplate::preamble, {}, true},
      {"dimension", &PromptTemplate::dimension_slot,
       {"dimension_name", "dimension_definition"}, true},
      {"label_definitions", &PromptTemplate::label_definitions_slot,
       {"label_yes", "label_tse", "label_no"}, true},
      {"ground_truth", &PromptTemplate::ground_truth_slot, {"ground_truth"}, false},
      {"context", &PromptTemplate::context_slot, {"history"}, true},
      {"response", &PromptTemplate::response_slot, {"response"}, true},
      {"answer", &PromptTemplate::answer_directive, {}, true},
  };
  return specs;
}

// Calls `on_placeholder` for each {name}; returns the rendered string, with
// names substituted through `lookup`.
template <typename Lookup>
std::string substitute(std::string_view tmpl, std::string_view section,
                       Lookup&& lookup) {
  std::string out;
  out.reserve(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    const char c = tmpl[i];
    if (c == '{') {
      if (i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
        out.push_back('{');
        ++i;
        continue;
      }
      const auto close = tmpl.find('}', i);
      if (close == std::string_view::npos) {
        throw TemplateError(fmt::format("section [{}]: unterminated placeholder", section));
      }
      out += lookup(tmpl.substr(i + 1, close - i - 1));
      i = close;
    } else if (c == '}') {
      if (i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
        out.push_back('}');
        ++i;
        continue;
      }
      throw TemplateError(fmt::format("section [{}]: stray '}}'", section));
    } else {
      out.push_back(c);
    }
  }
  return out;
}

std::string strip_blank_lines(const std::vector<std::string>& lines) {
  std::size_t begin = 0;
  std::size_t end = lines.size();
  while (begin < end && trim(lines[begin]).empty()) ++begin;
  while (end > begin && trim(lines[end - 1]).empty()) --end;
  std::vector<std::string> kept(lines.begin() + static_cast<long>(begin),
                                lines.begin() + static_cast<long>(end));
  return join(kept, "\n");
}

void check_placeholders(const PromptTemplate& t) {
  for (const auto& spec : section_specs()) {
    const std::string& body = t.*spec.field;
    if (body.empty()) {
      if (spec.required) {
        throw TemplateError(fmt::format("template '{}': missing section [{}]", t.name, spec.name));
      }
      continue;
    }
    std::map<std::string, int, std::less<>> seen;
    substitute(body, spec.name, [&](std::string_view ph) {
      seen[std::string(ph)] += 1;
      return std::string();
    });
    for (const auto& [ph, count] : seen) {
      bool known = false;
      for (auto p : spec.placeholders) known = known || p == ph;
      if (!known) {
        throw TemplateError(fmt::format("template '{}': placeholder {{{}}} not allowed in [{}]",
                                        t.name, ph, spec.name));
      }
      if (count != 1) {
        throw TemplateError(fmt::format("template '{}': placeholder {{{}}} used {} times",
                                        t.name, ph, count));
      }
    }
    for (auto p : spec.placeholders) {
      if (seen.find(p) == seen.end()) {
        throw TemplateError(fmt::format("template '{}': section [{}] lacks {{{}}}", t.name,
                                        spec.name, p));
      }
    }
  }
}

}  // namespace

PromptTemplate PromptTemplate::parse(std::string_view text, std::string name) {
  PromptTemplate t;
  t.name = std::move(name);
  auto lines = split(text, '\n');
  for (auto& l : lines) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
  }
  if (lines.empty() || lines[0].rfind(kHeaderPrefix, 0) != 0) {
    throw TemplateError(fmt::format("template '{}': first line must be '{}N'", t.name,
                                    kHeaderPrefix));
  }
  try {
    t.version = std::stoi(lines[0].substr(kHeaderPrefix.size()));
  } catch (const std::exception&) {
    throw TemplateError(fmt::format("template '{}': bad version line", t.name));
  }
  if (t.version != 1) {
    throw TemplateError(fmt::format("template '{}': unsupported version {}", t.name, t.version));
  }

  std::map<std::string, std::vector<std::string>> sections;
  std::string current;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string_view line = lines[i];
    const auto stripped = trim(line);
    if (stripped.size() > 2 && stripped.front() == '[' && stripped.back() == ']' &&
        stripped.find(' ') == std::string_view::npos) {
      current = std::string(stripped.substr(1, stripped.size() - 2));
      if (sections.count(current)) {
        throw TemplateError(fmt::format("template '{}': duplicate section [{}]", t.name, current));
      }
      sections[current];
      continue;
    }
    if (current.empty()) {
      if (!stripped.empty()) {
        throw TemplateError(fmt::format("template '{}': text before first section", t.name));
      }
      continue;
    }
    sections[current].emplace_back(line);
  }
  for (const auto& [sec, body] : sections) {
    bool known = false;
    for (const auto& spec : section_specs()) {
      if (spec.name == sec) {
        t.*spec.field = strip_blank_lines(body);
        known = true;
      }
    }
    if (!known) {
      throw TemplateError(fmt::format("template '{}': unknown section [{}]", t.name, sec));
    }
  }
  check_placeholders(t);
  return t;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw EnvironmentError(fmt::format("cannot open prompt template '{}'", path.string()));
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.filename().string());
}

std::string render_history(const std::vector<Turn>& turns, std::size_t skip) {
  std::string out;
  for (std::size_t i = skip; i < turns.size(); ++i) {
    if (!out.empty()) out += '\n';
    out += turns[i].speaker == Speaker::tutor ? "Tutor: " : "Student: ";
    out += turns[i].text;
  }
  return out;
}

PromptInstance build_prompt(const Dialogue& dialogue, std::string_view tutor_id,
                            const Dimension& dim, const PromptTemplate& tmpl,
                            std::size_t token_budget, const TokenCounter& counter) {
  const ResponseRecord& response = dialogue.response(tutor_id);
  if (token_budget == 0) throw ArgumentError("token budget must be positive");
  if (tmpl.include_ground_truth && tmpl.ground_truth_slot.empty()) {
    throw TemplateError(fmt::format("template '{}' has no [ground_truth] section", tmpl.name));
  }

  const auto fill = [&](std::string_view body, std::string_view section) {
    return substitute(body, section, [&](std::string_view ph) -> std::string {
      if (ph == "dimension_name") return dim.name;
      if (ph == "dimension_definition") return dim.definition;
      if (ph == "label_yes") return dim.label_definition(TernaryLabel::yes);
      if (ph == "label_tse") return dim.label_definition(TernaryLabel::to_some_extent);
      if (ph == "label_no") return dim.label_definition(TernaryLabel::no);
      if (ph == "ground_truth") return dialogue.ground_truth;
      if (ph == "response") return response.text;
      throw TemplateError(fmt::format("unexpected placeholder {{{}}}", ph));
    });
  };

  // Everything except the history is fixed; render it once.
  const std::string preamble = fill(tmpl.preamble, "preamble");
  std::string dim_block = fill(tmpl.dimension_slot, "dimension");
  if (tmpl.include_label_definitions) {
    dim_block += '\n';
    dim_block += fill(tmpl.label_definitions_slot, "label_definitions");
  }
  const std::string truth =
      tmpl.include_ground_truth ? fill(tmpl.ground_truth_slot, "ground_truth") : "";
  const std::string response_block = fill(tmpl.response_slot, "response");
  const std::string answer = fill(tmpl.answer_directive, "answer");

  const auto assemble = [&](std::size_t skip) {
    const std::string history = render_history(dialogue.history, skip);
    const std::string context = substitute(
        tmpl.context_slot, "context", [&](std::string_view) { return history; });
    std::string text = preamble;
    text += "\n\n";
    text += dim_block;
    if (!truth.empty()) {
      text += "\n\n";
      text += truth;
    }
    text += "\n\n";
    text += context;
    text += "\n\n";
    text += response_block;
    text += "\n\n";
    text += answer;
    return text;
  };

  for (std::size_t skip = 0; skip <= dialogue.history.size(); ++skip) {
    std::string text = assemble(skip);
    const std::size_t tokens = counter(text);
    if (tokens <= token_budget) {
      return PromptInstance{std::move(text), token_budget, tokens, skip > 0, skip};
    }
  }
  throw TruncationError(fmt::format(
      "prompt for dialogue '{}', tutor '{}', {} does not fit in {} tokens even "
      "without history",
      dialogue.id, tutor_id, dimension_code(dim.key), token_budget));
}

}  // namespace evalkit
