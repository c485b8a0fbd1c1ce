#include "evalkit/lomtl/normalize.hpp"

#include <cctype>
#include <string>
#include <vector>

namespace evalkit::lomtl {

namespace {

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) != 0 || c >= 0x80) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

Prediction normalize_output(std::string_view raw_text) noexcept {
  try {
    const auto words = words_of(raw_text);
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i + 2 < words.size() && words[i] == "to" && words[i + 1] == "some" &&
          words[i + 2] == "extent") {
        return Prediction::to_some_extent;
      }
      if (words[i] == "tse") return Prediction::to_some_extent;
      if (words[i] == "yes") return Prediction::yes;
      if (words[i] == "no") return Prediction::no;
    }
  } catch (...) {
    // Allocation failure; fall through to the sentinel.
  }
  return Prediction::unparseable;
}

}  // namespace evalkit::lomtl
