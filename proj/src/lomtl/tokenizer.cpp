#include "evalkit/lomtl/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include <fmt/format.h>

#include "evalkit/errors.hpp"

namespace evalkit::lomtl {

namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s = {"<pad>", "<unk>", "<bos>", "<eos>"};
  return s;
}

const std::vector<std::string>& label_words() {
  static const std::vector<std::string> w = {"yes", "to", "some", "extent", "no"};
  return w;
}

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

}  // namespace

WordTokenizer::WordTokenizer() : WordTokenizer(std::vector<std::string>{}) {}

WordTokenizer::WordTokenizer(std::vector<std::string> vocab) {
  if (vocab.size() < special_tokens().size() ||
      !std::equal(special_tokens().begin(), special_tokens().end(), vocab.begin())) {
    std::vector<std::string> full = special_tokens();
    for (auto& w : vocab) {
      if (std::find(full.begin(), full.end(), w) == full.end()) full.push_back(std::move(w));
    }
    vocab = std::move(full);
  }
  vocab_ = std::move(vocab);
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second) {
      throw ValidationError(fmt::format("duplicate vocabulary entry '{}'", vocab_[i]));
    }
  }
}

std::vector<std::string> WordTokenizer::pre_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_word_byte(c)) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
      continue;
    }
    if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
    if (std::isspace(c) == 0) out.emplace_back(1, ch);
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

WordTokenizer WordTokenizer::build(const std::vector<std::string>& texts,
                                   std::size_t max_size, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (auto& w : pre_tokenize(t)) ++counts[w];
  }
  std::vector<std::string> vocab = special_tokens();
  for (const auto& w : label_words()) vocab.push_back(w);
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [w, c] : ranked) {
    if (vocab.size() >= max_size) break;
    if (c < min_count) break;
    if (std::find(label_words().begin(), label_words().end(), w) != label_words().end()) continue;
    vocab.push_back(w);
  }
  return WordTokenizer(std::move(vocab));
}

TokenId WordTokenizer::id_of(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<TokenId> WordTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : pre_tokenize(text)) ids.push_back(id_of(w));
  return ids;
}

std::string WordTokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out += ' ';
    out += (id >= 0 && static_cast<std::size_t>(id) < vocab_.size()) ? vocab_[id] : "<unk>";
  }
  return out;
}

void WordTokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError(fmt::format("cannot write vocabulary '{}'", path.string()));
  for (const auto& w : vocab_) out << w << '\n';
}

WordTokenizer WordTokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EnvironmentError(fmt::format("cannot read vocabulary '{}'", path.string()));
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) vocab.push_back(line);
  return WordTokenizer(std::move(vocab));
}

}  // namespace evalkit::lomtl
