#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace evalkit::lomtl {

using TokenId = std::int32_t;

/// Lower-cased word-level tokenizer: runs of letters/digits (bytes >= 0x80
/// count as letters) form one token, every other non-space byte is a token
/// of its own. Used by the stand-in causal LM.
class WordTokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;

  WordTokenizer();
  explicit WordTokenizer(std::vector<std::string> vocab);

  /// Builds a vocabulary from `texts`, keeping words seen at least
  /// `min_count` times, most frequent first, up to `max_size` entries in
  /// total. The label words are always included.
  static WordTokenizer build(const std::vector<std::string>& texts,
                             std::size_t max_size, std::size_t min_count = 1);

  static std::vector<std::string> pre_tokenize(std::string_view text);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;
  std::size_t count(std::string_view text) const { return pre_tokenize(text).size(); }

  std::size_t size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }
  TokenId id_of(std::string_view word) const;

  void save(const std::filesystem::path& path) const;
  static WordTokenizer load(const std::filesystem::path& path);

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace evalkit::lomtl
