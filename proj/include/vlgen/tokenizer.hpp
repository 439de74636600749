#pragma once

// Character-level vocabularies. Symbols are Unicode code points; indices
// 0-3 are reserved for PAD, SOS, EOS and UNK.

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vlgen/errors.hpp"
#include "vlgen/text.hpp"

namespace vlgen {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kSos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNumSpecials = 4;

inline constexpr std::size_t kDefaultMaxLen = 500;

using TokenSequence = std::vector<TokenId>;

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Builds from an explicit symbol list (in index order, specials excluded).
  explicit Vocabulary(std::u32string symbols) : symbols_(std::move(symbols)) {
    index_.reserve(symbols_.size());
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      auto [it, inserted] = index_.emplace(symbols_[i], static_cast<TokenId>(i) + kNumSpecials);
      if (!inserted) throw DataError("duplicate vocabulary symbol");
    }
  }

  /// Total size including the four specials.
  std::size_t size() const { return symbols_.size() + kNumSpecials; }

  TokenId id_of(char32_t c) const {
    auto it = index_.find(c);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(char32_t c) const { return index_.count(c) != 0; }

  /// Symbol for a non-special id.
  char32_t symbol(TokenId id) const { return symbols_.at(static_cast<std::size_t>(id - kNumSpecials)); }

  const std::u32string& symbols() const { return symbols_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.symbols_ == b.symbols_; }

 private:
  std::u32string symbols_;
  std::unordered_map<char32_t, TokenId> index_;
};

/// Every distinct code point across `texts`, sorted, after the specials.
template <typename Range>
Vocabulary build_vocab(const Range& texts) {
  std::set<char32_t> seen;
  for (const auto& t : texts)
    for (char32_t c : utf8_decode(t)) seen.insert(c);
  return Vocabulary(std::u32string(seen.begin(), seen.end()));
}

inline Vocabulary build_vocab(std::initializer_list<std::string_view> texts) {
  return build_vocab(std::vector<std::string_view>(texts));
}

/// Source and target vocabularies of one model.
struct Vocabs {
  Vocabulary source;
  Vocabulary target;

  friend bool operator==(const Vocabs&, const Vocabs&) = default;
};

/// Per-character ids followed by EOS. Throws TooLong when the text needs
/// more than max_len - 1 slots.
inline TokenSequence encode(std::string_view text, const Vocabulary& vocab,
                            std::size_t max_len = kDefaultMaxLen) {
  if (max_len < 2) throw DataError("max_len must be >= 2");
  const std::u32string cps = utf8_decode(text);
  if (cps.size() > max_len - 1) throw TooLong(cps.size(), max_len);
  TokenSequence ids;
  ids.reserve(cps.size() + 1);
  for (char32_t c : cps) ids.push_back(vocab.id_of(c));
  ids.push_back(kEos);
  return ids;
}

/// Concatenates symbols up to the first EOS. PAD and SOS render as nothing,
/// UNK as U+FFFD.
inline std::string decode(const TokenSequence& ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
      throw BadIndex("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(vocab.size()));
    if (id == kEos) break;
    if (id == kPad || id == kSos) continue;
    utf8_append(out, id == kUnk ? U'\uFFFD' : vocab.symbol(id));
  }
  return out;
}

}  // namespace vlgen
