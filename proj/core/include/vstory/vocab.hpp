#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vstory/corpus.hpp"

namespace vstory {

using TokenId = int;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr int kNumSpecials = 4;
inline constexpr int kMaxVocab = 256;

// Closed word-level vocabulary: the four specials followed by the words in
// the order given at construction.
class Vocab {
 public:
  Vocab() = default;
  // Throws VocabError on duplicates, special-token names, or if the result
  // would exceed kMaxVocab.
  explicit Vocab(std::vector<std::string> words);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const;
  bool contains(std::string_view word) const;
  TokenId id(std::string_view word) const;

  // Normalizes, then maps each word. Unknown words raise VocabError naming
  // the word.
  std::vector<TokenId> tokenize(std::string_view text) const;
  // Specials render as "<pad>", "<bos>", "<eos>", "<sep>".
  std::string detokenize(std::span<const TokenId> ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Lexicon words plus instruction template words, sorted.
Vocab build_vocab(const Lexicon& lexicon);

}  // namespace vstory
