#include "vstory/vocab.hpp"

#include <algorithm>

#include "vstory/error.hpp"
#include "vstory/tasks.hpp"
#include "vstory/text.hpp"

namespace vstory {
namespace {

constexpr std::string_view kSpecialNames[kNumSpecials] = {"<pad>", "<bos>", "<eos>", "<sep>"};

}  // namespace

Vocab::Vocab(std::vector<std::string> words) {
  tokens_.reserve(words.size() + kNumSpecials);
  for (const auto name : kSpecialNames) tokens_.emplace_back(name);
  for (auto& w : words) tokens_.push_back(std::move(w));
  if (tokens_.size() > static_cast<std::size_t>(kMaxVocab)) {
    throw VocabError("vocabulary of " + std::to_string(tokens_.size()) + " tokens exceeds the limit of 256");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw VocabError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocab::contains(std::string_view word) const { return index_.contains(std::string(word)); }

TokenId Vocab::id(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  if (it == index_.end()) throw VocabError("out-of-vocabulary word '" + std::string(word) + "'");
  return it->second;
}

std::vector<TokenId> Vocab::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) {
    const auto it = index_.find(w);
    if (it == index_.end() || it->second < kNumSpecials) {
      throw VocabError("out-of-vocabulary word '" + w + "'");
    }
    ids.push_back(it->second);
  }
  return ids;
}

std::string Vocab::detokenize(std::span<const TokenId> ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (const auto id : ids) words.push_back(token(id));
  return join_words(words);
}

Vocab build_vocab(const Lexicon& lexicon) {
  auto words = lexicon.all_words();
  const auto extra = template_words();
  words.insert(words.end(), extra.begin(), extra.end());
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return Vocab(std::move(words));
}

}  // namespace vstory
