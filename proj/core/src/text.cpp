#include "vstory/text.hpp"

#include <cctype>

namespace vstory {

bool is_punctuation(std::string_view word) {
  return word == "." || word == "," || word == ":";
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  };
  for (const char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (raw == '.' || raw == ',' || raw == ':') {
      flush();
      words.emplace_back(1, raw);
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return words;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty() && !is_punctuation(w)) out.push_back(' ');
    out += w;
  }
  return out;
}

std::string normalize_text(std::string_view text) {
  const auto words = split_words(text);
  return join_words(words);
}

}  // namespace vstory
