#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vstory {

// Punctuation marks are standalone words and attach to the preceding word
// when joined back into text.
bool is_punctuation(std::string_view word);

// Lowercases, splits on whitespace and separates punctuation into its own
// word. "Fox ran.  Owl" -> {"fox", "ran", ".", "owl"}.
std::vector<std::string> split_words(std::string_view text);

// Inverse of split_words on normalized text: single spaces between words,
// no space before punctuation.
std::string join_words(std::span<const std::string> words);

// join_words(split_words(text)).
std::string normalize_text(std::string_view text);

}  // namespace vstory
