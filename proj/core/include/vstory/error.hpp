#pragma once

#include <stdexcept>
#include <string>

namespace vstory {

// Base for every error raised by the library. `category()` is a short
// machine-readable tag used by the CLI when it reports failures.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& message) : Error("validation", message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

class VocabError : public Error {
 public:
  explicit VocabError(const std::string& message) : Error("vocab", message) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

class JudgeError : public Error {
 public:
  explicit JudgeError(const std::string& message) : Error("judge", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

// Rethrows `e` as the same error type with `context` prepended to its message.
[[noreturn]] inline void rethrow_with_context(const Error& e, const std::string& context) {
  const std::string message = context + e.what();
  const auto& c = e.category();
  if (c == "validation") throw ValidationError(message);
  if (c == "config") throw ConfigError(message);
  if (c == "vocab") throw VocabError(message);
  if (c == "numeric") throw NumericError(message);
  if (c == "judge") throw JudgeError(message);
  if (c == "io") throw IoError(message);
  throw Error(c, message);
}

}  // namespace vstory
