#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>

#include "vstory/judge.hpp"

namespace vstory {

struct ExternalJudgeConfig {
  std::string url;  // scheme://host[:port][/path]
  std::string api_key;
  std::string model = "gpt-4o";
  std::filesystem::path cache_dir = ".vstory-judge-cache";
  int max_in_flight = 4;
  int max_attempts = 3;
  int initial_backoff_ms = 200;
  int timeout_ms = 30000;
  std::string prompt_template;  // empty: the built-in versioned template

  // STORY_JUDGE_URL (required), STORY_JUDGE_API_KEY, STORY_JUDGE_MODEL.
  static ExternalJudgeConfig from_env();
  void validate() const;
};

// The built-in prompt template and its version tag.
std::string_view judge_prompt_template();
std::string_view judge_prompt_version();

// Substitutes {{generated}}, {{reference}}, {{entities}} and {{emotions}}.
std::string render_judge_prompt(std::string_view tmpl, const std::string& generated, const VisualStory& story);

// Accepts the score object directly, wrapped as {"scores": {...}}, or as the
// JSON text of choices[0].message.content. The four primary criteria are
// required; overall is their mean. Missing detailed scores fall back to
// consistency, coherence and emotional_depth respectively.
JudgeScore parse_judge_reply(std::string_view body);

// HTTP client for a hosted judge model. Requests are POSTed as
// {model, prompt, response_format}; replies are cached on disk by the
// sha256 of (prompt, model).
class ExternalJudge final : public Judge {
 public:
  explicit ExternalJudge(ExternalJudgeConfig config);

  JudgeScore score_story(const std::string& generated, const VisualStory& story) const override;
  std::string kind() const override { return "external"; }
  std::vector<JudgeScore> score_batch(std::span<const std::string> generated,
                                      std::span<const VisualStory* const> stories) const override;

  std::size_t network_calls() const { return network_calls_.load(); }
  std::size_t cache_hits() const { return cache_hits_.load(); }

 private:
  std::string cache_key(const std::string& prompt) const;
  bool cache_lookup(const std::string& key, JudgeScore& out) const;
  void cache_store(const std::string& key, const JudgeScore& score) const;
  JudgeScore request(const std::string& prompt) const;

  ExternalJudgeConfig config_;
  std::string scheme_host_port_;
  std::string path_;
  mutable std::mutex cache_mutex_;
  mutable std::atomic<std::size_t> network_calls_{0};
  mutable std::atomic<std::size_t> cache_hits_{0};
};

}  // namespace vstory
