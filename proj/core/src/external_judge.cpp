#include "vstory/external_judge.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <thread>
#include <vector>

#include "judge_prompt.hpp"
#include "vstory/error.hpp"
#include "vstory/manifest.hpp"

namespace vstory {
namespace {

using json = nlohmann::json;

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return (v != nullptr && *v != '\0') ? std::string(v) : fallback;
}

void replace_all(std::string& s, std::string_view from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& item : items) {
    if (!out.empty()) out += ", ";
    out += item;
  }
  return out;
}

double criterion(const json& j, const char* name, bool required, double fallback) {
  if (!j.contains(name)) {
    if (required) throw JudgeError(std::string("judge reply lacks '") + name + "'");
    return fallback;
  }
  if (!j[name].is_number()) throw JudgeError(std::string("judge reply field '") + name + "' is not a number");
  const double v = j[name].get<double>();
  if (!(v >= 0 && v <= 10)) throw JudgeError(std::string("judge reply field '") + name + "' outside [0,10]");
  return v;
}

json score_to_json(const JudgeScore& s) {
  return {{"coherence", s.coherence},
          {"relevance", s.relevance},
          {"emotional_depth", s.emotional_depth},
          {"consistency", s.consistency},
          {"character_development", s.character_development},
          {"plot_progression", s.plot_progression},
          {"emotional_engagement", s.emotional_engagement}};
}

}  // namespace

ExternalJudgeConfig ExternalJudgeConfig::from_env() {
  ExternalJudgeConfig c;
  c.url = env_or("STORY_JUDGE_URL", "");
  if (c.url.empty()) throw ConfigError("external judge requires STORY_JUDGE_URL to be set");
  c.api_key = env_or("STORY_JUDGE_API_KEY", "");
  c.model = env_or("STORY_JUDGE_MODEL", c.model);
  return c;
}

void ExternalJudgeConfig::validate() const {
  if (url.empty()) throw ConfigError("external judge URL is empty");
  if (url.rfind("http://", 0) != 0 && url.rfind("https://", 0) != 0) {
    throw ConfigError("external judge URL must start with http:// or https://");
  }
  if (max_in_flight < 1) throw ConfigError("max_in_flight must be at least 1");
  if (max_attempts < 1) throw ConfigError("max_attempts must be at least 1");
  if (initial_backoff_ms < 0 || timeout_ms < 1) throw ConfigError("invalid external judge timing");
}

std::string_view judge_prompt_template() { return detail::kJudgePromptV1; }
std::string_view judge_prompt_version() { return detail::kJudgePromptVersion; }

std::string render_judge_prompt(std::string_view tmpl, const std::string& generated, const VisualStory& story) {
  std::string out(tmpl);
  replace_all(out, "{{reference}}", story.narrative);
  replace_all(out, "{{entities}}", join(story.entities));
  replace_all(out, "{{emotions}}", join(story.emotions));
  replace_all(out, "{{generated}}", generated);
  return out;
}

JudgeScore parse_judge_reply(std::string_view body) {
  json j;
  try {
    j = json::parse(body);
    if (j.contains("choices")) j = json::parse(j.at("choices").at(0).at("message").at("content").get<std::string>());
    if (j.contains("scores")) j = j.at("scores");
  } catch (const json::exception& e) {
    throw JudgeError(std::string("unparseable judge reply: ") + e.what());
  }
  if (!j.is_object()) throw JudgeError("judge reply is not a JSON object");
  JudgeScore s;
  s.coherence = criterion(j, "coherence", true, 0);
  s.relevance = criterion(j, "relevance", true, 0);
  s.emotional_depth = criterion(j, "emotional_depth", true, 0);
  s.consistency = criterion(j, "consistency", true, 0);
  s.character_development = criterion(j, "character_development", false, s.consistency);
  s.plot_progression = criterion(j, "plot_progression", false, s.coherence);
  s.emotional_engagement = criterion(j, "emotional_engagement", false, s.emotional_depth);
  s.overall = (s.coherence + s.relevance + s.emotional_depth + s.consistency) / 4.0;
  return s;
}

ExternalJudge::ExternalJudge(ExternalJudgeConfig config) : config_(std::move(config)) {
  config_.validate();
  if (config_.prompt_template.empty()) config_.prompt_template = std::string(judge_prompt_template());
  const auto scheme_end = config_.url.find("://") + 3;
  const auto slash = config_.url.find('/', scheme_end);
  scheme_host_port_ = config_.url.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : config_.url.substr(slash);
}

std::string ExternalJudge::cache_key(const std::string& prompt) const {
  return sha256_hex(config_.model + '\n' + prompt);
}

bool ExternalJudge::cache_lookup(const std::string& key, JudgeScore& out) const {
  std::lock_guard lock(cache_mutex_);
  const auto path = config_.cache_dir / (key + ".json");
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return false;
  try {
    out = parse_judge_reply(read_file(path));
  } catch (const Error&) {
    return false;
  }
  return true;
}

void ExternalJudge::cache_store(const std::string& key, const JudgeScore& score) const {
  std::lock_guard lock(cache_mutex_);
  write_file_atomic(config_.cache_dir / (key + ".json"), score_to_json(score).dump() + "\n");
}

JudgeScore ExternalJudge::request(const std::string& prompt) const {
  const json body = {{"model", config_.model},
                     {"prompt", prompt},
                     {"response_format", {{"type", "structured-scores"}}}};
  const auto payload = body.dump();
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt < config_.max_attempts; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(config_.initial_backoff_ms << (attempt - 1)));
    }
    network_calls_.fetch_add(1);
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(std::chrono::milliseconds(config_.timeout_ms));
    client.set_read_timeout(std::chrono::milliseconds(config_.timeout_ms));
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    const auto res = client.Post(path_, headers, payload, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP status " + std::to_string(res->status);
      continue;
    }
    try {
      return parse_judge_reply(res->body);
    } catch (const JudgeError& e) {
      last_error = e.what();
    }
  }
  throw JudgeError("external judge failed after " + std::to_string(config_.max_attempts) + " attempts: " + last_error);
}

JudgeScore ExternalJudge::score_story(const std::string& generated, const VisualStory& story) const {
  const auto prompt = render_judge_prompt(config_.prompt_template, generated, story);
  const auto key = cache_key(prompt);
  JudgeScore score;
  if (cache_lookup(key, score)) {
    cache_hits_.fetch_add(1);
    return score;
  }
  score = request(prompt);
  cache_store(key, score);
  return score;
}

std::vector<JudgeScore> ExternalJudge::score_batch(std::span<const std::string> generated,
                                                   std::span<const VisualStory* const> stories) const {
  if (generated.size() != stories.size()) throw ValidationError("score_batch: input sizes differ");
  std::vector<JudgeScore> out(generated.size());
  std::vector<std::string> errors(generated.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < generated.size(); i = next.fetch_add(1)) {
      try {
        out[i] = score_story(generated[i], *stories[i]);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(config_.max_in_flight), generated.size());
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) throw JudgeError("story '" + stories[i]->id + "': " + errors[i]);
  }
  return out;
}

}  // namespace vstory
