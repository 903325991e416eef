#include "vstory/judge.hpp"

#include <algorithm>
#include <set>

#include "vstory/error.hpp"
#include "vstory/text.hpp"

namespace vstory {
namespace {

double recall(const std::set<std::string>& reference, const std::set<std::string>& mentioned) {
  if (reference.empty()) return 10.0;
  std::size_t hit = 0;
  for (const auto& w : reference) hit += mentioned.count(w);
  return 10.0 * static_cast<double>(hit) / static_cast<double>(reference.size());
}

}  // namespace

double reward(const JudgeScore& score) { return score.overall / 10.0; }

std::vector<JudgeScore> Judge::score_batch(std::span<const std::string> generated,
                                           std::span<const VisualStory* const> stories) const {
  if (generated.size() != stories.size()) throw ValidationError("score_batch: input sizes differ");
  std::vector<JudgeScore> out;
  out.reserve(generated.size());
  for (std::size_t i = 0; i < generated.size(); ++i) out.push_back(score_story(generated[i], *stories[i]));
  return out;
}

ConstantJudge::ConstantJudge(double value) {
  if (!(value >= 0 && value <= 10)) throw ConfigError("constant judge score must be in [0,10]");
  score_ = {value, value, value, value, value, value, value, value};
}

JudgeScore score_story_rubric(const std::string& generated, const VisualStory& story, const Lexicon& lexicon) {
  const auto words = split_words(generated);
  const std::set<std::string> mentioned(words.begin(), words.end());

  JudgeScore s;

  std::set<std::string> content(story.entities.begin(), story.entities.end());
  content.insert(story.actions.begin(), story.actions.end());
  s.relevance = recall(content, mentioned);

  const std::set<std::string> story_entities(story.entities.begin(), story.entities.end());
  std::size_t mentioned_entities = 0;
  std::size_t correct_entities = 0;
  for (const auto& w : mentioned) {
    if (!lexicon.is_entity(w)) continue;
    ++mentioned_entities;
    correct_entities += story_entities.count(w);
  }
  s.consistency =
      mentioned_entities == 0 ? 10.0 : 10.0 * static_cast<double>(correct_entities) / static_cast<double>(mentioned_entities);

  s.emotional_depth = recall(std::set<std::string>(story.emotions.begin(), story.emotions.end()), mentioned);

  std::vector<std::set<std::string>> sentences;
  std::set<std::string> current;
  bool open = false;
  for (const auto& w : words) {
    if (w == ".") {
      if (open) sentences.push_back(std::move(current));
      current.clear();
      open = false;
      continue;
    }
    open = true;
    if (lexicon.is_entity(w)) current.insert(w);
  }
  if (open) sentences.push_back(std::move(current));
  if (sentences.size() < 2) {
    s.coherence = sentences.empty() ? 0.0 : 10.0;
  } else {
    std::size_t linked = 0;
    for (std::size_t i = 0; i + 1 < sentences.size(); ++i) {
      const auto& a = sentences[i];
      const auto& b = sentences[i + 1];
      linked += std::any_of(a.begin(), a.end(), [&](const std::string& e) { return b.count(e) > 0; }) ? 1 : 0;
    }
    s.coherence = 10.0 * static_cast<double>(linked) / static_cast<double>(sentences.size() - 1);
  }

  // Reference actions in order of first mention, paired with their story rank.
  std::vector<std::size_t> ranks;
  std::set<std::string> seen;
  for (const auto& w : words) {
    if (seen.count(w) > 0) continue;
    const auto it = std::find(story.actions.begin(), story.actions.end(), w);
    if (it == story.actions.end()) continue;
    seen.insert(w);
    ranks.push_back(static_cast<std::size_t>(it - story.actions.begin()));
  }
  if (ranks.size() < 2) {
    s.plot_progression = recall(std::set<std::string>(story.actions.begin(), story.actions.end()), mentioned);
  } else {
    std::size_t concordant = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      for (std::size_t j = i + 1; j < ranks.size(); ++j) {
        ++pairs;
        concordant += ranks[i] < ranks[j] ? 1 : 0;
      }
    }
    s.plot_progression = 10.0 * static_cast<double>(concordant) / static_cast<double>(pairs);
  }

  s.character_development = s.consistency;
  s.emotional_engagement = s.emotional_depth;
  s.overall = (s.coherence + s.relevance + s.emotional_depth + s.consistency) / 4.0;
  return s;
}

}  // namespace vstory
