#pragma once

#include <span>
#include <string>
#include <vector>

#include "vstory/corpus.hpp"

namespace vstory {

// Per-criterion scores on the 0-10 scale.
struct JudgeScore {
  double coherence = 0;
  double relevance = 0;
  double emotional_depth = 0;
  double consistency = 0;
  double overall = 0;
  double character_development = 0;
  double plot_progression = 0;
  double emotional_engagement = 0;

  bool operator==(const JudgeScore&) const = default;
};

// Maps overall (0-10) onto [0,1].
double reward(const JudgeScore& score);

class Judge {
 public:
  virtual ~Judge() = default;

  virtual JudgeScore score_story(const std::string& generated, const VisualStory& story) const = 0;
  virtual std::string kind() const = 0;

  // Scores generated[i] against *stories[i]. Results come back in input
  // order; implementations may score concurrently.
  virtual std::vector<JudgeScore> score_batch(std::span<const std::string> generated,
                                              std::span<const VisualStory* const> stories) const;
};

// Deterministic rubric against the story's ground-truth metadata.
//   relevance         10 * recall of story entities and actions
//   consistency       10 * share of mentioned lexicon entities that belong
//                     to the story (10 when none are mentioned)
//   emotional_depth   10 * recall of story emotions
//   coherence         10 * share of adjacent sentences that share an entity;
//                     with fewer than two sentences, 10 if non-empty else 0
//   plot_progression  10 * share of concordant pairs between the story's
//                     action order and first-mention order; with fewer than
//                     two actions mentioned, 10 * action recall
//   character_development = consistency, emotional_engagement = emotional_depth
//   overall           mean of coherence, relevance, emotional_depth, consistency
JudgeScore score_story_rubric(const std::string& generated, const VisualStory& story,
                              const Lexicon& lexicon = default_lexicon());

class RubricJudge final : public Judge {
 public:
  explicit RubricJudge(Lexicon lexicon = default_lexicon()) : lexicon_(std::move(lexicon)) {}

  JudgeScore score_story(const std::string& generated, const VisualStory& story) const override {
    return score_story_rubric(generated, story, lexicon_);
  }
  std::string kind() const override { return "rubric"; }

 private:
  Lexicon lexicon_;
};

// Returns the same score for every input. Useful for wiring checks.
class ConstantJudge final : public Judge {
 public:
  explicit ConstantJudge(double value);

  JudgeScore score_story(const std::string&, const VisualStory&) const override { return score_; }
  std::string kind() const override { return "constant"; }

 private:
  JudgeScore score_;
};

}  // namespace vstory
