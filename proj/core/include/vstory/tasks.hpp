#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vstory/corpus.hpp"

namespace vstory {

enum class TaskKind { kCaption, kContinuation, kConsistency, kEmotion };

inline constexpr std::array<TaskKind, 4> kAllTaskKinds = {TaskKind::kCaption, TaskKind::kContinuation,
                                                          TaskKind::kConsistency, TaskKind::kEmotion};

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view name);

// Fixed instruction templates. Each instruction starts with its kind's
// prefix; the prefix may be followed by task-specific content.
//   caption:      "caption this frame:"
//   continuation: "continue the story:" + the given prefix sentences
//   consistency:  "keep characters consistent:" + comma-separated entities
//   emotion:      "express emotions:" + comma-separated emotions
std::string_view instruction_prefix(TaskKind kind);

// Prompt used to request a whole narrative: the continuation template with
// an empty prefix. Evaluation and the reinforcement phase both use it.
std::string story_prompt();

// The single prompt used when instruction tuning is ablated away.
inline constexpr std::string_view kBarePrompt = "describe";

// Every word that can appear in an instruction, excluding lexicon content.
std::vector<std::string> template_words();

struct InstructionExample {
  TaskKind task_kind = TaskKind::kCaption;
  std::string instruction;
  std::vector<ImageFrame> image_seq;
  std::string target;
  std::string source_story_id;
  // Caption: the captioned frame. Continuation: the prefix length (index of
  // the first frame to narrate), 0 for the whole story. Absent otherwise.
  std::optional<int> frame_index;

  bool operator==(const InstructionExample&) const = default;
};

InstructionExample build_caption_task(const VisualStory& story, int frame_idx);
InstructionExample build_continuation_task(const VisualStory& story, int prefix_len);
// Whole-narrative continuation: story_prompt() over all frames, target is the
// full narrative, frame_index 0.
InstructionExample build_story_task(const VisualStory& story);
InstructionExample build_consistency_task(const VisualStory& story);
InstructionExample build_emotion_task(const VisualStory& story);

// Throws ValidationError when an example breaks the type invariants.
void validate_example(const InstructionExample& example);

struct TaskWeights {
  double caption = 0.4;
  double continuation = 0.3;
  double consistency = 0.15;
  double emotion = 0.15;

  double of(TaskKind kind) const;
};

// Parses "caption=0.4,continuation=0.3,...". Unnamed kinds get weight 0.
TaskWeights parse_task_weights(std::string_view spec);

// Lightweight reference to one candidate example in a corpus.
struct TaskRef {
  TaskKind kind = TaskKind::kCaption;
  std::size_t story = 0;
  int arg = 0;  // frame index or prefix length; unused for whole-story kinds
};

// All examples of `kind` a corpus admits: one caption per frame, one
// continuation per prefix length (0 meaning the whole-narrative prompt), one consistency and one emotion task per story.
std::vector<TaskRef> enumerate_tasks(const Corpus& corpus, TaskKind kind);

InstructionExample materialize(const Corpus& corpus, const TaskRef& ref);

// Draws `n_examples` task references. Kind counts are allocated from the
// normalized weights by largest remainder, items are drawn uniformly from
// each kind's pool, and the result is shuffled. Deterministic given seed.
std::vector<TaskRef> sample_task_mixture(const Corpus& corpus, const TaskWeights& weights, std::uint64_t seed,
                                         std::size_t n_examples);

std::vector<InstructionExample> build_task_mixture(const Corpus& corpus, const TaskWeights& weights,
                                                   std::uint64_t seed, std::size_t n_examples);

// Task-set file: one JSON object per line with
// {task_kind, instruction, source_story_id, frame_index, target}. Images are
// resolved against the corpus on load.
void save_task_set(const std::vector<InstructionExample>& examples, const std::filesystem::path& path);
std::vector<InstructionExample> load_task_set(const std::filesystem::path& path, const Corpus& corpus);

}  // namespace vstory
