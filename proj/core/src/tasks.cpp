#include "vstory/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "vstory/error.hpp"
#include "vstory/text.hpp"

namespace vstory {
namespace {

using nlohmann::json;

std::string comma_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ", ";
    out += items[i];
  }
  return out;
}

std::string with_prefix(TaskKind kind, const std::string& content) {
  std::string s(instruction_prefix(kind));
  if (!content.empty()) s += " " + content;
  return normalize_text(s);
}

}  // namespace

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCaption: return "caption";
    case TaskKind::kContinuation: return "continuation";
    case TaskKind::kConsistency: return "consistency";
    case TaskKind::kEmotion: return "emotion";
  }
  return "caption";
}

TaskKind task_kind_from_string(std::string_view name) {
  for (const auto kind : kAllTaskKinds) {
    if (to_string(kind) == name) return kind;
  }
  throw ValidationError("unknown task kind '" + std::string(name) + "'");
}

std::string_view instruction_prefix(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCaption: return "caption this frame:";
    case TaskKind::kContinuation: return "continue the story:";
    case TaskKind::kConsistency: return "keep characters consistent:";
    case TaskKind::kEmotion: return "express emotions:";
  }
  return "";
}

std::string story_prompt() { return with_prefix(TaskKind::kContinuation, ""); }

std::vector<std::string> template_words() {
  std::vector<std::string> words;
  for (const auto kind : kAllTaskKinds) {
    const auto w = split_words(instruction_prefix(kind));
    words.insert(words.end(), w.begin(), w.end());
  }
  const auto bare = split_words(kBarePrompt);
  words.insert(words.end(), bare.begin(), bare.end());
  words.emplace_back(",");
  words.emplace_back(".");
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

InstructionExample build_caption_task(const VisualStory& story, int frame_idx) {
  if (frame_idx < 0 || static_cast<std::size_t>(frame_idx) >= story.frames.size()) {
    throw ValidationError("caption frame index " + std::to_string(frame_idx) + " out of range for story '" +
                          story.id + "' with " + std::to_string(story.frames.size()) + " frames");
  }
  const auto idx = static_cast<std::size_t>(frame_idx);
  return InstructionExample{TaskKind::kCaption,   with_prefix(TaskKind::kCaption, ""), {story.frames[idx]},
                            story.captions[idx], story.id,                            frame_idx};
}

InstructionExample build_continuation_task(const VisualStory& story, int prefix_len) {
  const auto sentences = split_sentences(story.narrative);
  if (prefix_len < 1 || static_cast<std::size_t>(prefix_len) >= story.frames.size() ||
      sentences.size() != story.frames.size()) {
    throw ValidationError("continuation prefix length " + std::to_string(prefix_len) + " invalid for story '" +
                          story.id + "' with " + std::to_string(story.frames.size()) + " frames");
  }
  std::string prefix;
  std::string target;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    auto& dst = i < static_cast<std::size_t>(prefix_len) ? prefix : target;
    if (!dst.empty()) dst += " ";
    dst += sentences[i];
  }
  return InstructionExample{TaskKind::kContinuation, with_prefix(TaskKind::kContinuation, prefix),
                            story.frames,            target,
                            story.id,                prefix_len};
}

InstructionExample build_story_task(const VisualStory& story) {
  return InstructionExample{TaskKind::kContinuation, story_prompt(), story.frames, story.narrative, story.id, 0};
}

InstructionExample build_consistency_task(const VisualStory& story) {
  return InstructionExample{TaskKind::kConsistency,
                            with_prefix(TaskKind::kConsistency, comma_list(story.entities)),
                            story.frames,
                            story.narrative,
                            story.id,
                            std::nullopt};
}

InstructionExample build_emotion_task(const VisualStory& story) {
  return InstructionExample{TaskKind::kEmotion,
                            with_prefix(TaskKind::kEmotion, comma_list(story.emotions)),
                            story.frames,
                            story.narrative,
                            story.id,
                            std::nullopt};
}

void validate_example(const InstructionExample& ex) {
  const std::string where = "example from story '" + ex.source_story_id + "'";
  if (!ex.instruction.starts_with(instruction_prefix(ex.task_kind))) {
    throw ValidationError(where + ": instruction does not match task kind " + std::string(to_string(ex.task_kind)));
  }
  if (ex.target.empty()) throw ValidationError(where + ": empty target");
  if (ex.image_seq.empty()) throw ValidationError(where + ": empty image sequence");
}

double TaskWeights::of(TaskKind kind) const {
  switch (kind) {
    case TaskKind::kCaption: return caption;
    case TaskKind::kContinuation: return continuation;
    case TaskKind::kConsistency: return consistency;
    case TaskKind::kEmotion: return emotion;
  }
  return 0.0;
}

TaskWeights parse_task_weights(std::string_view spec) {
  TaskWeights w{0, 0, 0, 0};
  std::size_t pos = 0;
  while (pos < spec.size()) {
    auto end = spec.find(',', pos);
    if (end == std::string_view::npos) end = spec.size();
    const auto item = spec.substr(pos, end - pos);
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) throw ConfigError("weight entry '" + std::string(item) + "' lacks '='");
    TaskKind kind{};
    try {
      kind = task_kind_from_string(item.substr(0, eq));
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("task weights: ") + e.what());
    }
    double value = 0;
    try {
      value = std::stod(std::string(item.substr(eq + 1)));
    } catch (const std::exception&) {
      throw ConfigError("weight entry '" + std::string(item) + "' has a non-numeric value");
    }
    if (!(value >= 0) || !std::isfinite(value)) throw ConfigError("task weights must be finite and non-negative");
    switch (kind) {
      case TaskKind::kCaption: w.caption = value; break;
      case TaskKind::kContinuation: w.continuation = value; break;
      case TaskKind::kConsistency: w.consistency = value; break;
      case TaskKind::kEmotion: w.emotion = value; break;
    }
    pos = end + 1;
  }
  return w;
}

std::vector<TaskRef> enumerate_tasks(const Corpus& corpus, TaskKind kind) {
  std::vector<TaskRef> refs;
  for (std::size_t s = 0; s < corpus.stories.size(); ++s) {
    const int n = static_cast<int>(corpus.stories[s].frames.size());
    switch (kind) {
      case TaskKind::kCaption:
        for (int f = 0; f < n; ++f) refs.push_back({kind, s, f});
        break;
      case TaskKind::kContinuation:
        for (int p = 0; p < n; ++p) refs.push_back({kind, s, p});
        break;
      case TaskKind::kConsistency:
      case TaskKind::kEmotion:
        refs.push_back({kind, s, 0});
        break;
    }
  }
  return refs;
}

InstructionExample materialize(const Corpus& corpus, const TaskRef& ref) {
  const auto& story = corpus.stories.at(ref.story);
  switch (ref.kind) {
    case TaskKind::kCaption: return build_caption_task(story, ref.arg);
    case TaskKind::kContinuation:
      return ref.arg == 0 ? build_story_task(story) : build_continuation_task(story, ref.arg);
    case TaskKind::kConsistency: return build_consistency_task(story);
    case TaskKind::kEmotion: return build_emotion_task(story);
  }
  throw ValidationError("bad task kind");
}

std::vector<TaskRef> sample_task_mixture(const Corpus& corpus, const TaskWeights& weights, std::uint64_t seed,
                                         std::size_t n_examples) {
  double total = 0;
  for (const auto kind : kAllTaskKinds) {
    const double w = weights.of(kind);
    if (!(w >= 0) || !std::isfinite(w)) throw ValidationError("task weights must be finite and non-negative");
    total += w;
  }
  if (!(total > 0)) throw ValidationError("task weights must not all be zero");
  if (corpus.stories.empty()) throw ValidationError("cannot build tasks from an empty corpus");

  // Largest-remainder allocation keeps each kind within one example of its
  // exact share.
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> remainders{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double exact = weights.of(kAllTaskKinds[k]) / total * static_cast<double>(n_examples);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    remainders[k] = exact - std::floor(exact);
    assigned += counts[k];
  }
  std::array<std::size_t, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return remainders[a] > remainders[b]; });
  for (std::size_t i = 0; assigned < n_examples; ++i, ++assigned) ++counts[order[i % 4]];

  std::mt19937_64 rng(seed);
  std::vector<TaskRef> out;
  out.reserve(n_examples);
  for (std::size_t k = 0; k < 4; ++k) {
    if (counts[k] == 0) continue;
    const auto pool = enumerate_tasks(corpus, kAllTaskKinds[k]);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < counts[k]; ++i) out.push_back(pool[pick(rng)]);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::vector<InstructionExample> build_task_mixture(const Corpus& corpus, const TaskWeights& weights,
                                                   std::uint64_t seed, std::size_t n_examples) {
  const auto refs = sample_task_mixture(corpus, weights, seed, n_examples);
  std::vector<InstructionExample> out;
  out.reserve(refs.size());
  for (const auto& ref : refs) out.push_back(materialize(corpus, ref));
  return out;
}

void save_task_set(const std::vector<InstructionExample>& examples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& ex : examples) {
    json j{{"task_kind", to_string(ex.task_kind)},
           {"instruction", ex.instruction},
           {"source_story_id", ex.source_story_id},
           {"frame_index", ex.frame_index ? json(*ex.frame_index) : json(nullptr)},
           {"target", ex.target}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::vector<InstructionExample> load_task_set(const std::filesystem::path& path, const Corpus& corpus) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open task set '" + path.string() + "'");
  std::unordered_map<std::string, const VisualStory*> by_id;
  for (const auto& s : corpus.stories) by_id.emplace(s.id, &s);

  std::vector<InstructionExample> out;
  std::string line;
  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::string where = "record " + std::to_string(record);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + ": malformed JSON: " + e.what());
    }
    for (const char* field : {"task_kind", "instruction", "source_story_id", "frame_index", "target"}) {
      if (!j.contains(field)) throw ValidationError(where + ": field '" + field + "': missing");
    }
    InstructionExample ex;
    ex.task_kind = task_kind_from_string(j["task_kind"].get<std::string>());
    ex.instruction = j["instruction"].get<std::string>();
    ex.source_story_id = j["source_story_id"].get<std::string>();
    ex.target = j["target"].get<std::string>();
    if (!j["frame_index"].is_null()) ex.frame_index = j["frame_index"].get<int>();
    const auto it = by_id.find(ex.source_story_id);
    if (it == by_id.end()) {
      throw ValidationError(where + ": field 'source_story_id': story '" + ex.source_story_id + "' not in corpus");
    }
    const auto& frames = it->second->frames;
    if (ex.task_kind == TaskKind::kCaption) {
      if (!ex.frame_index || *ex.frame_index < 0 || static_cast<std::size_t>(*ex.frame_index) >= frames.size()) {
        throw ValidationError(where + ": field 'frame_index': out of range");
      }
      ex.image_seq = {frames[static_cast<std::size_t>(*ex.frame_index)]};
    } else {
      ex.image_seq = frames;
    }
    validate_example(ex);
    out.push_back(std::move(ex));
    ++record;
  }
  return out;
}

}  // namespace vstory
