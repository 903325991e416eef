#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vstory {

inline constexpr int kFrameWidth = 16;
inline constexpr int kFrameHeight = 16;
inline constexpr int kFrameChannels = 3;
inline constexpr int kFrameBytes = kFrameWidth * kFrameHeight * kFrameChannels;
inline constexpr int kMinFrames = 2;
inline constexpr int kMaxFrames = 5;
inline constexpr int kMaxEntitiesPerFrame = 3;

// Closed word lists. Every name used in scene metadata and every word of a
// generated narrative comes from here.
struct Lexicon {
  std::vector<std::string> entities;
  std::vector<std::string> actions;
  std::vector<std::string> emotions;
  std::vector<std::string> backgrounds;
  std::vector<std::string> function_words;

  bool is_entity(const std::string& w) const;
  bool is_action(const std::string& w) const;
  bool is_emotion(const std::string& w) const;
  bool is_background(const std::string& w) const;
  bool is_function_word(const std::string& w) const;
  bool contains(const std::string& w) const;

  // entities ∪ actions ∪ emotions ∪ backgrounds ∪ function words, sorted.
  std::vector<std::string> all_words() const;

  bool operator==(const Lexicon&) const = default;
};

// The built-in lexicon used by the synthetic generator.
const Lexicon& default_lexicon();

struct SceneSpec {
  std::vector<std::string> entities;
  std::string action;
  std::string emotion;
  std::string background;
  std::uint64_t layout_seed = 0;

  bool operator==(const SceneSpec&) const = default;
};

// A 16x16 RGB frame, row-major, interleaved channels.
struct ImageFrame {
  int width = kFrameWidth;
  int height = kFrameHeight;
  std::array<std::uint8_t, kFrameBytes> pixels{};
  SceneSpec scene;

  std::uint8_t at(int row, int col, int channel) const {
    return pixels[static_cast<std::size_t>((row * kFrameWidth + col) * kFrameChannels + channel)];
  }

  bool operator==(const ImageFrame&) const = default;
};

struct VisualStory {
  std::string id;
  std::vector<ImageFrame> frames;
  std::vector<std::string> captions;
  std::string narrative;
  std::vector<std::string> entities;  // sorted, unique
  std::vector<std::string> actions;   // one per frame, in frame order
  std::vector<std::string> emotions;  // sorted, unique

  bool operator==(const VisualStory&) const = default;
};

struct Corpus {
  std::vector<VisualStory> stories;
  Lexicon lexicon;
  std::uint64_t seed = 0;

  bool operator==(const Corpus&) const = default;
};

struct FrameRange {
  int min = kMinFrames;
  int max = kMaxFrames;
};

// Rasterizes a scene: background fill, an emotion band across the top rows,
// an action band across the bottom rows, and one solid 4x4 blob per entity
// in the entity's colour. Blobs occupy cells of the 4x4 patch grid between
// the bands, one grid column per entity, left to right in list order.
// Throws ValidationError for an empty entity list or unknown names.
ImageFrame render_frame(const SceneSpec& scene, const Lexicon& lexicon = default_lexicon());

// Sentence used in the narrative for one frame, e.g. "fox and owl ran feeling happy."
std::string narrative_sentence(const SceneSpec& scene);
// Narrative sentence plus the background mention.
std::string caption_for(const SceneSpec& scene);

// Splits a narrative into sentences at '.', trimming whitespace. Each
// returned sentence keeps its trailing period.
std::vector<std::string> split_sentences(const std::string& narrative);

Corpus generate_synthetic_corpus(std::uint64_t seed, int n_stories, FrameRange frames_per_story);

// Checks every type invariant. Throws ValidationError naming the story index
// and the offending field.
void validate_story(const VisualStory& story, const Lexicon& lexicon, std::size_t index = 0);
void validate_corpus(const Corpus& corpus);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct CorpusSplit {
  Corpus train;
  Corpus val;
  Corpus test;
};

CorpusSplit split_corpus(const Corpus& corpus, SplitRatios ratios, std::uint64_t seed);

using Rgb = std::array<std::uint8_t, 3>;

// Palette lookups; throw ValidationError for names outside the lexicon.
Rgb entity_color(const std::string& entity, const Lexicon& lexicon = default_lexicon());
Rgb background_color(const std::string& background, const Lexicon& lexicon = default_lexicon());
Rgb emotion_color(const std::string& emotion, const Lexicon& lexicon = default_lexicon());
Rgb action_color(const std::string& action, const Lexicon& lexicon = default_lexicon());

// Rows [0, kEmotionBandRows) carry the emotion colour and the last
// kActionBandRows rows the action colour; entities are drawn in between.
inline constexpr int kEmotionBandRows = 2;
inline constexpr int kActionBandRows = 2;

}  // namespace vstory
