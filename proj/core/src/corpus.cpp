#include "vstory/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "base64.hpp"
#include "vstory/error.hpp"
#include "vstory/text.hpp"

namespace vstory {
namespace {

using nlohmann::json;

constexpr std::array<Rgb, 16> kEntityPalette = {{
    {255, 40, 40},   {40, 230, 60},   {60, 90, 255},   {255, 235, 40},
    {235, 50, 220},  {40, 235, 235},  {255, 150, 20},  {150, 60, 255},
    {255, 255, 255}, {180, 255, 60},  {255, 160, 200}, {20, 170, 150},
    {120, 180, 255}, {200, 120, 60},  {200, 200, 110}, {255, 90, 130},
}};

constexpr std::array<Rgb, 8> kBackgroundPalette = {{
    {20, 60, 30},  {30, 50, 90},  {70, 90, 40},  {80, 80, 80},
    {100, 80, 50}, {90, 50, 50},  {60, 40, 80},  {40, 40, 40},
}};

constexpr std::array<Rgb, 8> kEmotionPalette = {{
    {255, 200, 0}, {0, 0, 160},    {100, 0, 100}, {200, 0, 0},
    {0, 160, 160}, {255, 120, 60}, {160, 100, 0}, {100, 100, 140},
}};

constexpr std::array<Rgb, 12> kActionPalette = {{
    {230, 30, 30},  {30, 200, 30},  {30, 30, 230},  {230, 230, 30},
    {230, 30, 230}, {30, 230, 230}, {120, 60, 0},   {0, 100, 60},
    {60, 0, 120},   {250, 250, 250}, {130, 130, 130}, {0, 0, 0},
}};

std::ptrdiff_t index_of(const std::vector<std::string>& list, const std::string& name) {
  const auto it = std::find(list.begin(), list.end(), name);
  return it == list.end() ? -1 : std::distance(list.begin(), it);
}

bool list_contains(const std::vector<std::string>& list, const std::string& name) {
  return index_of(list, name) >= 0;
}

template <std::size_t N>
Rgb palette_lookup(const std::array<Rgb, N>& palette, const std::vector<std::string>& names,
                   const std::string& name, const char* kind) {
  const auto idx = index_of(names, name);
  if (idx < 0) throw ValidationError(std::string("unknown ") + kind + " '" + name + "'");
  if (static_cast<std::size_t>(idx) >= N) {
    throw ValidationError(std::string("no palette colour for ") + kind + " '" + name + "'");
  }
  return palette[static_cast<std::size_t>(idx)];
}

std::mt19937_64 story_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::vector<std::string> sorted_unique(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

VisualStory assemble_story(std::string id, std::vector<SceneSpec> scenes, const Lexicon& lexicon) {
  VisualStory story;
  story.id = std::move(id);
  std::vector<std::string> entities;
  std::vector<std::string> emotions;
  std::vector<std::string> sentences;
  for (auto& scene : scenes) {
    story.frames.push_back(render_frame(scene, lexicon));
    story.captions.push_back(caption_for(scene));
    sentences.push_back(narrative_sentence(scene));
    story.actions.push_back(scene.action);
    entities.insert(entities.end(), scene.entities.begin(), scene.entities.end());
    emotions.push_back(scene.emotion);
  }
  std::string narrative;
  for (const auto& s : sentences) {
    if (!narrative.empty()) narrative.push_back(' ');
    narrative += s;
  }
  story.narrative = std::move(narrative);
  story.entities = sorted_unique(std::move(entities));
  story.emotions = sorted_unique(std::move(emotions));
  return story;
}

// ---- json (de)serialization -------------------------------------------------

[[noreturn]] void schema_error(std::size_t record, const std::string& field, const std::string& what) {
  throw ValidationError("record " + std::to_string(record) + ": field '" + field + "': " + what);
}

const json& require(const json& obj, const char* field, std::size_t record) {
  if (!obj.is_object()) schema_error(record, field, "enclosing value is not an object");
  const auto it = obj.find(field);
  if (it == obj.end()) schema_error(record, field, "missing");
  return *it;
}

std::string get_string(const json& obj, const char* field, std::size_t record) {
  const auto& v = require(obj, field, record);
  if (!v.is_string()) schema_error(record, field, "expected string");
  return v.get<std::string>();
}

std::vector<std::string> get_string_list(const json& obj, const char* field, std::size_t record) {
  const auto& v = require(obj, field, record);
  if (!v.is_array()) schema_error(record, field, "expected array of strings");
  std::vector<std::string> out;
  for (const auto& item : v) {
    if (!item.is_string()) schema_error(record, field, "expected array of strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

json lexicon_to_json(const Lexicon& lex) {
  return json{{"entities", lex.entities},
              {"actions", lex.actions},
              {"emotions", lex.emotions},
              {"backgrounds", lex.backgrounds},
              {"function_words", lex.function_words}};
}

Lexicon lexicon_from_json(const json& j) {
  constexpr std::size_t kHeader = 0;
  Lexicon lex;
  lex.entities = get_string_list(j, "entities", kHeader);
  lex.actions = get_string_list(j, "actions", kHeader);
  lex.emotions = get_string_list(j, "emotions", kHeader);
  lex.backgrounds = get_string_list(j, "backgrounds", kHeader);
  lex.function_words = get_string_list(j, "function_words", kHeader);
  return lex;
}

json frame_to_json(const ImageFrame& frame) {
  return json{{"width", frame.width},
              {"height", frame.height},
              {"pixels", detail::base64_encode(frame.pixels)},
              {"scene",
               {{"entities", frame.scene.entities},
                {"action", frame.scene.action},
                {"emotion", frame.scene.emotion},
                {"background", frame.scene.background},
                {"layout_seed", frame.scene.layout_seed}}}};
}

ImageFrame frame_from_json(const json& j, std::size_t record, std::size_t frame_index) {
  const std::string prefix = "frames[" + std::to_string(frame_index) + "].";
  ImageFrame frame;
  const auto& w = require(j, "width", record);
  const auto& h = require(j, "height", record);
  if (!w.is_number_integer() || w.get<int>() != kFrameWidth) schema_error(record, prefix + "width", "must be 16");
  if (!h.is_number_integer() || h.get<int>() != kFrameHeight) schema_error(record, prefix + "height", "must be 16");

  const auto& px = require(j, "pixels", record);
  if (px.is_string()) {
    const auto bytes = detail::base64_decode(px.get<std::string>());
    if (!bytes) schema_error(record, prefix + "pixels", "malformed base64");
    if (bytes->size() != static_cast<std::size_t>(kFrameBytes)) {
      schema_error(record, prefix + "pixels", "expected 768 bytes, got " + std::to_string(bytes->size()));
    }
    std::copy(bytes->begin(), bytes->end(), frame.pixels.begin());
  } else if (px.is_array()) {
    // Plain integer arrays are accepted on input; output always uses base64.
    if (px.size() != static_cast<std::size_t>(kFrameBytes)) {
      schema_error(record, prefix + "pixels", "expected 768 values, got " + std::to_string(px.size()));
    }
    for (std::size_t i = 0; i < px.size(); ++i) {
      if (!px[i].is_number_integer()) schema_error(record, prefix + "pixels", "non-integer value");
      const auto v = px[i].get<long long>();
      if (v < 0 || v > 255) {
        schema_error(record, prefix + "pixels",
                     "value " + std::to_string(v) + " at offset " + std::to_string(i) + " outside [0,255]");
      }
      frame.pixels[i] = static_cast<std::uint8_t>(v);
    }
  } else {
    schema_error(record, prefix + "pixels", "expected base64 string");
  }

  const auto& scene = require(j, "scene", record);
  frame.scene.entities = get_string_list(scene, "entities", record);
  frame.scene.action = get_string(scene, "action", record);
  frame.scene.emotion = get_string(scene, "emotion", record);
  frame.scene.background = get_string(scene, "background", record);
  const auto& ls = require(scene, "layout_seed", record);
  if (!ls.is_number_unsigned() && !(ls.is_number_integer() && ls.get<long long>() >= 0)) {
    schema_error(record, prefix + "scene.layout_seed", "expected non-negative integer");
  }
  frame.scene.layout_seed = ls.get<std::uint64_t>();
  return frame;
}

json story_to_json(const VisualStory& story) {
  json frames = json::array();
  for (const auto& f : story.frames) frames.push_back(frame_to_json(f));
  return json{{"id", story.id},
              {"frames", std::move(frames)},
              {"captions", story.captions},
              {"narrative", story.narrative},
              {"entities", story.entities},
              {"actions", story.actions},
              {"emotions", story.emotions}};
}

VisualStory story_from_json(const json& j, std::size_t record) {
  if (!j.is_object()) throw ValidationError("record " + std::to_string(record) + ": not a JSON object");
  VisualStory story;
  story.id = get_string(j, "id", record);
  const auto& frames = require(j, "frames", record);
  if (!frames.is_array()) schema_error(record, "frames", "expected array");
  for (std::size_t i = 0; i < frames.size(); ++i) story.frames.push_back(frame_from_json(frames[i], record, i));
  story.captions = get_string_list(j, "captions", record);
  story.narrative = get_string(j, "narrative", record);
  story.entities = get_string_list(j, "entities", record);
  story.actions = get_string_list(j, "actions", record);
  story.emotions = get_string_list(j, "emotions", record);
  return story;
}

}  // namespace

// ---- lexicon ---------------------------------------------------------------

bool Lexicon::is_entity(const std::string& w) const { return list_contains(entities, w); }
bool Lexicon::is_action(const std::string& w) const { return list_contains(actions, w); }
bool Lexicon::is_emotion(const std::string& w) const { return list_contains(emotions, w); }
bool Lexicon::is_background(const std::string& w) const { return list_contains(backgrounds, w); }
bool Lexicon::is_function_word(const std::string& w) const { return list_contains(function_words, w); }

bool Lexicon::contains(const std::string& w) const {
  return is_entity(w) || is_action(w) || is_emotion(w) || is_background(w) || is_function_word(w);
}

std::vector<std::string> Lexicon::all_words() const {
  std::vector<std::string> words;
  for (const auto* list : {&entities, &actions, &emotions, &backgrounds, &function_words}) {
    words.insert(words.end(), list->begin(), list->end());
  }
  return sorted_unique(std::move(words));
}

const Lexicon& default_lexicon() {
  static const Lexicon lex{
      {"fox", "owl", "bear", "rabbit", "wolf", "deer", "cat", "dog", "frog", "mouse", "lion", "horse",
       "goat", "duck", "crow", "turtle"},
      {"ran", "jumped", "slept", "swam", "climbed", "danced", "ate", "sang", "hid", "flew", "fought",
       "played"},
      {"happy", "sad", "afraid", "angry", "calm", "curious", "proud", "lonely"},
      {"forest", "river", "meadow", "castle", "desert", "village", "beach", "mountain"},
      {"and", "feeling", "in", "the"},
  };
  return lex;
}

Rgb entity_color(const std::string& entity, const Lexicon& lexicon) {
  return palette_lookup(kEntityPalette, lexicon.entities, entity, "entity");
}
Rgb background_color(const std::string& background, const Lexicon& lexicon) {
  return palette_lookup(kBackgroundPalette, lexicon.backgrounds, background, "background");
}
Rgb action_color(const std::string& action, const Lexicon& lexicon) {
  return palette_lookup(kActionPalette, lexicon.actions, action, "action");
}

Rgb emotion_color(const std::string& emotion, const Lexicon& lexicon) {
  return palette_lookup(kEmotionPalette, lexicon.emotions, emotion, "emotion");
}

// ---- rendering ---------------------------------------------------------------

ImageFrame render_frame(const SceneSpec& scene, const Lexicon& lexicon) {
  const auto n = scene.entities.size();
  if (n == 0) throw ValidationError("scene has no entities");
  if (n > static_cast<std::size_t>(kMaxEntitiesPerFrame)) {
    throw ValidationError("scene has " + std::to_string(n) + " entities; at most 3 allowed");
  }
  if (sorted_unique(scene.entities).size() != n) throw ValidationError("scene repeats an entity");
  ImageFrame frame;
  frame.scene = scene;
  auto put = [&frame](int row, int col, const Rgb& c) {
    const auto base = static_cast<std::size_t>((row * kFrameWidth + col) * kFrameChannels);
    frame.pixels[base] = c[0];
    frame.pixels[base + 1] = c[1];
    frame.pixels[base + 2] = c[2];
  };

  const Rgb bg = background_color(scene.background, lexicon);
  const Rgb top = emotion_color(scene.emotion, lexicon);
  const Rgb bottom = action_color(scene.action, lexicon);
  for (int r = 0; r < kFrameHeight; ++r) {
    const Rgb& fill = r < kEmotionBandRows ? top : (r >= kFrameHeight - kActionBandRows ? bottom : bg);
    for (int c = 0; c < kFrameWidth; ++c) put(r, c, fill);
  }

  std::mt19937_64 rng(scene.layout_seed);
  constexpr int kCell = 4;
  constexpr int kGridCols = kFrameWidth / kCell;
  constexpr int kFirstRow = (kEmotionBandRows + kCell - 1) / kCell;
  constexpr int kEndRow = (kFrameHeight - kActionBandRows) / kCell;
  std::vector<int> cols(kGridCols);
  std::iota(cols.begin(), cols.end(), 0);
  std::shuffle(cols.begin(), cols.end(), rng);
  cols.resize(n);
  std::sort(cols.begin(), cols.end());
  for (std::size_t k = 0; k < n; ++k) {
    const Rgb color = entity_color(scene.entities[k], lexicon);
    const int row = kFirstRow + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(kEndRow - kFirstRow)));
    for (int r = 0; r < kCell; ++r) {
      for (int c = 0; c < kCell; ++c) put(row * kCell + r, cols[k] * kCell + c, color);
    }
  }
  return frame;
}

std::string narrative_sentence(const SceneSpec& scene) {
  std::string s;
  for (std::size_t i = 0; i < scene.entities.size(); ++i) {
    if (i > 0) s += " and ";
    s += scene.entities[i];
  }
  return s + " " + scene.action + " feeling " + scene.emotion + ".";
}

std::string caption_for(const SceneSpec& scene) {
  std::string s = narrative_sentence(scene);
  s.pop_back();
  return s + " in the " + scene.background + ".";
}

std::vector<std::string> split_sentences(const std::string& narrative) {
  std::vector<std::string> out;
  std::string current;
  auto trim_push = [&out](std::string s) {
    const auto b = s.find_first_not_of(" \t\n\r");
    if (b == std::string::npos) return;
    const auto e = s.find_last_not_of(" \t\n\r");
    out.push_back(s.substr(b, e - b + 1));
  };
  for (const char c : narrative) {
    current.push_back(c);
    if (c == '.') {
      trim_push(std::move(current));
      current.clear();
    }
  }
  trim_push(std::move(current));
  return out;
}

// ---- generation --------------------------------------------------------------

Corpus generate_synthetic_corpus(std::uint64_t seed, int n_stories, FrameRange frames) {
  if (n_stories < 1) throw ValidationError("n_stories must be >= 1, got " + std::to_string(n_stories));
  if (frames.min < kMinFrames || frames.max > kMaxFrames || frames.min > frames.max) {
    throw ValidationError("frames_per_story range [" + std::to_string(frames.min) + "," +
                          std::to_string(frames.max) + "] must satisfy 2 <= min <= max <= 5");
  }
  const Lexicon& lex = default_lexicon();
  Corpus corpus;
  corpus.lexicon = lex;
  corpus.seed = seed;
  corpus.stories.reserve(static_cast<std::size_t>(n_stories));

  for (int i = 0; i < n_stories; ++i) {
    auto rng = story_rng(seed, static_cast<std::uint64_t>(i));
    const int n_frames = frames.min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(frames.max - frames.min + 1)));

    // Round-robin protagonists guarantee every entity appears once the
    // corpus has at least as many stories as entities.
    const std::string protagonist = lex.entities[static_cast<std::size_t>(i) % lex.entities.size()];
    std::vector<std::string> others;
    for (const auto& e : lex.entities) {
      if (e != protagonist) others.push_back(e);
    }
    std::shuffle(others.begin(), others.end(), rng);
    const std::vector<std::string> supporting(others.begin(), others.begin() + 2);

    std::vector<std::string> actions = lex.actions;
    std::shuffle(actions.begin(), actions.end(), rng);

    std::string background = lex.backgrounds[uniform_index(rng, lex.backgrounds.size())];
    std::vector<SceneSpec> scenes;
    for (int f = 0; f < n_frames; ++f) {
      SceneSpec scene;
      scene.entities.push_back(protagonist);
      const std::size_t mask = uniform_index(rng, 4);
      for (std::size_t s = 0; s < supporting.size(); ++s) {
        if (mask & (std::size_t{1} << s)) scene.entities.push_back(supporting[s]);
      }
      scene.action = actions[static_cast<std::size_t>(f)];
      scene.emotion = lex.emotions[uniform_index(rng, lex.emotions.size())];
      if (f > 0 && uniform_index(rng, 4) == 0) {
        background = lex.backgrounds[uniform_index(rng, lex.backgrounds.size())];
      }
      scene.background = background;
      scene.layout_seed = rng() >> 32;
      scenes.push_back(std::move(scene));
    }
    char id[48];
    std::snprintf(id, sizeof(id), "story_%llu_%04d", static_cast<unsigned long long>(seed), i);
    corpus.stories.push_back(assemble_story(id, std::move(scenes), lex));
  }
  return corpus;
}

// ---- validation --------------------------------------------------------------

void validate_story(const VisualStory& story, const Lexicon& lexicon, std::size_t index) {
  auto fail = [&](const std::string& field, const std::string& what) { schema_error(index, field, what); };
  if (story.id.empty()) fail("id", "empty");
  const auto n = story.frames.size();
  if (n < static_cast<std::size_t>(kMinFrames) || n > static_cast<std::size_t>(kMaxFrames)) {
    fail("frames", "expected 2-5 frames, got " + std::to_string(n));
  }
  if (story.captions.size() != n) fail("captions", "count differs from frame count");
  if (story.actions.size() != n) fail("actions", "count differs from frame count");
  if (split_sentences(story.narrative).size() != n) fail("narrative", "sentence count differs from frame count");

  std::vector<std::string> entities;
  std::vector<std::string> emotions;
  for (std::size_t f = 0; f < n; ++f) {
    const auto& frame = story.frames[f];
    const std::string field = "frames[" + std::to_string(f) + "]";
    if (frame.width != kFrameWidth || frame.height != kFrameHeight) fail(field, "frame must be 16x16");
    const auto& sc = frame.scene;
    if (sc.entities.empty()) fail(field + ".scene.entities", "empty");
    for (const auto& e : sc.entities) {
      if (!lexicon.is_entity(e)) fail(field + ".scene.entities", "unknown entity '" + e + "'");
    }
    if (!lexicon.is_action(sc.action)) fail(field + ".scene.action", "unknown action '" + sc.action + "'");
    if (!lexicon.is_emotion(sc.emotion)) fail(field + ".scene.emotion", "unknown emotion '" + sc.emotion + "'");
    if (!lexicon.is_background(sc.background)) {
      fail(field + ".scene.background", "unknown background '" + sc.background + "'");
    }
    if (story.actions[f] != sc.action) fail("actions", "actions[" + std::to_string(f) + "] disagrees with scene");
    entities.insert(entities.end(), sc.entities.begin(), sc.entities.end());
    emotions.push_back(sc.emotion);
  }
  if (story.entities != sorted_unique(entities)) fail("entities", "not the union of frame entities");
  if (story.emotions != sorted_unique(emotions)) fail("emotions", "not the union of frame emotions");

  for (const auto& w : split_words(story.narrative)) {
    if (!is_punctuation(w) && !lexicon.contains(w)) fail("narrative", "word '" + w + "' outside the lexicon");
  }
}

void validate_corpus(const Corpus& corpus) {
  std::set<std::string> ids;
  for (std::size_t i = 0; i < corpus.stories.size(); ++i) {
    validate_story(corpus.stories[i], corpus.lexicon, i);
    if (!ids.insert(corpus.stories[i].id).second) schema_error(i, "id", "duplicate id '" + corpus.stories[i].id + "'");
  }
}

// ---- file io -----------------------------------------------------------------

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const json header{{"format_version", 1}, {"seed", corpus.seed}, {"lexicon", lexicon_to_json(corpus.lexicon)}};
  out << header.dump() << '\n';
  for (const auto& story : corpus.stories) out << story_to_json(story).dump() << '\n';
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("corpus '" + path.string() + "' is empty");

  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("header: malformed JSON: ") + e.what());
  }
  const auto version = header.value("format_version", -1);
  if (version != 1) throw ValidationError("header: field 'format_version': unsupported value " + std::to_string(version));
  if (!header.contains("seed") || !header["seed"].is_number_integer()) {
    throw ValidationError("header: field 'seed': missing or not an integer");
  }
  if (!header.contains("lexicon")) throw ValidationError("header: field 'lexicon': missing");

  Corpus corpus;
  corpus.seed = header["seed"].get<std::uint64_t>();
  corpus.lexicon = lexicon_from_json(header["lexicon"]);

  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError("record " + std::to_string(record) + ": malformed JSON: " + e.what());
    }
    corpus.stories.push_back(story_from_json(j, record));
    ++record;
  }
  validate_corpus(corpus);
  return corpus;
}

// ---- splitting ---------------------------------------------------------------

CorpusSplit split_corpus(const Corpus& corpus, SplitRatios ratios, std::uint64_t seed) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0) throw ValidationError("split ratios must be non-negative");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1");
  }
  const std::size_t n = corpus.stories.size();
  const auto n_val = static_cast<std::size_t>(std::llround(ratios.val * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::llround(ratios.test * static_cast<double>(n)));
  if (n_val + n_test > n) throw ValidationError("split ratios leave no room for rounding");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(n_val),
                                order.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), order.end());

  auto take = [&corpus](std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end());
    Corpus out;
    out.lexicon = corpus.lexicon;
    out.seed = corpus.seed;
    for (const auto i : idx) out.stories.push_back(corpus.stories[i]);
    return out;
  };
  return {take(std::move(train)), take(std::move(val)), take(std::move(test))};
}

}  // namespace vstory
