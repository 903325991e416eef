#include <gtest/gtest.h>

#include <map>
#include <set>

#include "support.hpp"
#include "vstory/corpus.hpp"
#include "vstory/error.hpp"
#include "vstory/manifest.hpp"

using namespace vstory;
using vstory::testing::scene;

namespace {

Rgb pixel(const ImageFrame& f, int r, int c) { return {f.at(r, c, 0), f.at(r, c, 1), f.at(r, c, 2)}; }

// 4-connected components of the pixels equal to `color`; returns their sizes.
std::vector<int> components(const ImageFrame& f, const Rgb& color) {
  std::vector<int> label(kFrameWidth * kFrameHeight, -1);
  std::vector<int> sizes;
  for (int r = 0; r < kFrameHeight; ++r) {
    for (int c = 0; c < kFrameWidth; ++c) {
      if (label[r * kFrameWidth + c] >= 0 || pixel(f, r, c) != color) continue;
      const int id = static_cast<int>(sizes.size());
      sizes.push_back(0);
      std::vector<std::pair<int, int>> stack = {{r, c}};
      label[r * kFrameWidth + c] = id;
      while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        ++sizes[id];
        const int dy[] = {1, -1, 0, 0};
        const int dx[] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          const int ny = y + dy[k], nx = x + dx[k];
          if (ny < 0 || nx < 0 || ny >= kFrameHeight || nx >= kFrameWidth) continue;
          if (label[ny * kFrameWidth + nx] >= 0 || pixel(f, ny, nx) != color) continue;
          label[ny * kFrameWidth + nx] = id;
          stack.push_back({ny, nx});
        }
      }
    }
  }
  return sizes;
}

}  // namespace

TEST(Render, BandsAndOneBlobPerEntity) {
  const auto corpus = generate_synthetic_corpus(11, 40, {});
  for (const auto& story : corpus.stories) {
    for (const auto& frame : story.frames) {
      const auto& sc = frame.scene;
      const auto emo = emotion_color(sc.emotion);
      const auto act = action_color(sc.action);
      for (int c = 0; c < kFrameWidth; ++c) {
        for (int r = 0; r < kEmotionBandRows; ++r) EXPECT_EQ(pixel(frame, r, c), emo);
        for (int r = kFrameHeight - kActionBandRows; r < kFrameHeight; ++r) EXPECT_EQ(pixel(frame, r, c), act);
      }
      int entity_pixels = 0;
      for (const auto& e : sc.entities) {
        // Count only the middle region; band colours may coincide with an entity colour.
        ImageFrame middle = frame;
        for (int r = 0; r < kFrameHeight; ++r) {
          if (r >= kEmotionBandRows && r < kFrameHeight - kActionBandRows) continue;
          for (int c = 0; c < kFrameWidth; ++c) {
            for (int ch = 0; ch < 3; ++ch) {
              middle.pixels[static_cast<std::size_t>((r * kFrameWidth + c) * 3 + ch)] =
                  static_cast<std::uint8_t>(entity_color(e)[static_cast<std::size_t>(ch)] ^ 0x55);
            }
          }
        }
        const auto sizes = components(middle, entity_color(e));
        ASSERT_EQ(sizes.size(), 1u) << story.id << " entity " << e;
        EXPECT_EQ(sizes[0], 16);
        entity_pixels += sizes[0];
      }
      const auto bg = background_color(sc.background);
      int bg_pixels = 0;
      for (int r = kEmotionBandRows; r < kFrameHeight - kActionBandRows; ++r) {
        for (int c = 0; c < kFrameWidth; ++c) bg_pixels += pixel(frame, r, c) == bg ? 1 : 0;
      }
      EXPECT_EQ(bg_pixels + entity_pixels, kFrameWidth * (kFrameHeight - kEmotionBandRows - kActionBandRows));
    }
  }
}

TEST(Render, EntitiesLeftToRightInListOrder) {
  const auto frame = render_frame(scene({"fox", "owl", "bear"}, "ran", "happy", "river", 99));
  std::vector<int> first_col;
  for (const auto& e : frame.scene.entities) {
    int col = kFrameWidth;
    for (int r = 0; r < kFrameHeight; ++r) {
      for (int c = 0; c < kFrameWidth; ++c) {
        if (r >= kEmotionBandRows && r < kFrameHeight - kActionBandRows && pixel(frame, r, c) == entity_color(e)) {
          col = std::min(col, c);
        }
      }
    }
    first_col.push_back(col);
  }
  EXPECT_LT(first_col[0], first_col[1]);
  EXPECT_LT(first_col[1], first_col[2]);
}

TEST(Render, PalettesAreDistinctWithinEachKind) {
  const auto& lex = default_lexicon();
  std::set<Rgb> ent, bg, emo, act;
  for (const auto& e : lex.entities) ent.insert(entity_color(e));
  for (const auto& b : lex.backgrounds) bg.insert(background_color(b));
  for (const auto& e : lex.emotions) emo.insert(emotion_color(e));
  for (const auto& a : lex.actions) act.insert(action_color(a));
  EXPECT_EQ(ent.size(), lex.entities.size());
  EXPECT_EQ(bg.size(), lex.backgrounds.size());
  EXPECT_EQ(emo.size(), lex.emotions.size());
  EXPECT_EQ(act.size(), lex.actions.size());
  for (const auto& c : ent) EXPECT_EQ(bg.count(c), 0u);
}

TEST(Render, RejectsUnknownNamesAndEmptyScenes) {
  EXPECT_THROW(render_frame(scene({}, "ran", "happy")), ValidationError);
  EXPECT_THROW(render_frame(scene({"zebra"}, "ran", "happy")), ValidationError);
  EXPECT_THROW(render_frame(scene({"fox"}, "flew away", "happy")), ValidationError);
  EXPECT_THROW(render_frame(scene({"fox"}, "ran", "giddy")), ValidationError);
  EXPECT_THROW(render_frame(scene({"fox"}, "ran", "happy", "moon")), ValidationError);
}

TEST(Narrative, SentenceShape) {
  EXPECT_EQ(narrative_sentence(scene({"fox", "owl"}, "ran", "happy")), "fox and owl ran feeling happy.");
  const auto parts = split_sentences("fox ran feeling happy. owl slept feeling sad.");
  ASSERT_EQ(parts.size(), 2u);
  EXPECT_EQ(parts[1], "owl slept feeling sad.");
}

TEST(Corpus, DeterministicAndValid) {
  const auto a = generate_synthetic_corpus(5, 30, {2, 4});
  const auto b = generate_synthetic_corpus(5, 30, {2, 4});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, generate_synthetic_corpus(6, 30, {2, 4}));
  EXPECT_NO_THROW(validate_corpus(a));
  for (const auto& s : a.stories) {
    EXPECT_GE(s.frames.size(), 2u);
    EXPECT_LE(s.frames.size(), 4u);
    EXPECT_EQ(split_sentences(s.narrative).size(), s.frames.size());
  }
}

TEST(Corpus, EveryEntityAppearsOnceCorpusIsLargeEnough) {
  const auto corpus = generate_synthetic_corpus(1, 16, {});
  std::set<std::string> seen;
  for (const auto& s : corpus.stories) seen.insert(s.entities.begin(), s.entities.end());
  EXPECT_EQ(seen.size(), default_lexicon().entities.size());
}

TEST(Corpus, RejectsBadArguments) {
  EXPECT_THROW(generate_synthetic_corpus(1, 0, {}), ValidationError);
  EXPECT_THROW(generate_synthetic_corpus(1, 3, {1, 3}), ValidationError);
  EXPECT_THROW(generate_synthetic_corpus(1, 3, {4, 3}), ValidationError);
  EXPECT_THROW(generate_synthetic_corpus(1, 3, {2, 6}), ValidationError);
}

TEST(Corpus, ValidationNamesStoryAndField) {
  auto corpus = generate_synthetic_corpus(2, 3, {});
  corpus.stories[2].narrative += " fox ran feeling happy.";
  try {
    validate_corpus(corpus);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("narrative"), std::string::npos);
  }
  corpus = generate_synthetic_corpus(2, 3, {});
  corpus.stories[0].actions[0] = corpus.stories[0].frames[0].scene.action == "slept" ? "ran" : "slept";
  EXPECT_THROW(validate_corpus(corpus), ValidationError);
}

TEST(Corpus, SaveLoadRoundTrip) {
  const auto dir = vstory::testing::scratch_dir("corpus");
  const auto corpus = generate_synthetic_corpus(9, 6, {});
  save_corpus(corpus, dir / "c.json");
  EXPECT_EQ(load_corpus(dir / "c.json"), corpus);
  save_corpus(corpus, dir / "d.json");
  EXPECT_EQ(read_file(dir / "c.json"), read_file(dir / "d.json"));
  EXPECT_THROW(load_corpus(dir / "missing.json"), Error);
  write_file_atomic(dir / "bad.json", "{\"stories\": 3}");
  EXPECT_THROW(load_corpus(dir / "bad.json"), Error);
  std::filesystem::remove_all(dir);
}

TEST(Corpus, SplitIsDisjointAndDeterministic) {
  const auto corpus = generate_synthetic_corpus(7, 80, {});
  const auto s = split_corpus(corpus, {0.8, 0.2, 0.0}, 7);
  EXPECT_EQ(s.train.stories.size(), 64u);
  EXPECT_EQ(s.val.stories.size(), 16u);
  EXPECT_TRUE(s.test.stories.empty());
  std::set<std::string> ids;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (const auto& st : part->stories) EXPECT_TRUE(ids.insert(st.id).second);
  }
  EXPECT_EQ(ids.size(), 80u);
  const auto again = split_corpus(corpus, {0.8, 0.2, 0.0}, 7);
  EXPECT_EQ(again.val, s.val);
  EXPECT_THROW(split_corpus(corpus, {0.5, 0.2, 0.2}, 1), ValidationError);
}
