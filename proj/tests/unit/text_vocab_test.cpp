#include <gtest/gtest.h>

#include "vstory/error.hpp"
#include "vstory/tasks.hpp"
#include "vstory/text.hpp"
#include "vstory/vocab.hpp"

using namespace vstory;

TEST(Text, SplitsPunctuationAndLowercases) {
  EXPECT_EQ(split_words("Fox ran.  Owl"), (std::vector<std::string>{"fox", "ran", ".", "owl"}));
  EXPECT_EQ(split_words("a,b"), (std::vector<std::string>{"a", ",", "b"}));
  EXPECT_TRUE(split_words("   ").empty());
}

TEST(Text, JoinIsInverseOnNormalizedText) {
  const std::string text = "fox and owl ran feeling happy. owl slept feeling sad.";
  EXPECT_EQ(join_words(split_words(text)), text);
  EXPECT_EQ(normalize_text(" Fox   RAN . "), "fox ran.");
}

TEST(Vocab, SpecialsComeFirst) {
  const Vocab v({"fox", "owl"});
  EXPECT_EQ(v.size(), kNumSpecials + 2);
  EXPECT_EQ(v.token(kPad), "<pad>");
  EXPECT_EQ(v.token(kEos), "<eos>");
  EXPECT_EQ(v.id("fox"), kNumSpecials);
  EXPECT_EQ(v.id("owl"), kNumSpecials + 1);
}

TEST(Vocab, RejectsDuplicatesAndSpecialNames) {
  EXPECT_THROW(Vocab({"fox", "fox"}), VocabError);
  EXPECT_THROW(Vocab({"<eos>"}), VocabError);
  std::vector<std::string> many;
  for (int i = 0; i < kMaxVocab; ++i) many.push_back("w" + std::to_string(i));
  EXPECT_THROW(Vocab{many}, VocabError);
}

TEST(Vocab, UnknownWordNamesTheWord) {
  const Vocab v({"fox"});
  try {
    v.tokenize("fox zebra");
    FAIL() << "expected VocabError";
  } catch (const VocabError& e) {
    EXPECT_NE(std::string(e.what()).find("zebra"), std::string::npos);
  }
}

TEST(Vocab, RoundTripsEveryNarrativeWord) {
  const auto vocab = build_vocab(default_lexicon());
  const auto corpus = generate_synthetic_corpus(3, 20, {});
  for (const auto& s : corpus.stories) {
    EXPECT_EQ(vocab.detokenize(vocab.tokenize(s.narrative)), s.narrative);
    for (const auto& c : s.captions) EXPECT_EQ(vocab.detokenize(vocab.tokenize(c)), c);
  }
}

TEST(Vocab, CoversEveryInstruction) {
  const auto vocab = build_vocab(default_lexicon());
  for (const auto kind : kAllTaskKinds) EXPECT_NO_THROW(vocab.tokenize(instruction_prefix(kind)));
  EXPECT_NO_THROW(vocab.tokenize(story_prompt()));
  EXPECT_NO_THROW(vocab.tokenize(kBarePrompt));
  EXPECT_LE(vocab.size(), kMaxVocab);
}

TEST(Vocab, DetokenizeRendersSpecials) {
  const Vocab v({"fox"});
  const std::vector<TokenId> ids = {kNumSpecials, kEos};
  EXPECT_EQ(v.detokenize(ids), "fox <eos>");
}
