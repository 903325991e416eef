#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "vstory/error.hpp"
#include "vstory/model.hpp"
#include "vstory/tasks.hpp"

using namespace vstory;

namespace {

ModelParams<double> noisy_micro(std::uint64_t seed, bool cross = true) {
  auto config = ModelConfig::micro();
  config.cross_attention = cross;
  auto p = init_params<double>(config, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0.0, 0.5);
  for (auto& v : p.values) v += n(rng);
  return p;
}

std::vector<ImageFrame> frames_for(std::uint64_t seed, int n) {
  const auto corpus = generate_synthetic_corpus(seed, 1, {kMaxFrames, kMaxFrames});
  return {corpus.stories[0].frames.begin(), corpus.stories[0].frames.begin() + n};
}

}  // namespace

TEST(Layout, BlocksTileTheParameterVector) {
  for (const bool cross : {true, false}) {
    auto config = ModelConfig::desk(60);
    config.cross_attention = cross;
    const ParamLayout layout(config);
    std::size_t offset = 0;
    for (const auto& b : layout.blocks) {
      EXPECT_EQ(b.offset, offset) << b.name;
      EXPECT_EQ(b.size, static_cast<std::size_t>(std::accumulate(b.shape.begin(), b.shape.end(), 1,
                                                                 std::multiplies<int>())));
      offset += b.size;
    }
    EXPECT_EQ(offset, layout.total);
    bool has_cross = false;
    for (const auto& b : layout.blocks) has_cross |= b.name.find("cross_attn") != std::string::npos;
    EXPECT_EQ(has_cross, cross);
  }
}

TEST(Layout, ConfigValidation) {
  auto c = ModelConfig::micro();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::micro();
  c.vocab_size = kNumSpecials;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Init, BiasesZeroGainsOneDeterministic) {
  const auto config = ModelConfig::desk(50);
  const auto a = init_params<float>(config, 3);
  EXPECT_EQ(a.values, init_params<float>(config, 3).values);
  EXPECT_NE(a.values, init_params<float>(config, 4).values);
  for (const auto& b : a.layout().blocks) {
    const auto span = a.block(b.name);
    const bool bias = b.name.ends_with(".bias");
    const bool gain = b.name.ends_with(".gain");
    if (!bias && !gain) continue;
    for (const float v : span) EXPECT_EQ(v, gain ? 1.0f : 0.0f) << b.name;
  }
}

TEST(Init, ConvertRoundTripIsExact) {
  const auto f = init_params<float>(ModelConfig::micro(), 1);
  EXPECT_EQ(convert_params<float>(convert_params<double>(f)).values, f.values);
}

TEST(CheckFinite, NamesTheTensor) {
  auto p = init_params<double>(ModelConfig::micro(), 1);
  p.block("final_ln.bias")[0] = std::nan("");
  try {
    p.check_finite();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("final_ln.bias"), std::string::npos);
  }
}

TEST(Score, TotalIsSumAndDistributionNormalized) {
  const auto p = noisy_micro(1);
  const auto frames = frames_for(1, 2);
  const std::vector<TokenId> prompt = {4, 1};
  const std::vector<TokenId> target = {3, 4, kEos};
  const auto s = score_tokens(p, frames, prompt, target);
  ASSERT_EQ(s.token_logprobs.size(), target.size());
  EXPECT_NEAR(s.total, std::accumulate(s.token_logprobs.begin(), s.token_logprobs.end(), 0.0), 1e-12);
  for (const bool masked : {false, true}) {
    const auto dist = next_token_distribution(p, frames, prompt, std::vector<TokenId>{3}, masked);
    EXPECT_NEAR(std::accumulate(dist.begin(), dist.end(), 0.0), 1.0, 1e-12);
    if (masked) EXPECT_EQ(dist[kPad], 0.0);
    EXPECT_NEAR(std::log(dist[4]), score_tokens(p, frames, prompt, target, ScoreOptions{masked}).token_logprobs[1],
                1e-12);
  }
}

TEST(Score, CausalityAndVisualConditioning) {
  const auto p = noisy_micro(2);
  const auto frames = frames_for(2, 3);
  const std::vector<TokenId> prompt = {4};
  const auto a = score_tokens(p, frames, prompt, std::vector<TokenId>{1, 4, 3});
  const auto b = score_tokens(p, frames, prompt, std::vector<TokenId>{1, 4, 2});
  EXPECT_EQ(a.token_logprobs[0], b.token_logprobs[0]);
  EXPECT_EQ(a.token_logprobs[1], b.token_logprobs[1]);
  const auto other = frames_for(77, 3);
  const auto c = score_tokens(p, other, prompt, std::vector<TokenId>{1, 4, 3});
  EXPECT_NE(a.token_logprobs[0], c.token_logprobs[0]);

  const auto pooled = noisy_micro(2, false);
  const auto d = score_tokens(pooled, frames, prompt, std::vector<TokenId>{1, 4, 3});
  const auto e = score_tokens(pooled, other, prompt, std::vector<TokenId>{1, 4, 3});
  EXPECT_NE(d.token_logprobs[0], e.token_logprobs[0]);
}

TEST(Score, TemperatureScalesLogOdds) {
  const auto p = noisy_micro(3);
  const auto frames = frames_for(3, 2);
  const std::vector<TokenId> prompt = {2, 4};
  const auto base = next_token_distribution(p, frames, prompt, {}, true, 1.0);
  const auto hot = next_token_distribution(p, frames, prompt, {}, true, 2.5);
  for (int i = 2; i < 5; ++i) {
    EXPECT_NEAR(std::log(hot[i] / hot[1]), std::log(base[i] / base[1]) / 2.5, 1e-10);
  }
}

TEST(Score, RejectsOverlongAndBadInput) {
  const auto p = noisy_micro(4);
  const auto frames = frames_for(4, 2);
  const std::vector<TokenId> prompt(10, 4);
  std::vector<TokenId> target(static_cast<std::size_t>(p.config.max_seq - 10), 4);
  EXPECT_NO_THROW(score_tokens(p, frames, prompt, std::span(target).first(target.size() - 1)));
  EXPECT_THROW(score_tokens(p, frames, prompt, target), ValidationError);
  EXPECT_THROW(score_tokens(p, frames, prompt, std::vector<TokenId>{}), ValidationError);
  EXPECT_THROW(score_tokens(p, frames, prompt, std::vector<TokenId>{5}), ValidationError);
  EXPECT_THROW(score_tokens(p, std::vector<ImageFrame>{}, prompt, std::vector<TokenId>{4}), ValidationError);
  EXPECT_THROW(score_tokens(p, std::vector<ImageFrame>(6, frames[0]), prompt, std::vector<TokenId>{4}), ValidationError);
}

TEST(Generate, ZeroParamsGreedyPicksLowestNonPadId) {
  const ModelParams<float> zero(ModelConfig::micro());
  DecodeConfig d;
  d.max_len = 6;
  std::mt19937_64 rng(0);
  const auto out = generate(zero, nullptr, frames_for(1, 2), std::vector<TokenId>{4}, d, rng);
  EXPECT_EQ(out.token_ids, std::vector<TokenId>(6, 1));
  for (const double lp : out.per_token_logprobs) EXPECT_NEAR(lp, std::log(1.0 / 4.0), 1e-6);
}

TEST(Generate, LogprobsMatchTeacherForcedMaskedScore) {
  const auto p = convert_params<float>(noisy_micro(5));
  const auto frames = frames_for(5, 2);
  const std::vector<TokenId> prompt = {4, 3};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    DecodeConfig d;
    d.mode = DecodeMode::kSample;
    d.max_len = 8;
    std::mt19937_64 rng(seed);
    const auto out = generate(p, nullptr, frames, prompt, d, rng);
    const auto s = score_tokens(p, frames, prompt, out.token_ids, ScoreOptions{true});
    ASSERT_EQ(s.token_logprobs.size(), out.per_token_logprobs.size());
    for (std::size_t i = 0; i < s.token_logprobs.size(); ++i) {
      EXPECT_EQ(s.token_logprobs[i], static_cast<float>(out.per_token_logprobs[i]));
    }
    EXPECT_TRUE(out.token_ids.size() == 8u || out.token_ids.back() == kEos);
    for (const auto t : out.token_ids) EXPECT_NE(t, kPad);
  }
}

TEST(Generate, SeededSamplingIsReproducible) {
  const auto vocab = build_vocab(default_lexicon());
  Model<float> m{vocab, init_params<float>(ModelConfig::desk(vocab.size()), 9)};
  const auto frames = frames_for(9, 3);
  DecodeConfig d;
  d.mode = DecodeMode::kSample;
  d.seed = 42;
  d.max_len = 12;
  EXPECT_EQ(generate(m, frames, story_prompt(), d).token_ids, generate(m, frames, story_prompt(), d).token_ids);
  d.seed = 43;
  const auto other = generate(m, frames, story_prompt(), d);
  d.seed = 42;
  EXPECT_NE(generate(m, frames, story_prompt(), d).token_ids, other.token_ids);
}

TEST(Generate, DecodeConfigValidation) {
  DecodeConfig d;
  d.max_len = 0;
  EXPECT_THROW(d.validate(), ConfigError);
  d.max_len = 65;
  EXPECT_THROW(d.validate(), ConfigError);
  d.max_len = 8;
  d.temperature = 0;
  EXPECT_THROW(d.validate(), ConfigError);
  const ModelParams<float> zero(ModelConfig::micro());
  DecodeConfig ok;
  ok.max_len = 64;
  std::mt19937_64 rng(0);
  const std::vector<TokenId> long_prompt(40, 4);
  EXPECT_THROW(generate(zero, nullptr, frames_for(1, 2), long_prompt, ok, rng), ConfigError);
}

TEST(LogProb, MatchesScoreWithEos) {
  const auto vocab = build_vocab(default_lexicon());
  Model<double> m{vocab, init_params<double>(ModelConfig::desk(vocab.size()), 2)};
  const auto frames = frames_for(2, 2);
  const std::string text = "fox ran feeling happy.";
  auto target = vocab.tokenize(text);
  target.push_back(kEos);
  const auto expected = score_tokens(m.params, frames, vocab.tokenize(story_prompt()), target).total;
  EXPECT_DOUBLE_EQ(log_prob(m, frames, story_prompt(), text), expected);
  EXPECT_THROW(log_prob(m, frames, story_prompt(), "fox ran zebra"), VocabError);
}
