#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "vstory/error.hpp"
#include "vstory/manifest.hpp"
#include "vstory/training.hpp"

using namespace vstory;

namespace {

// Micro setup: V = 5 means a single word besides the specials.
struct Micro {
  Vocab vocab{std::vector<std::string>{"fox"}};
  Corpus corpus = generate_synthetic_corpus(3, 2, {2, 2});
  ModelParams<double> params;

  Micro() {
    params = init_params<double>(ModelConfig::micro(), 5);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 0.4);
    for (auto& v : params.values) v += n(rng);
  }

  std::vector<InstructionExample> sft() const {
    return {{TaskKind::kCaption, "fox", {corpus.stories[0].frames[0]}, "fox fox", "a", 0},
            {TaskKind::kCaption, "fox fox", corpus.stories[1].frames, "fox", "b", 0}};
  }
  std::vector<RlInput> rl() const { return {{&corpus.stories[0], "fox"}, {&corpus.stories[1], "fox fox"}}; }
};

TrainConfig micro_config() {
  TrainConfig c;
  c.lr = 1e-2;
  c.rl_max_len = 3;
  c.rl_samples_per_input = 3;
  return c;
}

// Reward depends on the sample so advantages are non-trivial.
class LengthJudge final : public Judge {
 public:
  JudgeScore score_story(const std::string& generated, const VisualStory&) const override {
    const double v = std::min(10.0, 2.0 * static_cast<double>(generated.size() % 6));
    return {v, v, v, v, v, v, v, v};
  }
  std::string kind() const override { return "length"; }
};

}  // namespace

TEST(Config, JsonRoundTripAndStrictKeys) {
  TrainConfig c;
  c.lambda = 0.25;
  c.sft_steps = 7;
  c.seed = 99;
  c.instruction_tuning = false;
  EXPECT_EQ(train_config_from_json(train_config_to_json(c)), c);
  EXPECT_EQ(train_config_from_json("{}"), TrainConfig{});
  EXPECT_THROW(train_config_from_json(R"({"lamda": 1})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"lr": "fast"})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"lr": -1})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"rl_max_len": 65})"), ConfigError);
  EXPECT_THROW(train_config_from_json("[1]"), ConfigError);
  EXPECT_THROW(train_config_from_json("{"), ConfigError);
}

TEST(Config, KeysMirrorFieldNames) {
  const auto j = nlohmann::json::parse(train_config_to_json(TrainConfig{}));
  for (const char* key : {"lambda", "lr", "adam_betas", "adam_eps", "batch_size", "sft_steps", "rl_steps",
                          "rl_samples_per_input", "baseline_decay", "grad_clip_norm", "seed"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
}

TEST(Config, DeskFileMatchesNamedSchedule) {
  const auto text = read_file(std::filesystem::path(VSTORY_SOURCE_DIR) / "configs" / "desk.json");
  EXPECT_EQ(train_config_from_json(text), TrainConfig::desk());
}

TEST(Arms, KeepTotalStepsAndChangeOneThing) {
  TrainConfig base;
  base.sft_steps = 30;
  base.rl_steps = 10;
  for (const auto arm : kAllArms) {
    const auto c = apply_arm(base, arm);
    EXPECT_EQ(c.sft_steps + c.rl_steps, 40) << to_string(arm);
    EXPECT_EQ(arm_from_string(to_string(arm)), arm);
  }
  EXPECT_EQ(apply_arm(base, Arm::kFull), base);
  EXPECT_FALSE(apply_arm(base, Arm::kNoInstructionTuning).instruction_tuning);
  EXPECT_EQ(apply_arm(base, Arm::kNoReinforcementLearning).rl_steps, 0);
  EXPECT_FALSE(apply_arm(base, Arm::kNoLearnedModules).cross_attention);
  EXPECT_EQ(arm_label(Arm::kNoReinforcementLearning), "w/o Reinforcement Learning");
  EXPECT_THROW(arm_from_string("no_judge"), ConfigError);
}

TEST(Seeds, StreamsAreDistinctAndStable) {
  std::set<std::uint64_t> seen;
  for (const char* stream : {"sft", "rl", "init", "sample"}) {
    for (std::uint64_t i = 0; i < 50; ++i) EXPECT_TRUE(seen.insert(derive_seed(1, stream, i)).second);
  }
  EXPECT_EQ(derive_seed(1, "sft", 3), derive_seed(1, "sft", 3));
  EXPECT_NE(derive_seed(1, "sft", 3), derive_seed(2, "sft", 3));
}

TEST(Nll, MeanPerTokenIncludingEos) {
  const Micro m;
  const auto batch = m.sft();
  const auto r = nll_loss(m.params, m.vocab, std::span(batch));
  double sum = 0;
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    auto target = m.vocab.tokenize(ex.target);
    target.push_back(kEos);
    tokens += target.size();
    sum -= score_tokens(m.params, ex.image_seq, m.vocab.tokenize(ex.instruction), target).total;
  }
  EXPECT_EQ(r.tokens, 5u);
  EXPECT_EQ(tokens, 5u);
  EXPECT_NEAR(r.loss, sum / 5.0, 1e-12);
  EXPECT_THROW(nll_loss(m.params, m.vocab, std::span<const InstructionExample>{}), ValidationError);
}

TEST(Nll, OovNamesTheStory) {
  const Micro m;
  auto batch = m.sft();
  batch[1].target = "owl";
  try {
    nll_loss(m.params, m.vocab, std::span(batch));
    FAIL() << "expected VocabError";
  } catch (const VocabError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
}

TEST(Rl, SurrogateAndGradientMatchPerSampleOracle) {
  const Micro m;
  const auto inputs = m.rl();
  LengthJudge judge;
  RlOptions options;
  options.samples_per_input = 3;
  options.max_len = 3;
  std::mt19937_64 rng(4);
  const double baseline = 0.3;
  const auto r = rl_loss(m.params, m.vocab, std::span(inputs), judge, options, baseline, rng);
  ASSERT_EQ(r.samples.size(), 6u);

  ModelParams<double> expected(m.params.config);
  double surrogate = 0;
  double mean = 0;
  for (const auto& s : r.samples) {
    const auto& in = inputs[s.input];
    EXPECT_DOUBLE_EQ(s.reward, reward(judge.score_story(s.output.text, *in.story)));
    const auto prompt = m.vocab.tokenize(in.instruction);
    const auto score = score_tokens(m.params, in.story->frames, prompt, s.output.token_ids, ScoreOptions{true});
    EXPECT_NEAR(score.total, s.output.total_logprob, 1e-12);
    surrogate -= (s.reward - baseline) * score.total / 6.0;
    mean += s.reward / 6.0;
    score_tokens(m.params, in.story->frames, prompt, s.output.token_ids, ScoreOptions{true}, &expected,
                 -(s.reward - baseline) / 6.0);
  }
  EXPECT_NEAR(r.surrogate, surrogate, 1e-12);
  EXPECT_NEAR(r.mean_reward, mean, 1e-12);
  for (std::size_t i = 0; i < expected.values.size(); ++i) EXPECT_NEAR(r.grad.values[i], expected.values[i], 1e-12);
}

TEST(Rl, ZeroAdvantageGivesZeroGradient) {
  const Micro m;
  const auto inputs = m.rl();
  ConstantJudge judge(6.0);
  std::mt19937_64 rng(1);
  const auto r = rl_loss(m.params, m.vocab, std::span(inputs), judge, RlOptions{}, 0.6, rng);
  for (const double g : r.grad.values) EXPECT_EQ(g, 0.0);
  EXPECT_DOUBLE_EQ(r.mean_reward, 0.6);
}

TEST(Step, CombinedIsNllPlusLambdaRl) {
  const Micro m;
  const auto sft = m.sft();
  const auto rl = m.rl();
  LengthJudge judge;
  auto config = micro_config();
  config.lambda = 0.7;
  std::mt19937_64 a(11), b(11);
  const auto g = step_gradients(m.params, m.vocab, std::span(sft), std::span(rl), judge, config, 0.2, a);
  ASSERT_TRUE(g.nll && g.rl);
  RlOptions options;
  options.samples_per_input = config.rl_samples_per_input;
  options.max_len = config.rl_max_len;
  const auto nll = nll_loss(m.params, m.vocab, std::span(sft));
  const auto rlr = rl_loss(m.params, m.vocab, std::span(rl), judge, options, 0.2, b);
  for (std::size_t i = 0; i < g.total.values.size(); ++i) {
    EXPECT_NEAR(g.total.values[i], nll.grad.values[i] + 0.7 * rlr.grad.values[i], 1e-12);
  }
}

TEST(Step, LambdaZeroIsBitIdenticalToSftAndConsumesNoRandomness) {
  const Micro m;
  const auto sft = m.sft();
  const auto rl = m.rl();
  LengthJudge judge;
  auto config = micro_config();
  config.lambda = 0;
  auto with_rl = make_train_state(m.params, 5);
  auto without = make_train_state(m.params, 5);
  for (int i = 0; i < 3; ++i) {
    const auto s1 = combined_step(with_rl, m.vocab, std::span(sft), std::span(rl), judge, config);
    const auto s2 = combined_step(without, m.vocab, std::span(sft), std::span<const RlInput>{}, judge, config);
    EXPECT_FALSE(s1.mean_reward.has_value());
    EXPECT_EQ(s1.nll, s2.nll);
  }
  EXPECT_EQ(with_rl.params.values, without.params.values);
  EXPECT_EQ(with_rl.adam_m, without.adam_m);
  EXPECT_EQ(with_rl.rng, without.rng);
  EXPECT_EQ(with_rl.reward_baseline, 0.0);
}

TEST(Step, BaselineIsExponentialMovingAverage) {
  const Micro m;
  const auto rl = m.rl();
  ConstantJudge judge(7.0);
  auto config = micro_config();
  config.lambda = 1.0;
  config.baseline_decay = 0.9;
  auto state = make_train_state(m.params, 2);
  for (int t = 1; t <= 5; ++t) {
    const auto s = combined_step(state, m.vocab, std::span<const InstructionExample>{}, std::span(rl), judge, config);
    const double expected = 0.7 * (1.0 - std::pow(0.9, t));
    EXPECT_NEAR(state.reward_baseline, expected, 1e-12);
    EXPECT_NEAR(s.baseline, expected, 1e-12);
    EXPECT_NEAR(*s.mean_reward, 0.7, 1e-12);
  }
}

TEST(Optimizer, AdamMatchesScalarOracle) {
  ModelParams<double> p(ModelConfig::micro());
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : p.values) v = n(rng);
  auto state = make_train_state(p, 0);
  TrainConfig config;
  config.lr = 0.01;
  config.adam_betas = {0.8, 0.95};
  config.adam_eps = 1e-6;

  const std::size_t idx[] = {0, 17, p.values.size() - 1};
  std::vector<double> theta, m1(3, 0.0), m2(3, 0.0);
  for (const auto i : idx) theta.push_back(p.values[i]);
  for (int t = 1; t <= 4; ++t) {
    ModelParams<double> grad(p.config);
    for (auto& g : grad.values) g = n(rng);
    adam_update(state, grad, config);
    state.step += 1;
    for (int k = 0; k < 3; ++k) {
      const double g = grad.values[idx[k]];
      m1[k] = 0.8 * m1[k] + 0.2 * g;
      m2[k] = 0.95 * m2[k] + 0.05 * g * g;
      const double mhat = m1[k] / (1 - std::pow(0.8, t));
      const double vhat = m2[k] / (1 - std::pow(0.95, t));
      theta[k] -= 0.01 * mhat / (std::sqrt(vhat) + 1e-6);
      EXPECT_NEAR(state.params.values[idx[k]], theta[k], 1e-14);
    }
  }
}

TEST(Optimizer, ClipScalesToMaxNorm) {
  ModelParams<double> g(ModelConfig::micro());
  g.values.assign(g.values.size(), 0.0);
  g.values[0] = 3;
  g.values[1] = 4;
  auto small = g;
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g.values[0], 0.6, 1e-15);
  EXPECT_NEAR(g.values[1], 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(clip_global_norm(small, 10.0), 5.0);
  EXPECT_EQ(small.values[0], 3.0);
}

TEST(Step, NonFiniteGradientRaisesNumericError) {
  Micro m;
  m.params.block("output.bias")[1] = std::numeric_limits<double>::infinity();
  auto state = make_train_state(m.params, 0);
  const auto sft = m.sft();
  ConstantJudge judge(5);
  EXPECT_THROW(combined_step(state, m.vocab, std::span(sft), std::span<const RlInput>{}, judge, micro_config()),
               NumericError);
}

TEST(Metrics, JsonlRoundTripWithNulls) {
  std::vector<MetricsRecord> records = {{0, "sft", 2.5, std::nullopt, std::nullopt, 0, 1.5, 0},
                                        {1, "rl", 2.25, -0.125, 0.5, 0.05, 0.75, 12}};
  const auto text = metrics_to_jsonl(records);
  EXPECT_NE(text.find("\"rl_surrogate\":null"), std::string::npos);
  EXPECT_EQ(metrics_from_jsonl(text), records);
  EXPECT_THROW(metrics_from_jsonl("{\"step\": 1}\n"), ValidationError);
}

TEST(Schedule, BatchesAreDeterministicAndShaped) {
  const auto corpus = generate_synthetic_corpus(4, 12, {});
  TrainConfig c;
  c.batch_size = 8;
  c.rl_samples_per_input = 4;
  EXPECT_EQ(sft_batch_for_step(corpus, c, 3), sft_batch_for_step(corpus, c, 3));
  EXPECT_NE(sft_batch_for_step(corpus, c, 3), sft_batch_for_step(corpus, c, 4));
  EXPECT_EQ(sft_batch_for_step(corpus, c, 3).size(), 8u);
  const auto rl = rl_batch_for_step(corpus, c, 0);
  ASSERT_EQ(rl.size(), 2u);
  EXPECT_EQ(rl[0].instruction, story_prompt());

  c.instruction_tuning = false;
  for (const auto& ex : sft_batch_for_step(corpus, c, 0)) {
    EXPECT_EQ(ex.instruction, kBarePrompt);
    EXPECT_EQ(ex.image_seq.size(), split_sentences(ex.target).size());
  }
  EXPECT_EQ(rl_batch_for_step(corpus, c, 0)[0].instruction, kBarePrompt);
}

TEST(Train, LossDecreasesOverTwoHundredSteps) {
  const auto corpus = generate_synthetic_corpus(12, 6, {2, 3});
  TrainConfig c;
  c.lr = 2e-3;
  c.sft_steps = 200;
  c.batch_size = 8;
  c.d_model = 32;
  c.d_ff = 64;
  c.seed = 3;
  RubricJudge judge;
  const auto r = train(corpus, c, judge);
  ASSERT_EQ(r.metrics.size(), 200u);
  // Least-squares slope of the loss curve.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& m : r.metrics) {
    const double x = static_cast<double>(m.step);
    sx += x;
    sy += m.nll;
    sxx += x * x;
    sxy += x * m.nll;
  }
  const double n = 200;
  EXPECT_LT((n * sxy - sx * sy) / (n * sxx - sx * sx), 0.0);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += r.metrics[static_cast<std::size_t>(i)].nll / 20;
    last += r.metrics[static_cast<std::size_t>(180 + i)].nll / 20;
  }
  EXPECT_LT(last, 0.5 * first);
  for (const auto& m : r.metrics) {
    EXPECT_EQ(m.phase, "sft");
    EXPECT_FALSE(m.mean_reward.has_value());
    EXPECT_EQ(m.wallclock_ms, 0.0);
  }
}

TEST(Train, PhasesAndReproducibility) {
  const auto corpus = generate_synthetic_corpus(12, 4, {2, 2});
  TrainConfig c;
  c.lr = 1e-3;
  c.sft_steps = 3;
  c.rl_steps = 2;
  c.batch_size = 4;
  c.rl_max_len = 12;
  c.d_model = 16;
  c.d_ff = 32;
  c.seed = 5;
  RubricJudge judge;
  const auto a = train(corpus, c, judge);
  const auto b = train(corpus, c, judge);
  EXPECT_EQ(a.metrics, b.metrics);
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  ASSERT_EQ(a.metrics.size(), 5u);
  EXPECT_EQ(a.metrics[2].phase, "sft");
  EXPECT_EQ(a.metrics[3].phase, "rl");
  EXPECT_TRUE(a.metrics[4].mean_reward.has_value());
  EXPECT_EQ(a.checkpoint.step, 5u);
  EXPECT_EQ(a.checkpoint.reward_baseline, a.metrics.back().baseline);
  std::mt19937_64 restored;
  std::istringstream(a.checkpoint.rng_state) >> restored;
  EXPECT_NE(restored, std::mt19937_64(derive_seed(5, "sample")));
}

TEST(Train, ErrorsNameTheStep) {
  const auto corpus = generate_synthetic_corpus(12, 2, {2, 2});
  TrainConfig c;
  c.sft_steps = 1;
  c.rl_steps = 1;
  c.batch_size = 2;
  c.rl_samples_per_input = 1;
  c.d_model = 16;
  c.d_ff = 32;
  class Broken final : public Judge {
   public:
    JudgeScore score_story(const std::string&, const VisualStory&) const override { throw JudgeError("offline"); }
    std::string kind() const override { return "broken"; }
  } judge;
  try {
    train(corpus, c, judge);
    FAIL() << "expected a judge error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), "judge");
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}
