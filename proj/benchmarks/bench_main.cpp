#include <benchmark/benchmark.h>

#include "vstory/corpus.hpp"
#include "vstory/judge.hpp"
#include "vstory/model.hpp"
#include "vstory/tasks.hpp"
#include "vstory/training.hpp"

using namespace vstory;

namespace {

struct Fixture {
  Corpus corpus = generate_synthetic_corpus(1, 16, {});
  Vocab vocab = build_vocab(corpus.lexicon);
  TrainConfig config = TrainConfig::desk();
  ModelParams<float> params = init_params<float>(config.model_config(vocab.size()), 1);
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_EncodeImages(benchmark::State& state) {
  const auto& f = fixture();
  const auto& frames = f.corpus.stories[0].frames;
  for (auto _ : state) benchmark::DoNotOptimize(encode_images(f.params, frames));
}
BENCHMARK(BM_EncodeImages);

void BM_ScoreForward(benchmark::State& state) {
  const auto& f = fixture();
  const auto& s = f.corpus.stories[0];
  const auto prompt = f.vocab.tokenize(story_prompt());
  auto target = f.vocab.tokenize(s.narrative);
  target.push_back(kEos);
  for (auto _ : state) benchmark::DoNotOptimize(score_tokens(f.params, s.frames, prompt, target).total);
}
BENCHMARK(BM_ScoreForward);

void BM_ScoreForwardBackward(benchmark::State& state) {
  const auto& f = fixture();
  const auto& s = f.corpus.stories[0];
  const auto prompt = f.vocab.tokenize(story_prompt());
  auto target = f.vocab.tokenize(s.narrative);
  target.push_back(kEos);
  ModelParams<float> grad(f.params.config);
  for (auto _ : state) benchmark::DoNotOptimize(score_tokens(f.params, s.frames, prompt, target, {}, &grad).total);
}
BENCHMARK(BM_ScoreForwardBackward);

void BM_NllBatch(benchmark::State& state) {
  const auto& f = fixture();
  const auto batch = sft_batch_for_step(f.corpus, f.config, 0);
  for (auto _ : state) benchmark::DoNotOptimize(nll_loss(f.params, f.vocab, std::span<const InstructionExample>(batch)).loss);
}
BENCHMARK(BM_NllBatch)->Unit(benchmark::kMillisecond);

void BM_GenerateGreedy(benchmark::State& state) {
  const auto& f = fixture();
  const Model<float> model{f.vocab, f.params};
  DecodeConfig d;
  d.max_len = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(generate(model, f.corpus.stories[0].frames, story_prompt(), d).text);
}
BENCHMARK(BM_GenerateGreedy)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_RubricJudge(benchmark::State& state) {
  const auto& f = fixture();
  const auto& s = f.corpus.stories[3];
  for (auto _ : state) benchmark::DoNotOptimize(score_story_rubric(s.narrative, s).overall);
}
BENCHMARK(BM_RubricJudge);

}  // namespace

BENCHMARK_MAIN();
