#include "vstory/training.hpp"

#include <chrono>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "vstory/error.hpp"
#include "vstory/manifest.hpp"

namespace vstory {
namespace {

using json = nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename T>
void add_scaled(ModelParams<T>& dst, const ModelParams<T>& src, T scale) {
  for (std::size_t i = 0; i < dst.values.size(); ++i) dst.values[i] += scale * src.values[i];
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

// ---- config -----------------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (!(lambda >= 0) || !std::isfinite(lambda)) fail("lambda must be a finite non-negative number");
  if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be positive");
  for (const double b : adam_betas) {
    if (!(b >= 0 && b < 1)) fail("adam_betas must lie in [0,1)");
  }
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (sft_steps < 0 || rl_steps < 0) fail("sft_steps and rl_steps must be non-negative");
  if (rl_samples_per_input < 1) fail("rl_samples_per_input must be at least 1");
  if (!(baseline_decay >= 0 && baseline_decay < 1)) fail("baseline_decay must lie in [0,1)");
  if (!(grad_clip_norm > 0) || !std::isfinite(grad_clip_norm)) fail("grad_clip_norm must be positive");
  if (rl_max_len < 1 || rl_max_len > 64) fail("rl_max_len must be in [1, 64]");
  parse_task_weights(task_weights);
  model_config(kNumSpecials + 1).validate();
}

std::string narrative_prompt(const TrainConfig& config) {
  return config.instruction_tuning ? story_prompt() : std::string(kBarePrompt);
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.lr = 2e-3;
  c.sft_steps = 800;
  c.rl_steps = 400;
  return c;
}

ModelConfig TrainConfig::model_config(int vocab_size) const {
  ModelConfig c = ModelConfig::desk(vocab_size);
  c.d_model = d_model;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_ff = d_ff;
  c.cross_attention = cross_attention;
  return c;
}

std::string train_config_to_json(const TrainConfig& c) {
  json j = {{"lambda", c.lambda},
            {"lr", c.lr},
            {"adam_betas", c.adam_betas},
            {"adam_eps", c.adam_eps},
            {"batch_size", c.batch_size},
            {"sft_steps", c.sft_steps},
            {"rl_steps", c.rl_steps},
            {"rl_samples_per_input", c.rl_samples_per_input},
            {"baseline_decay", c.baseline_decay},
            {"grad_clip_norm", c.grad_clip_norm},
            {"seed", c.seed},
            {"task_weights", c.task_weights},
            {"rl_max_len", c.rl_max_len},
            {"instruction_tuning", c.instruction_tuning},
            {"cross_attention", c.cross_attention},
            {"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"d_ff", c.d_ff}};
  return j.dump(2) + "\n";
}

TrainConfig train_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& key = it.key();
    const auto& v = it.value();
    try {
      if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "adam_betas") c.adam_betas = v.get<std::array<double, 2>>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "sft_steps") c.sft_steps = v.get<int>();
      else if (key == "rl_steps") c.rl_steps = v.get<int>();
      else if (key == "rl_samples_per_input") c.rl_samples_per_input = v.get<int>();
      else if (key == "baseline_decay") c.baseline_decay = v.get<double>();
      else if (key == "grad_clip_norm") c.grad_clip_norm = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "task_weights") c.task_weights = v.get<std::string>();
      else if (key == "rl_max_len") c.rl_max_len = v.get<int>();
      else if (key == "instruction_tuning") c.instruction_tuning = v.get<bool>();
      else if (key == "cross_attention") c.cross_attention = v.get<bool>();
      else if (key == "d_model") c.d_model = v.get<int>();
      else if (key == "n_layers") c.n_layers = v.get<int>();
      else if (key == "n_heads") c.n_heads = v.get<int>();
      else if (key == "d_ff") c.d_ff = v.get<int>();
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const json::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  try {
    return train_config_from_json(read_file(path));
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

std::string_view to_string(Arm arm) {
  switch (arm) {
    case Arm::kFull: return "full";
    case Arm::kNoInstructionTuning: return "no_instruction_tuning";
    case Arm::kNoReinforcementLearning: return "no_reinforcement_learning";
    case Arm::kNoLearnedModules: return "no_learned_modules";
  }
  return "full";
}

Arm arm_from_string(std::string_view name) {
  for (const auto arm : kAllArms) {
    if (to_string(arm) == name) return arm;
  }
  throw ConfigError("unknown ablation arm '" + std::string(name) + "'");
}

std::string_view arm_label(Arm arm) {
  switch (arm) {
    case Arm::kFull: return "Full Model";
    case Arm::kNoInstructionTuning: return "w/o Instruction Tuning";
    case Arm::kNoReinforcementLearning: return "w/o Reinforcement Learning";
    case Arm::kNoLearnedModules: return "w/o Learned Modules";
  }
  return "";
}

TrainConfig apply_arm(TrainConfig config, Arm arm) {
  switch (arm) {
    case Arm::kFull: break;
    case Arm::kNoInstructionTuning: config.instruction_tuning = false; break;
    case Arm::kNoReinforcementLearning:
      config.sft_steps += config.rl_steps;
      config.rl_steps = 0;
      break;
    case Arm::kNoLearnedModules: config.cross_attention = false; break;
  }
  return config;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
  std::uint64_t h = splitmix64(seed);
  for (const char ch : stream) h = splitmix64(h ^ static_cast<unsigned char>(ch));
  return splitmix64(h ^ splitmix64(index));
}

// ---- losses -----------------------------------------------------------------------

template <typename T>
TrainState<T> make_train_state(ModelParams<T> params, std::uint64_t rng_seed) {
  TrainState<T> state;
  const auto n = params.values.size();
  state.params = std::move(params);
  state.adam_m.assign(n, T(0));
  state.adam_v.assign(n, T(0));
  state.rng.seed(rng_seed);
  return state;
}

template <typename T>
NllResult<T> nll_loss(const ModelParams<T>& params, const Vocab& vocab, std::span<const InstructionExample> batch) {
  if (batch.empty()) throw ValidationError("nll_loss: empty batch");
  struct Item {
    std::vector<TokenId> prompt, target;
  };
  std::vector<Item> items;
  items.reserve(batch.size());
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    try {
      Item item{vocab.tokenize(ex.instruction), vocab.tokenize(ex.target)};
      item.target.push_back(kEos);
      tokens += item.target.size();
      items.push_back(std::move(item));
    } catch (const Error& e) {
      rethrow_with_context(e, "example from story '" + ex.source_story_id + "': ");
    }
  }
  NllResult<T> result;
  result.tokens = tokens;
  result.grad = ModelParams<T>(params.config);
  const T scale = T(-1) / static_cast<T>(tokens);
  double total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    try {
      const auto s = score_tokens(params, batch[i].image_seq, items[i].prompt, items[i].target, ScoreOptions{},
                                  &result.grad, scale);
      total += static_cast<double>(s.total);
    } catch (const Error& e) {
      rethrow_with_context(e, "example from story '" + batch[i].source_story_id + "': ");
    }
  }
  result.loss = -total / static_cast<double>(tokens);
  if (!std::isfinite(result.loss)) throw NumericError("nll_loss: non-finite loss");
  return result;
}

template <typename T>
RlResult<T> rl_loss(const ModelParams<T>& params, const Vocab& vocab, std::span<const RlInput> inputs,
                    const Judge& judge, const RlOptions& options, double baseline, std::mt19937_64& rng) {
  if (options.temperature != 1.0) throw ConfigError("rl_loss requires temperature 1");
  if (options.samples_per_input < 1) throw ConfigError("rl_samples_per_input must be at least 1");
  if (inputs.empty()) throw ValidationError("rl_loss: empty batch");

  DecodeConfig decode;
  decode.mode = DecodeMode::kSample;
  decode.temperature = 1.0;
  decode.max_len = options.max_len;

  RlResult<T> result;
  std::vector<std::vector<TokenId>> prompts;
  prompts.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.story == nullptr) throw ValidationError("rl_loss: input without a story");
    prompts.push_back(vocab.tokenize(in.instruction));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (int k = 0; k < options.samples_per_input; ++k) {
      result.samples.push_back({i, generate(params, &vocab, inputs[i].story->frames, prompts[i], decode, rng), 0.0});
    }
  }

  std::vector<std::string> texts;
  std::vector<const VisualStory*> refs;
  for (const auto& s : result.samples) {
    texts.push_back(s.output.text);
    refs.push_back(inputs[s.input].story);
  }
  std::vector<JudgeScore> scores;
  try {
    scores = judge.score_batch(texts, refs);
  } catch (const std::exception& e) {
    throw JudgeError(std::string("judge failed during RL scoring: ") + e.what());
  }
  for (std::size_t j = 0; j < scores.size(); ++j) {
    const double r = reward(scores[j]);
    if (!std::isfinite(r)) {
      throw JudgeError("judge returned a non-finite reward for input '" + inputs[result.samples[j].input].story->id + "'");
    }
    result.samples[j].reward = r;
  }

  const auto n = static_cast<double>(result.samples.size());
  result.grad = ModelParams<T>(params.config);
  double reward_sum = 0;
  double surrogate = 0;
  for (const auto& s : result.samples) {
    reward_sum += s.reward;
    const double adv = s.reward - baseline;
    surrogate -= adv * s.output.total_logprob;
    if (adv == 0) continue;
    score_tokens(params, inputs[s.input].story->frames, prompts[s.input], s.output.token_ids, ScoreOptions{true},
                 &result.grad, static_cast<T>(-adv / n));
  }
  result.surrogate = surrogate / n;
  result.mean_reward = reward_sum / n;
  return result;
}

template <typename T>
StepGradients<T> step_gradients(const ModelParams<T>& params, const Vocab& vocab,
                                std::span<const InstructionExample> sft_batch, std::span<const RlInput> rl_batch,
                                const Judge& judge, const TrainConfig& config, double baseline, std::mt19937_64& rng) {
  StepGradients<T> out;
  out.total = ModelParams<T>(params.config);
  if (!sft_batch.empty()) {
    out.nll = nll_loss(params, vocab, sft_batch);
    add_scaled(out.total, out.nll->grad, T(1));
  }
  if (config.lambda > 0 && !rl_batch.empty()) {
    RlOptions options;
    options.samples_per_input = config.rl_samples_per_input;
    options.max_len = config.rl_max_len;
    out.rl = rl_loss(params, vocab, rl_batch, judge, options, baseline, rng);
    add_scaled(out.total, out.rl->grad, static_cast<T>(config.lambda));
  }
  return out;
}

// ---- optimizer --------------------------------------------------------------------

template <typename T>
double clip_global_norm(ModelParams<T>& grad, double max_norm) {
  double sq = 0;
  for (const T g : grad.values) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& g : grad.values) g *= scale;
  }
  return norm;
}

template <typename T>
void adam_update(TrainState<T>& state, const ModelParams<T>& grad, const TrainConfig& config) {
  const double b1 = config.adam_betas[0];
  const double b2 = config.adam_betas[1];
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  auto& theta = state.params.values;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = static_cast<double>(grad.values[i]);
    const double m = b1 * static_cast<double>(state.adam_m[i]) + (1.0 - b1) * g;
    const double v = b2 * static_cast<double>(state.adam_v[i]) + (1.0 - b2) * g * g;
    state.adam_m[i] = static_cast<T>(m);
    state.adam_v[i] = static_cast<T>(v);
    const double mhat = m / c1;
    const double vhat = v / c2;
    theta[i] = static_cast<T>(static_cast<double>(theta[i]) - config.lr * mhat / (std::sqrt(vhat) + config.adam_eps));
  }
}

template <typename T>
StepStats combined_step(TrainState<T>& state, const Vocab& vocab, std::span<const InstructionExample> sft_batch,
                        std::span<const RlInput> rl_batch, const Judge& judge, const TrainConfig& config) {
  config.validate();
  auto grads = step_gradients(state.params, vocab, sft_batch, rl_batch, judge, config, state.reward_baseline, state.rng);
  grads.total.check_finite();

  StepStats stats;
  stats.nll = grads.nll ? grads.nll->loss : 0.0;
  stats.grad_norm = clip_global_norm(grads.total, config.grad_clip_norm);
  adam_update(state, grads.total, config);
  state.params.check_finite();
  state.step += 1;
  if (grads.rl) {
    state.reward_baseline =
        config.baseline_decay * state.reward_baseline + (1.0 - config.baseline_decay) * grads.rl->mean_reward;
    stats.rl_surrogate = grads.rl->surrogate;
    stats.mean_reward = grads.rl->mean_reward;
  }
  stats.baseline = state.reward_baseline;
  return stats;
}

// ---- metrics log ------------------------------------------------------------------

std::string metrics_to_jsonl(std::span<const MetricsRecord> records) {
  std::string out;
  for (const auto& r : records) {
    const json j = {{"step", r.step},
                    {"phase", r.phase},
                    {"nll", r.nll},
                    {"rl_surrogate", optional_number(r.rl_surrogate)},
                    {"mean_reward", optional_number(r.mean_reward)},
                    {"baseline", r.baseline},
                    {"grad_norm", r.grad_norm},
                    {"wallclock_ms", r.wallclock_ms}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<MetricsRecord> metrics_from_jsonl(std::string_view text) {
  std::vector<MetricsRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      MetricsRecord r;
      r.step = j.at("step").get<std::uint64_t>();
      r.phase = j.at("phase").get<std::string>();
      r.nll = j.at("nll").get<double>();
      if (!j.at("rl_surrogate").is_null()) r.rl_surrogate = j.at("rl_surrogate").get<double>();
      if (!j.at("mean_reward").is_null()) r.mean_reward = j.at("mean_reward").get<double>();
      r.baseline = j.at("baseline").get<double>();
      r.grad_norm = j.at("grad_norm").get<double>();
      r.wallclock_ms = j.at("wallclock_ms").get<double>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ValidationError("metrics line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- schedule ---------------------------------------------------------------------

std::vector<InstructionExample> sft_batch_for_step(const Corpus& corpus, const TrainConfig& config, std::uint64_t step) {
  if (corpus.stories.empty()) throw ValidationError("training corpus is empty");
  const auto seed = derive_seed(config.seed, "sft", step);
  const auto n = static_cast<std::size_t>(config.batch_size);
  std::vector<InstructionExample> batch;
  batch.reserve(n);
  if (config.instruction_tuning) {
    for (const auto& ref : sample_task_mixture(corpus, parse_task_weights(config.task_weights), seed, n)) {
      batch.push_back(materialize(corpus, ref));
    }
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, corpus.stories.size() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& story = corpus.stories[pick(rng)];
      batch.push_back(InstructionExample{TaskKind::kContinuation, std::string(kBarePrompt), story.frames,
                                         story.narrative, story.id, std::nullopt});
    }
  }
  return batch;
}

std::vector<RlInput> rl_batch_for_step(const Corpus& corpus, const TrainConfig& config, std::uint64_t step) {
  if (corpus.stories.empty()) throw ValidationError("training corpus is empty");
  std::mt19937_64 rng(derive_seed(config.seed, "rl", step));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.stories.size() - 1);
  const int n = std::max(1, config.batch_size / config.rl_samples_per_input);
  const std::string prompt = narrative_prompt(config);
  std::vector<RlInput> batch;
  for (int i = 0; i < n; ++i) batch.push_back({&corpus.stories[pick(rng)], prompt});
  return batch;
}

TrainResult train(const Corpus& corpus, const TrainConfig& config, const Judge& judge, const TrainOptions& options) {
  config.validate();
  if (corpus.stories.empty()) throw ValidationError("training corpus is empty");
  const Vocab vocab = build_vocab(corpus.lexicon);
  const auto model_config = config.model_config(vocab.size());
  auto state = make_train_state(init_params<float>(model_config, derive_seed(config.seed, "init")),
                                derive_seed(config.seed, "sample"));

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t total = static_cast<std::uint64_t>(config.sft_steps) + static_cast<std::uint64_t>(config.rl_steps);
  for (std::uint64_t step = 0; step < total; ++step) {
    const bool rl_phase = step >= static_cast<std::uint64_t>(config.sft_steps);
    StepStats stats;
    try {
      const auto sft = sft_batch_for_step(corpus, config, step);
      const auto rl = rl_phase ? rl_batch_for_step(corpus, config, step) : std::vector<RlInput>{};
      stats = combined_step<float>(state, vocab, sft, rl, judge, config);
    } catch (const Error& e) {
      rethrow_with_context(e, "step " + std::to_string(step) + ": ");
    }
    MetricsRecord rec;
    rec.step = step;
    rec.phase = rl_phase ? "rl" : "sft";
    rec.nll = stats.nll;
    rec.rl_surrogate = stats.rl_surrogate;
    rec.mean_reward = stats.mean_reward;
    rec.baseline = stats.baseline;
    rec.grad_norm = stats.grad_norm;
    if (options.record_wallclock) {
      rec.wallclock_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    if (options.on_step) options.on_step(rec);
    result.metrics.push_back(std::move(rec));
  }

  auto& ck = result.checkpoint;
  ck.vocab = vocab;
  ck.params = std::move(state.params);
  ck.adam_m = std::move(state.adam_m);
  ck.adam_v = std::move(state.adam_v);
  ck.step = state.step;
  ck.reward_baseline = state.reward_baseline;
  std::ostringstream rng_text;
  rng_text << state.rng;
  ck.rng_state = rng_text.str();
  return result;
}

#define VSTORY_INSTANTIATE(T)                                                                                      \
  template TrainState<T> make_train_state<T>(ModelParams<T>, std::uint64_t);                                      \
  template NllResult<T> nll_loss<T>(const ModelParams<T>&, const Vocab&, std::span<const InstructionExample>);    \
  template RlResult<T> rl_loss<T>(const ModelParams<T>&, const Vocab&, std::span<const RlInput>, const Judge&,    \
                                  const RlOptions&, double, std::mt19937_64&);                                    \
  template StepGradients<T> step_gradients<T>(const ModelParams<T>&, const Vocab&,                                \
                                              std::span<const InstructionExample>, std::span<const RlInput>,      \
                                              const Judge&, const TrainConfig&, double, std::mt19937_64&);        \
  template double clip_global_norm<T>(ModelParams<T>&, double);                                                   \
  template void adam_update<T>(TrainState<T>&, const ModelParams<T>&, const TrainConfig&);                        \
  template StepStats combined_step<T>(TrainState<T>&, const Vocab&, std::span<const InstructionExample>,          \
                                      std::span<const RlInput>, const Judge&, const TrainConfig&);

VSTORY_INSTANTIATE(float)
VSTORY_INSTANTIATE(double)
#undef VSTORY_INSTANTIATE

}  // namespace vstory
