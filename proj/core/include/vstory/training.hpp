#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vstory/checkpoint.hpp"
#include "vstory/corpus.hpp"
#include "vstory/judge.hpp"
#include "vstory/model.hpp"
#include "vstory/tasks.hpp"

namespace vstory {

struct TrainConfig {
  double lambda = 0.5;
  double lr = 3e-4;
  std::array<double, 2> adam_betas = {0.9, 0.999};
  double adam_eps = 1e-8;
  int batch_size = 16;
  int sft_steps = 0;
  int rl_steps = 0;
  int rl_samples_per_input = 4;
  double baseline_decay = 0.9;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;

  std::string task_weights = "caption=0.4,continuation=0.3,consistency=0.15,emotion=0.15";
  int rl_max_len = 64;
  // false: every example is the bare prompt with the narrative as target.
  bool instruction_tuning = true;
  bool cross_attention = true;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;

  void validate() const;
  ModelConfig model_config(int vocab_size) const;
  bool operator==(const TrainConfig&) const = default;

  // Schedule used for the 64/16-story ablation runs.
  static TrainConfig desk();
};

// Flat JSON object keyed by the field names above. Missing keys keep their
// defaults; unknown keys are a ConfigError.
std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(std::string_view text);
TrainConfig load_train_config(const std::filesystem::path& path);

enum class Arm { kFull, kNoInstructionTuning, kNoReinforcementLearning, kNoLearnedModules };

inline constexpr std::array<Arm, 4> kAllArms = {Arm::kFull, Arm::kNoInstructionTuning, Arm::kNoReinforcementLearning,
                                                Arm::kNoLearnedModules};

std::string_view to_string(Arm arm);
Arm arm_from_string(std::string_view name);
std::string_view arm_label(Arm arm);  // "Full Model", "w/o Instruction Tuning", ...

// Config transformation for an ablation arm. Every arm keeps
// sft_steps + rl_steps unchanged.
TrainConfig apply_arm(TrainConfig config, Arm arm);

// Whole-narrative instruction a model trained under `config` expects:
// story_prompt(), or the bare prompt without instruction tuning.
std::string narrative_prompt(const TrainConfig& config);

// Independent stream seeds from one base seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0);

template <typename T>
struct TrainState {
  ModelParams<T> params;
  std::vector<T> adam_m;
  std::vector<T> adam_v;
  std::uint64_t step = 0;
  double reward_baseline = 0;
  std::mt19937_64 rng;
};

template <typename T>
TrainState<T> make_train_state(ModelParams<T> params, std::uint64_t rng_seed);

template <typename T>
struct NllResult {
  double loss = 0;  // mean per target token, EOS included
  std::size_t tokens = 0;
  ModelParams<T> grad;
};

// Throws on an empty batch; OOV or overlength examples are reported with
// their source story id.
template <typename T>
NllResult<T> nll_loss(const ModelParams<T>& params, const Vocab& vocab, std::span<const InstructionExample> batch);

struct RlInput {
  const VisualStory* story = nullptr;
  std::string instruction;
};

struct RlOptions {
  int samples_per_input = 4;
  int max_len = 64;
  double temperature = 1.0;
};

struct RlSample {
  std::size_t input = 0;
  GenerationOutput output;
  double reward = 0;
};

template <typename T>
struct RlResult {
  // -(1/N) sum (R - b) log p(sample) over all N = inputs * K samples.
  double surrogate = 0;
  double mean_reward = 0;
  ModelParams<T> grad;
  std::vector<RlSample> samples;
};

// REINFORCE with a fixed baseline. Samples come from the PAD-masked
// distribution at temperature 1 using `rng`; judge failures are rethrown as
// JudgeError naming the input.
template <typename T>
RlResult<T> rl_loss(const ModelParams<T>& params, const Vocab& vocab, std::span<const RlInput> inputs,
                    const Judge& judge, const RlOptions& options, double baseline, std::mt19937_64& rng);

template <typename T>
struct StepGradients {
  std::optional<NllResult<T>> nll;  // absent for an empty SFT batch
  std::optional<RlResult<T>> rl;    // absent when lambda == 0 or no RL inputs
  ModelParams<T> total;             // grad_nll + lambda * grad_rl, before clipping
};

// Gradient part of combined_step. Consumes `rng` only for RL sampling.
template <typename T>
StepGradients<T> step_gradients(const ModelParams<T>& params, const Vocab& vocab,
                                std::span<const InstructionExample> sft_batch, std::span<const RlInput> rl_batch,
                                const Judge& judge, const TrainConfig& config, double baseline, std::mt19937_64& rng);

struct StepStats {
  double nll = 0;
  std::optional<double> rl_surrogate;
  std::optional<double> mean_reward;
  double baseline = 0;   // after the update
  double grad_norm = 0;  // before clipping
};

// Scales `grad` in place to global norm <= max_norm; returns the norm before scaling.
template <typename T>
double clip_global_norm(ModelParams<T>& grad, double max_norm);

// One bias-corrected Adam update using state.step + 1 as the timestep.
template <typename T>
void adam_update(TrainState<T>& state, const ModelParams<T>& grad, const TrainConfig& config);

// grad_nll + lambda * grad_rl, clipped, Adam, step += 1, baseline EMA when RL ran.
template <typename T>
StepStats combined_step(TrainState<T>& state, const Vocab& vocab, std::span<const InstructionExample> sft_batch,
                        std::span<const RlInput> rl_batch, const Judge& judge, const TrainConfig& config);

struct MetricsRecord {
  std::uint64_t step = 0;
  std::string phase;  // "sft" or "rl"
  double nll = 0;
  std::optional<double> rl_surrogate;
  std::optional<double> mean_reward;
  double baseline = 0;
  double grad_norm = 0;
  double wallclock_ms = 0;

  bool operator==(const MetricsRecord&) const = default;
};

std::string metrics_to_jsonl(std::span<const MetricsRecord> records);
std::vector<MetricsRecord> metrics_from_jsonl(std::string_view text);

// Training batches for a given global step, deterministic in (config.seed, step).
std::vector<InstructionExample> sft_batch_for_step(const Corpus& corpus, const TrainConfig& config, std::uint64_t step);
std::vector<RlInput> rl_batch_for_step(const Corpus& corpus, const TrainConfig& config, std::uint64_t step);

struct TrainOptions {
  // Wall-clock time is left at 0 unless requested so logs stay reproducible.
  bool record_wallclock = false;
  std::function<void(const MetricsRecord&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRecord> metrics;
};

// Phase 1: sft_steps NLL-only steps. Phase 2: rl_steps combined steps.
// Errors are rethrown with the failing step index.
TrainResult train(const Corpus& corpus, const TrainConfig& config, const Judge& judge, const TrainOptions& options = {});

}  // namespace vstory
