#include "vstory/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "vstory/error.hpp"

namespace vstory {
namespace {

struct Probe {
  std::vector<ImageFrame> frames;
  std::vector<TokenId> prompt;
  std::vector<TokenId> target;
  double weight = 1;
};

// Objective = sum_i weight_i * log p(target_i | prompt_i, frames_i).
double objective(const ModelParams<double>& params, const std::vector<Probe>& probes, bool pad_masked,
                 ModelParams<double>* grad) {
  double total = 0;
  for (const auto& p : probes) {
    total += p.weight *
             score_tokens(params, p.frames, p.prompt, p.target, ScoreOptions{pad_masked}, grad, p.weight).total;
  }
  return total;
}

void compare(ModelParams<double>& params, const std::vector<Probe>& probes, bool pad_masked,
             const GradcheckOptions& options, double& max_err, std::string& worst) {
  ModelParams<double> grad(params.config);
  objective(params, probes, pad_masked, &grad);
  const auto layout = params.layout();
  for (const auto& block : layout.blocks) {
    for (std::size_t k = 0; k < block.size; ++k) {
      const auto i = block.offset + k;
      const double saved = params.values[i];
      params.values[i] = saved + options.epsilon;
      const double up = objective(params, probes, pad_masked, nullptr);
      params.values[i] = saved - options.epsilon;
      const double down = objective(params, probes, pad_masked, nullptr);
      params.values[i] = saved;
      const double numeric = (up - down) / (2 * options.epsilon);
      const double analytic = grad.values[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      const double err = std::abs(analytic - numeric) / denom;
      if (err > max_err) {
        max_err = err;
        worst = block.name + "[" + std::to_string(k) + "]";
      }
    }
  }
}

}  // namespace

GradcheckReport run_gradcheck(const ModelConfig& base, const GradcheckOptions& options) {
  ModelConfig config = base;
  config.cross_attention = options.cross_attention;
  config.validate();
  const int V = config.vocab_size;

  std::mt19937_64 rng(options.seed);
  auto params = init_params<double>(config, options.seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (auto& v : params.values) v += noise(rng);

  auto random_frame = [&rng] {
    ImageFrame f;
    for (auto& px : f.pixels) px = static_cast<std::uint8_t>(rng() % 256);
    return f;
  };
  std::uniform_int_distribution<TokenId> word(kNumSpecials, V - 1);
  std::uniform_int_distribution<TokenId> any(1, V - 1);

  // Two teacher-forced examples, weights giving the per-token mean NLL.
  std::vector<Probe> nll = {{{random_frame(), random_frame()}, {word(rng), word(rng)}, {word(rng), any(rng), kEos}, 0},
                            {{random_frame()}, {word(rng)}, {any(rng), word(rng), word(rng), kEos}, 0}};
  const double n_tokens = static_cast<double>(nll[0].target.size() + nll[1].target.size());
  for (auto& p : nll) p.weight = -1.0 / n_tokens;

  // Fixed samples with fixed advantages: -(1/N) sum adv * log p.
  const std::vector<ImageFrame> rl_frames = {random_frame(), random_frame()};
  const std::vector<TokenId> rl_prompt = {word(rng)};
  std::vector<Probe> rl;
  const std::vector<std::vector<TokenId>> samples = {{kEos}, {any(rng), kEos}, {any(rng), any(rng)}, {word(rng)}};
  const std::vector<double> advantages = {0.7, -0.4, 0.25, -0.9};
  for (std::size_t s = 0; s < samples.size(); ++s) {
    rl.push_back({rl_frames, rl_prompt, samples[s], -advantages[s] / static_cast<double>(samples.size())});
  }

  GradcheckReport report;
  report.n_params = params.size();
  compare(params, nll, false, options, report.nll_max_rel_error, report.nll_worst_param);
  compare(params, rl, true, options, report.rl_max_rel_error, report.rl_worst_param);
  return report;
}

}  // namespace vstory
