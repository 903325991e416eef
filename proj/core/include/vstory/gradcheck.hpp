#pragma once

#include <cstdint>
#include <string>

#include "vstory/model.hpp"

namespace vstory {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double epsilon = 1e-5;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  bool cross_attention = true;
};

struct GradcheckReport {
  double nll_max_rel_error = 0;
  double rl_max_rel_error = 0;
  std::string nll_worst_param;
  std::string rl_worst_param;
  std::size_t n_params = 0;

  double max_rel_error() const { return nll_max_rel_error > rl_max_rel_error ? nll_max_rel_error : rl_max_rel_error; }
};

// Compares analytic gradients on the micro configuration (float64) against
// central differences for two objectives: a mean per-token NLL over two
// teacher-forced examples, and a REINFORCE surrogate over fixed sampled
// sequences with fixed advantages under the PAD-masked distribution.
GradcheckReport run_gradcheck(const ModelConfig& config, const GradcheckOptions& options = {});

}  // namespace vstory
