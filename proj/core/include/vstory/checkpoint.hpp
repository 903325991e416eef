#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vstory/model.hpp"
#include "vstory/vocab.hpp"

namespace vstory {

struct Checkpoint {
  Vocab vocab;
  ModelParams<float> params;
  std::vector<float> adam_m;  // empty, or one entry per parameter
  std::vector<float> adam_v;
  std::uint64_t step = 0;
  double reward_baseline = 0;
  std::string rng_state;  // textual std::mt19937_64 state
  std::string arm = "full";

  bool operator==(const Checkpoint&) const = default;
};

// Binary container: the 8-byte magic "VSTORYCK", a little-endian u64 header
// length, a JSON header (format_version, architecture, vocab, tensor index,
// training state), then little-endian float32 tensor data.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Model<float> to_model(const Checkpoint& checkpoint);

}  // namespace vstory
