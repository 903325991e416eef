#include "vstory/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <nlohmann/json.hpp>

#include "vstory/error.hpp"
#include "vstory/manifest.hpp"

namespace vstory {
namespace {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'V', 'S', 'T', 'O', 'R', 'Y', 'C', 'K'};
constexpr int kFormatVersion = 1;

json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},             {"max_frames", c.max_frames},
          {"max_seq", c.max_seq},       {"cross_attention", c.cross_attention}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_frames = j.at("max_frames").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.cross_attention = j.at("cross_attention").get<bool>();
  c.validate();
  return c;
}

void append_floats(std::string& out, const std::vector<float>& v) {
  const auto start = out.size();
  out.resize(start + v.size() * sizeof(float));
  if (!v.empty()) std::memcpy(out.data() + start, v.data(), v.size() * sizeof(float));
}

std::vector<float> read_floats(const std::string& bytes, std::size_t offset, std::size_t count) {
  if (offset + count * sizeof(float) > bytes.size()) throw ValidationError("checkpoint: tensor data truncated");
  std::vector<float> v(count);
  if (count > 0) std::memcpy(v.data(), bytes.data() + offset, count * sizeof(float));
  return v;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto layout = ck.params.layout();
  if (ck.params.values.size() != layout.total) throw ValidationError("checkpoint: parameter count mismatch");
  if (ck.params.config.vocab_size != ck.vocab.size()) throw ValidationError("checkpoint: vocab size mismatch");
  for (const auto* m : {&ck.adam_m, &ck.adam_v}) {
    if (!m->empty() && m->size() != layout.total) throw ValidationError("checkpoint: optimizer moment size mismatch");
  }

  json tensors = json::array();
  for (const auto& b : layout.blocks) {
    tensors.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", b.offset}, {"dtype", "f32"}});
  }
  const json header = {{"format_version", kFormatVersion},
                       {"architecture", config_to_json(ck.params.config)},
                       {"vocab", ck.vocab.tokens()},
                       {"tensors", tensors},
                       {"parameter_count", layout.total},
                       {"has_moments", !ck.adam_m.empty()},
                       {"step", ck.step},
                       {"reward_baseline", ck.reward_baseline},
                       {"rng_state", ck.rng_state},
                       {"arm", ck.arm}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += text;
  append_floats(out, ck.params.values);
  append_floats(out, ck.adam_m);
  append_floats(out, ck.adam_v);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw ValidationError("checkpoint: bad magic");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof kMagic, sizeof len);
  const std::size_t data_start = sizeof kMagic + sizeof len + len;
  if (data_start > bytes.size()) throw ValidationError("checkpoint: header truncated");

  Checkpoint ck;
  try {
    const auto header = json::parse(bytes.substr(sizeof kMagic + sizeof len, len));
    const int version = header.at("format_version").get<int>();
    if (version != kFormatVersion) {
      throw ValidationError("checkpoint: unsupported format_version " + std::to_string(version));
    }
    const auto config = config_from_json(header.at("architecture"));
    auto words = header.at("vocab").get<std::vector<std::string>>();
    if (words.size() < static_cast<std::size_t>(kNumSpecials)) throw ValidationError("checkpoint: vocab too small");
    ck.vocab = Vocab(std::vector<std::string>(words.begin() + kNumSpecials, words.end()));
    if (!(ck.vocab.tokens() == words)) throw ValidationError("checkpoint: vocab specials malformed");
    if (ck.vocab.size() != config.vocab_size) throw ValidationError("checkpoint: vocab size mismatch");

    const ParamLayout layout(config);
    const auto& index = header.at("tensors");
    if (index.size() != layout.blocks.size()) throw ValidationError("checkpoint: tensor index does not match architecture");
    for (std::size_t i = 0; i < layout.blocks.size(); ++i) {
      const auto& b = layout.blocks[i];
      if (index[i].at("name").get<std::string>() != b.name ||
          index[i].at("shape").get<std::vector<int>>() != b.shape ||
          index[i].at("offset").get<std::size_t>() != b.offset || index[i].at("dtype").get<std::string>() != "f32") {
        throw ValidationError("checkpoint: tensor '" + b.name + "' does not match architecture");
      }
    }
    const std::size_t n = layout.total;
    ck.params.config = config;
    ck.params.values = read_floats(bytes, data_start, n);
    std::size_t expected = data_start + n * sizeof(float);
    if (header.at("has_moments").get<bool>()) {
      ck.adam_m = read_floats(bytes, data_start + n * sizeof(float), n);
      ck.adam_v = read_floats(bytes, data_start + 2 * n * sizeof(float), n);
      expected += 2 * n * sizeof(float);
    }
    if (expected != bytes.size()) throw ValidationError("checkpoint: trailing bytes");
    ck.step = header.at("step").get<std::uint64_t>();
    ck.reward_baseline = header.at("reward_baseline").get<double>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.arm = header.at("arm").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

Model<float> to_model(const Checkpoint& checkpoint) { return Model<float>{checkpoint.vocab, checkpoint.params}; }

}  // namespace vstory
