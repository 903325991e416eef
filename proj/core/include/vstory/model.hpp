#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vstory/corpus.hpp"
#include "vstory/vocab.hpp"

namespace vstory {

inline constexpr int kPatchSize = 4;
inline constexpr int kPatchesPerFrame = (kFrameWidth / kPatchSize) * (kFrameHeight / kPatchSize);
inline constexpr int kPatchDim = kPatchSize * kPatchSize * kFrameChannels;

// Architecture constants. The defaults are the desk-scale model; `micro`
// is the tiny configuration used for exhaustive and finite-difference checks.
struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_frames = kMaxFrames;
  int max_seq = 96;
  // When false the decoder has no cross-attention and sees the images only
  // through a mean-pooled visual embedding added to every token embedding.
  bool cross_attention = true;

  static ModelConfig desk(int vocab_size);
  static ModelConfig micro();  // V=5, d=8, 1 layer, 2 heads, FFN 16

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct ParamBlock {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Offsets of every tensor inside the flat parameter vector. Linear weights
// are stored [in x out], row-major, so y = x W + b.
struct ParamLayout {
  struct Linear {
    std::size_t w = 0, b = 0;
    int in = 0, out = 0;
  };
  struct LayerNorm {
    std::size_t gain = 0, bias = 0;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct Layer {
    LayerNorm ln_self, ln_cross, ln_ffn;
    Attention self_attn, cross_attn;
    Linear ffn_in, ffn_out;
  };

  Linear patch_embed;
  std::size_t patch_pos = 0;  // [16 x d]
  std::size_t frame_pos = 0;  // [max_frames x d]
  std::size_t token_embed = 0;  // [V x d]
  std::size_t text_pos = 0;  // [max_seq x d]
  std::vector<Layer> layers;
  LayerNorm final_ln;
  Linear output;

  std::vector<ParamBlock> blocks;
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& config);
  const ParamBlock& block(const std::string& name) const;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<T> values;

  ModelParams() = default;
  explicit ModelParams(const ModelConfig& c);  // all zeros

  ParamLayout layout() const { return ParamLayout(config); }
  std::span<T> block(const std::string& name);
  std::span<const T> block(const std::string& name) const;
  std::size_t size() const { return values.size(); }

  // Throws NumericError naming the first tensor holding NaN/Inf.
  void check_finite() const;

  bool operator==(const ModelParams&) const = default;
};

// Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& params);

// Parameters together with the vocabulary they were built for.
template <typename T>
struct Model {
  Vocab vocab;
  ModelParams<T> params;
};

// Visual tokens for a frame sequence: (n_frames * 16) x d_model, row-major.
// Patch pixels are scaled to [0,1], embedded linearly, and offset by the
// patch- and frame-position embeddings.
template <typename T>
std::vector<T> encode_images(const ModelParams<T>& params, std::span<const ImageFrame> frames);

struct ScoreOptions {
  // Exclude PAD from the softmax. This is the distribution generate() samples
  // from; teacher-forced NLL uses the full vocabulary.
  bool pad_masked = false;
};

template <typename T>
struct SequenceScore {
  std::vector<T> token_logprobs;
  T total = 0;
};

// Teacher-forced log-probability of `target` given images and prompt. The
// decoder input is prompt + SEP + target[:-1]; each target token is scored.
// The caller decides whether target ends with EOS. When `grad` is non-null,
// grad_scale * d(total)/d(params) is added to it.
template <typename T>
SequenceScore<T> score_tokens(const ModelParams<T>& params, std::span<const ImageFrame> frames,
                              std::span<const TokenId> prompt, std::span<const TokenId> target,
                              ScoreOptions options = {}, ModelParams<T>* grad = nullptr, T grad_scale = T(1));

// log P(text | images, instruction) over the full vocabulary, with EOS
// appended to the text. Throws VocabError on OOV words and ValidationError
// when instruction + SEP + text + EOS exceeds max_seq tokens.
template <typename T>
double log_prob(const Model<T>& model, std::span<const ImageFrame> frames, const std::string& instruction,
                const std::string& text);

enum class DecodeMode { kGreedy, kSample };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  double temperature = 1.0;
  int max_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GenerationOutput {
  std::vector<TokenId> token_ids;  // includes the terminating EOS if produced
  std::string text;                // detokenized, without EOS
  std::vector<double> per_token_logprobs;
  double total_logprob = 0;
};

// Autoregressive decoding with PAD masked out. Greedy ties go to the lowest
// id. Logprobs are taken from the (temperature-scaled) sampling distribution.
template <typename T>
GenerationOutput generate(const ModelParams<T>& params, const Vocab* vocab, std::span<const ImageFrame> frames,
                          std::span<const TokenId> prompt, const DecodeConfig& decode, std::mt19937_64& rng);

// Seeds its own generator from decode.seed.
template <typename T>
GenerationOutput generate(const Model<T>& model, std::span<const ImageFrame> frames, const std::string& instruction,
                          const DecodeConfig& decode);

// Probability vector the decoder assigns to the next token after `prefix`
// (already including prompt + SEP + generated tokens). Test hook.
template <typename T>
std::vector<double> next_token_distribution(const ModelParams<T>& params, std::span<const ImageFrame> frames,
                                            std::span<const TokenId> prompt, std::span<const TokenId> generated,
                                            bool pad_masked, double temperature = 1.0);

}  // namespace vstory
