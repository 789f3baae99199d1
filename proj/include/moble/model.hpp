#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moble/data.hpp"
#include "moble/rng.hpp"
#include "moble/tensor.hpp"

namespace moble {

struct ModelConfig {
  int d_model = 256;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 1024;
  float dropout = 0.1f;
  int t_max = 50;
  int vocab_size = 86;

  int d_k() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct EncoderLayerParams {
  Tensor wq, wk, wv, wo;
  Tensor ffn_w1, ffn_w2;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct DecoderLayerParams {
  Tensor wq, wk, wv, wo;
  Tensor cross_wq, cross_wk, cross_wv, cross_wo;
  Tensor ffn_w1, ffn_w2;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias, ln3_gain, ln3_bias;
};

// Named parameter set. The manifest order returned by named_params() is the
// canonical one: it drives initialization draws, optimizer state, checkpoint
// layout, and pairwise weight distances.
struct ModelParams {
  ModelConfig config;
  std::uint64_t seed = 0;

  Tensor src_embedding, tgt_embedding;
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor generator_w, generator_b;

  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::int64_t param_count() const;
  void set_requires_grad(bool v);
};

// Final encoder states for one sequence, trimmed to its real length.
struct Memory {
  int length = 0;                         // rows (== bos + payload + eos)
  int d_model = 0;
  std::vector<float> values;              // length * d_model
  std::vector<std::uint8_t> src_pad_mask; // true exactly at pad positions
};

// Batched memory view used by the decoder; sequences are repadded to the
// local maximum and masked out for cross-attention.
struct PackedMemory {
  int batch = 0;
  int t_src = 0;
  int d_model = 0;
  Tensor values;                        // [batch * t_src, d_model]
  std::vector<std::uint8_t> key_pad;    // batch * t_src

  static PackedMemory pack(const std::vector<const Memory*>& memories);
  static PackedMemory pack(const std::vector<Memory>& memories);
};

// Captures head-averaged attention probabilities at one site/layer.
struct AttentionTap {
  enum class Site { EncoderSelf, DecoderSelf, DecoderCross };

  struct Map {
    int t_q = 0;
    int t_k = 0;
    std::vector<float> probs;  // row-major, head-averaged
  };

  Site site = Site::EncoderSelf;
  int layer = 0;
  std::vector<Map> maps;  // one per sequence, in batch order
};

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
Tensor sinusoidal_pe(int t_len, int d_model);

// Xavier-uniform matrices, zero biases, unit LayerNorm gains, drawn from a
// single stream in manifest order. The (config, seed) pair fully determines
// the result.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);
// Same draws, but from a caller-owned stream (training continues the stream
// for dropout, making "same seed => same run" exact).
ModelParams init_model(const ModelConfig& config, std::uint64_t seed, Rng& rng);

// Differentiable stacks over packed rows. `rng` is required when train is
// true (dropout); `tap` captures attention at one site/layer if non-null.
Tensor encoder_stack(Tape* tape, const ModelParams& model,
                     const std::vector<int>& ids, const std::vector<std::uint8_t>& pad_mask,
                     int batch, int t, bool train, Rng* rng, AttentionTap* tap);
Tensor decoder_stack(Tape* tape, const ModelParams& model,
                     const std::vector<int>& tgt_ids, int batch, int t_tgt,
                     const Tensor& memory_values, int t_src,
                     const std::vector<std::uint8_t>& src_key_pad,
                     bool train, Rng* rng, AttentionTap* tap);

// Encoder protocol surface: per-sequence final hidden states H with the
// source key-padding mask.
std::vector<Memory> encode(const ModelParams& model, const Batch& batch,
                           bool train_mode = false, Rng* rng = nullptr,
                           AttentionTap* tap = nullptr);

// Decoder forward over a target prefix and a (possibly foreign) memory.
// Cross-decoding is deliberately allowed: only d_model must agree.
Tensor decoder_forward(const ModelParams& model, const Batch& tgt_prefix,
                       const PackedMemory& memory, bool train_mode = false,
                       Rng* rng = nullptr, Tape* tape = nullptr,
                       AttentionTap* tap = nullptr);

}  // namespace moble
