#pragma once

#include <string>
#include <vector>

#include "moble/data.hpp"
#include "moble/model.hpp"

namespace moble {

// Head-averaged attention maps captured at one site for a batch of inputs,
// epsilon-smoothed and row-renormalized. For the decoder sites the maps come
// from the final step of greedy decoding and `prefix_len` records how long
// the generated prefix was.
struct AttentionCapture {
  enum class Site { EncoderSelfL0, DecoderSelfFinalStep, DecoderCross };
  Site site = Site::EncoderSelfL0;
  struct Map {
    int t_q = 0;
    int t_k = 0;
    int prefix_len = 0;
    std::vector<float> probs;  // row-major, rows sum to 1
  };
  std::vector<Map> maps;
};

// sqrt(sum over all parameters of ||p_a - p_b||^2); parameter names and
// shapes must agree.
double weight_l2(const ModelParams& a, const ModelParams& b);

// Captures the requested site on a batch. For DecoderCross/DecoderSelf the
// encoder memory comes from `memory_encoder` (true cross-decoding when it is
// a different model); layer 0 only.
AttentionCapture capture_attention(const ModelParams& model, const Batch& batch,
                                   AttentionCapture::Site site,
                                   const ModelParams* memory_encoder = nullptr);

// Mean row-wise KL divergence over aligned maps, natural log; both operands
// are already epsilon-smoothed by capture.
double attn_kl(const AttentionCapture& a, const AttentionCapture& b);
// Cosine similarity between flattened maps, averaged over sequences.
double attn_cosine(const AttentionCapture& a, const AttentionCapture& b);

// Row-wise KL of two dense row-stochastic maps (helper shared with tests).
double kl_rows(const std::vector<float>& a, const std::vector<float>& b,
               int rows, int cols);
double cosine_flat(const std::vector<float>& a, const std::vector<float>& b);

// CSV grid (query index, key index, probability) per sequence for external
// plotting.
void save_capture_csv(const AttentionCapture& capture, const std::string& path);

// Hex digest of all parameter bytes in manifest order; equal digests mean
// byte-identical parameter sets.
std::string param_digest(const ModelParams& model);

}  // namespace moble
