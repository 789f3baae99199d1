#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moble/eval.hpp"
#include "moble/model.hpp"

namespace moble {

// Tokenwise affine map h' = h W + bias fitted between two encoders' memories.
struct Adapter {
  Tensor w;      // [d_model, d_model]
  Tensor bias;   // [d_model]
  double lambda = 0.0;
  std::string source_id;
  std::string target_id;
  int n_train_pairs = 0;  // sequences used for fitting
};

// Closed-form ridge regression on paired token rows: minimizes
// sum ||h_a W + bias - h_b||^2 + lambda ||W||_F^2 (bias unpenalized).
// Throws when the normal equations are singular (suggests lambda > 0).
Adapter fit_linear_adapter(const std::vector<Memory>& source_mems,
                           const std::vector<Memory>& target_mems,
                           double lambda);

Memory apply_adapter(const Adapter& adapter, const Memory& memory);

// Decodes with `decoder_model` on adapter-transformed memories from
// `encoder_model` and scores against the batch references.
MetricsRow adapter_cross_decode(const ModelParams& encoder_model,
                                const Adapter& adapter,
                                const ModelParams& decoder_model,
                                const Batch& batch);

struct PerturbSpec {
  enum class Mode { Quantize, Gaussian } mode = Mode::Quantize;
  int bits = 8;           // Quantize: symmetric uniform, in [2,16]
  double sigma = 0.0;     // Gaussian: i.i.d. noise scale
  std::uint64_t seed = 0; // Gaussian: noise stream seed
};

Memory perturb_latent(const Memory& memory, const PerturbSpec& spec);
// One noise stream is consumed across the list in order, so the whole sweep
// is a deterministic function of the seed.
std::vector<Memory> perturb_latents(const std::vector<Memory>& memories,
                                    const PerturbSpec& spec);

}  // namespace moble
