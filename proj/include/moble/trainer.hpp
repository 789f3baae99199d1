#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "moble/data.hpp"
#include "moble/model.hpp"
#include "moble/tensor.hpp"

namespace moble {

struct TrainConfig {
  float lr = 3e-4f;
  float weight_decay = 0.0f;
  int batch_size = 128;
  int epochs = 8;
  float clip_norm = 1.0f;
  std::uint64_t seed = 0;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;

  void validate() const;
};

// Per-parameter Adam moments, keyed by parameter name.
struct OptimizerState {
  struct Slot {
    std::vector<float> m;
    std::vector<float> v;
  };
  std::map<std::string, Slot> slots;
  std::int64_t step = 0;
};

// Teacher-forced next-token NLL: decoder input is tokens[..T-1], targets are
// tokens[1..]; pad targets are excluded from the mean. Recorded on `tape`
// when given so backward() reaches every parameter.
Tensor teacher_forced_loss(Tape* tape, const ModelParams& model,
                           const Batch& batch, const Vocabulary& vocab,
                           bool train, Rng* rng);

// Number of loss-bearing (non-pad) target positions in a batch.
std::int64_t count_target_positions(const Batch& batch);

// Scales every gradient by max_norm/g when the global L2 norm g exceeds
// max_norm. Returns the pre-clip norm.
double clip_global_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                        float max_norm);

// One decoupled-weight-decay Adam step over all parameters.
void adamw_step(const std::vector<std::pair<std::string, Tensor>>& params,
                OptimizerState& state, const TrainConfig& cfg);

// Full training loop; returns the per-epoch mean NLL trace. When `model_rng`
// is given, dropout continues that stream (the same generator that drew the
// initialization); otherwise a stream derived from cfg.seed is used.
// `on_epoch`, when set, is called after each epoch with its mean loss.
using EpochCallback = std::function<void(int epoch, double mean_loss)>;
std::vector<double> train(ModelParams& model, const std::vector<std::string>& corpus,
                          const TrainConfig& cfg, const Vocabulary& vocab,
                          Rng* model_rng = nullptr, const EpochCallback& on_epoch = {});

}  // namespace moble
