#include "moble/trainer.hpp"

#include <cmath>
#include <stdexcept>

namespace moble {

void TrainConfig::validate() const {
  if (!(lr > 0.0f)) throw std::invalid_argument("train config: lr must be positive");
  if (!(clip_norm > 0.0f)) throw std::invalid_argument("train config: clip_norm must be positive");
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be non-negative");
  if (batch_size <= 0) throw std::invalid_argument("train config: batch size must be positive");
  if (weight_decay < 0.0f) throw std::invalid_argument("train config: weight decay must be non-negative");
}

Tensor teacher_forced_loss(Tape* tape, const ModelParams& model,
                           const Batch& batch, const Vocabulary& vocab,
                           bool train, Rng* rng) {
  (void)vocab;
  if (batch.size == 0 || batch.max_len < 2) {
    throw std::runtime_error("teacher_forced_loss: batch has no loss-bearing positions");
  }
  const int t = batch.max_len;
  const int t_in = t - 1;
  Tensor memory = encoder_stack(tape, model, batch.token_ids, batch.pad_mask,
                                batch.size, t, train, rng, nullptr);
  std::vector<int> dec_in(static_cast<std::size_t>(batch.size) * t_in);
  std::vector<int> targets(static_cast<std::size_t>(batch.size) * t_in);
  for (int r = 0; r < batch.size; ++r) {
    for (int c = 0; c < t_in; ++c) {
      dec_in[static_cast<std::size_t>(r) * t_in + c] = batch.at(r, c);
      targets[static_cast<std::size_t>(r) * t_in + c] = batch.at(r, c + 1);
    }
  }
  Tensor logits = decoder_stack(tape, model, dec_in, batch.size, t_in, memory,
                                t, batch.pad_mask, train, rng, nullptr);
  return cross_entropy_logits(tape, logits, targets, Vocabulary::pad_id);
}

std::int64_t count_target_positions(const Batch& batch) {
  std::int64_t n = 0;
  for (int r = 0; r < batch.size; ++r) {
    for (int c = 1; c < batch.max_len; ++c) {
      if (batch.at(r, c) != Vocabulary::pad_id) ++n;
    }
  }
  return n;
}

double clip_global_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                        float max_norm) {
  if (!(max_norm > 0.0f)) {
    throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  }
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    (void)name;
    for (const float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw std::runtime_error("clip_global_norm: gradients are not finite");
  }
  if (norm > static_cast<double>(max_norm)) {
    const float s = static_cast<float>(max_norm / norm);
    for (const auto& [name, t] : params) {
      (void)name;
      Tensor handle = t;
      for (float& g : handle.grad()) g *= s;
    }
  }
  return norm;
}

void adamw_step(const std::vector<std::pair<std::string, Tensor>>& params,
                OptimizerState& state, const TrainConfig& cfg) {
  state.step += 1;
  const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(state.step));
  const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(state.step));
  for (const auto& [name, t] : params) {
    Tensor handle = t;
    const std::size_t n = static_cast<std::size_t>(handle.numel());
    OptimizerState::Slot& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(n, 0.0f);
      slot.v.assign(n, 0.0f);
    }
    if (slot.m.size() != n || handle.grad().size() != n) {
      throw std::invalid_argument("adamw_step: state/gradient shape mismatch for " + name);
    }
    float* p = handle.data();
    const float* g = handle.grad().data();
    float* m = slot.m.data();
    float* v = slot.v.data();
    for (std::size_t i = 0; i < n; ++i) {
      p[i] -= cfg.lr * cfg.weight_decay * p[i];
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
      const float m_hat = m[i] / bc1;
      const float v_hat = v[i] / bc2;
      p[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
}

std::vector<double> train(ModelParams& model, const std::vector<std::string>& corpus,
                          const TrainConfig& cfg, const Vocabulary& vocab,
                          Rng* model_rng, const EpochCallback& on_epoch) {
  cfg.validate();
  model.config.validate();
  Rng fallback(derive_seed(cfg.seed, "dropout"));
  Rng* drop_rng = model_rng ? model_rng : &fallback;
  auto params = model.named_params();
  OptimizerState state;
  std::vector<double> epoch_losses;
  const std::uint64_t shuffle_base = derive_seed(cfg.seed, "shuffle");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(corpus, vocab, cfg.batch_size,
                                      shuffle_base + static_cast<std::uint64_t>(epoch));
    double nll_sum = 0.0;
    std::int64_t positions = 0;
    for (const Batch& batch : batches) {
      for (auto& [name, t] : params) {
        (void)name;
        t.zero_grad();
      }
      Tape tape;
      Tensor loss = teacher_forced_loss(&tape, model, batch, vocab, true, drop_rng);
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("train: loss diverged (not finite)");
      }
      const std::int64_t batch_positions = count_target_positions(batch);
      nll_sum += loss_value * static_cast<double>(batch_positions);
      positions += batch_positions;
      tape.backward(loss);
      clip_global_norm(params, cfg.clip_norm);
      adamw_step(params, state, cfg);
    }
    epoch_losses.push_back(positions > 0 ? nll_sum / static_cast<double>(positions) : 0.0);
    if (on_epoch) on_epoch(epoch + 1, epoch_losses.back());
  }
  return epoch_losses;
}

}  // namespace moble
