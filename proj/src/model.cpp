#include "moble/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace moble {

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0) {
    throw std::invalid_argument("config: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("config: d_model must be divisible by n_heads");
  }
  if (!(dropout >= 0.0f && dropout < 1.0f)) {
    throw std::invalid_argument("config: dropout must lie in [0,1)");
  }
  if (t_max < 2) throw std::invalid_argument("config: t_max must be at least 2");
  if (vocab_size <= 0) throw std::invalid_argument("config: vocab_size must be positive");
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("src_embedding", src_embedding);
  out.emplace_back("tgt_embedding", tgt_embedding);
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    const EncoderLayerParams& e = encoder[l];
    out.emplace_back(p + "wq", e.wq);
    out.emplace_back(p + "wk", e.wk);
    out.emplace_back(p + "wv", e.wv);
    out.emplace_back(p + "wo", e.wo);
    out.emplace_back(p + "ffn_w1", e.ffn_w1);
    out.emplace_back(p + "ffn_w2", e.ffn_w2);
    out.emplace_back(p + "ln1_gain", e.ln1_gain);
    out.emplace_back(p + "ln1_bias", e.ln1_bias);
    out.emplace_back(p + "ln2_gain", e.ln2_gain);
    out.emplace_back(p + "ln2_bias", e.ln2_bias);
  }
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string p = "decoder." + std::to_string(l) + ".";
    const DecoderLayerParams& d = decoder[l];
    out.emplace_back(p + "wq", d.wq);
    out.emplace_back(p + "wk", d.wk);
    out.emplace_back(p + "wv", d.wv);
    out.emplace_back(p + "wo", d.wo);
    out.emplace_back(p + "cross_wq", d.cross_wq);
    out.emplace_back(p + "cross_wk", d.cross_wk);
    out.emplace_back(p + "cross_wv", d.cross_wv);
    out.emplace_back(p + "cross_wo", d.cross_wo);
    out.emplace_back(p + "ffn_w1", d.ffn_w1);
    out.emplace_back(p + "ffn_w2", d.ffn_w2);
    out.emplace_back(p + "ln1_gain", d.ln1_gain);
    out.emplace_back(p + "ln1_bias", d.ln1_bias);
    out.emplace_back(p + "ln2_gain", d.ln2_gain);
    out.emplace_back(p + "ln2_bias", d.ln2_bias);
    out.emplace_back(p + "ln3_gain", d.ln3_gain);
    out.emplace_back(p + "ln3_bias", d.ln3_bias);
  }
  out.emplace_back("generator.weight", generator_w);
  out.emplace_back("generator.bias", generator_b);
  return out;
}

std::int64_t ModelParams::param_count() const {
  std::int64_t n = 0;
  for (auto& [name, t] : named_params()) {
    (void)name;
    n += t.numel();
  }
  return n;
}

void ModelParams::set_requires_grad(bool v) {
  for (auto& [name, t] : named_params()) {
    (void)name;
    Tensor handle = t;
    handle.set_requires_grad(v);
  }
}

Tensor sinusoidal_pe(int t_len, int d_model) {
  if (d_model % 2 != 0) {
    throw std::invalid_argument("sinusoidal_pe: d_model must be even");
  }
  Tensor pe = Tensor::zeros({t_len, d_model});
  float* p = pe.data();
  for (int pos = 0; pos < t_len; ++pos) {
    for (int i = 0; i < d_model / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / d_model);
      const double angle = pos * freq;
      p[static_cast<std::ptrdiff_t>(pos) * d_model + 2 * i] = static_cast<float>(std::sin(angle));
      p[static_cast<std::ptrdiff_t>(pos) * d_model + 2 * i + 1] = static_cast<float>(std::cos(angle));
    }
  }
  return pe;
}

namespace {

Tensor xavier_matrix(int rows, int cols, Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(rows + cols));
  Tensor t = Tensor::zeros({rows, cols}, true);
  float* p = t.data();
  const std::int64_t n = t.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    p[i] = rng.uniform_range(-bound, bound);
  }
  return t;
}

// Embedding tables use unit-normal entries. Xavier-scaled embeddings are
// drowned out by the O(1) positional encodings (no sqrt(d_model) rescaling
// here), which stalls the 8-epoch recipe on a visible plateau.
Tensor normal_matrix(int rows, int cols, Rng& rng) {
  Tensor t = Tensor::zeros({rows, cols}, true);
  float* p = t.data();
  const std::int64_t n = t.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    p[i] = static_cast<float>(rng.normal());
  }
  return t;
}

}  // namespace

ModelParams init_model(const ModelConfig& config, std::uint64_t seed, Rng& rng) {
  config.validate();
  const int d = config.d_model;
  ModelParams m;
  m.config = config;
  m.seed = seed;
  m.src_embedding = normal_matrix(config.vocab_size, d, rng);
  m.tgt_embedding = normal_matrix(config.vocab_size, d, rng);
  m.encoder.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& e : m.encoder) {
    e.wq = xavier_matrix(d, d, rng);
    e.wk = xavier_matrix(d, d, rng);
    e.wv = xavier_matrix(d, d, rng);
    e.wo = xavier_matrix(d, d, rng);
    e.ffn_w1 = xavier_matrix(d, config.d_ff, rng);
    e.ffn_w2 = xavier_matrix(config.d_ff, d, rng);
    e.ln1_gain = Tensor::full({d}, 1.0f, true);
    e.ln1_bias = Tensor::zeros({d}, true);
    e.ln2_gain = Tensor::full({d}, 1.0f, true);
    e.ln2_bias = Tensor::zeros({d}, true);
  }
  m.decoder.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& dec : m.decoder) {
    dec.wq = xavier_matrix(d, d, rng);
    dec.wk = xavier_matrix(d, d, rng);
    dec.wv = xavier_matrix(d, d, rng);
    dec.wo = xavier_matrix(d, d, rng);
    dec.cross_wq = xavier_matrix(d, d, rng);
    dec.cross_wk = xavier_matrix(d, d, rng);
    dec.cross_wv = xavier_matrix(d, d, rng);
    dec.cross_wo = xavier_matrix(d, d, rng);
    dec.ffn_w1 = xavier_matrix(d, config.d_ff, rng);
    dec.ffn_w2 = xavier_matrix(config.d_ff, d, rng);
    dec.ln1_gain = Tensor::full({d}, 1.0f, true);
    dec.ln1_bias = Tensor::zeros({d}, true);
    dec.ln2_gain = Tensor::full({d}, 1.0f, true);
    dec.ln2_bias = Tensor::zeros({d}, true);
    dec.ln3_gain = Tensor::full({d}, 1.0f, true);
    dec.ln3_bias = Tensor::zeros({d}, true);
  }
  m.generator_w = xavier_matrix(d, config.vocab_size, rng);
  m.generator_b = Tensor::zeros({config.vocab_size}, true);
  return m;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  return init_model(config, seed, rng);
}

namespace {

void check_token_rows(const std::vector<int>& ids, int vocab_size) {
  for (const int id : ids) {
    if (id < 0 || id >= vocab_size) {
      throw std::invalid_argument("forward: token id out of vocabulary range");
    }
  }
}

Rng* require_rng(bool train, Rng* rng) {
  if (train && rng == nullptr) {
    throw std::invalid_argument("forward: training mode needs an RNG for dropout");
  }
  return rng;
}

// Head-averages raw probabilities [B,h,Tq,Tk] into tap maps.
void record_tap(AttentionTap* tap, const std::shared_ptr<std::vector<float>>& probs,
                int batch, int heads, int t_q, int t_k) {
  if (!tap || !probs) return;
  const float inv_h = 1.0f / static_cast<float>(heads);
  for (int b = 0; b < batch; ++b) {
    AttentionTap::Map map;
    map.t_q = t_q;
    map.t_k = t_k;
    map.probs.assign(static_cast<std::size_t>(t_q) * t_k, 0.0f);
    for (int h = 0; h < heads; ++h) {
      const float* src = probs->data() +
                         (static_cast<std::ptrdiff_t>(b) * heads + h) * t_q * t_k;
      for (std::size_t i = 0; i < map.probs.size(); ++i) map.probs[i] += src[i];
    }
    for (float& x : map.probs) x *= inv_h;
    tap->maps.push_back(std::move(map));
  }
}

struct AttentionOut {
  Tensor context;
  std::shared_ptr<std::vector<float>> probs;
};

AttentionOut mha_block(Tape* tape, const Tensor& x_q, const Tensor& x_kv,
                       const Tensor& wq, const Tensor& wk, const Tensor& wv,
                       int batch, int t_q, int t_k, int heads,
                       const std::vector<std::uint8_t>& key_pad, bool causal,
                       bool want_probs) {
  Tensor q = matmul(tape, x_q, wq);
  Tensor k = matmul(tape, x_kv, wk);
  Tensor v = matmul(tape, x_kv, wv);
  AttentionOut out;
  std::shared_ptr<std::vector<float>> probs;
  out.context = attention_heads(tape, q, k, v, batch, t_q, t_k, heads, key_pad,
                                causal, want_probs ? &probs : nullptr);
  out.probs = probs;
  return out;
}

}  // namespace

Tensor encoder_stack(Tape* tape, const ModelParams& model,
                     const std::vector<int>& ids, const std::vector<std::uint8_t>& pad_mask,
                     int batch, int t, bool train, Rng* rng, AttentionTap* tap) {
  const ModelConfig& cfg = model.config;
  check_token_rows(ids, cfg.vocab_size);
  require_rng(train, rng);
  const Tensor pe = sinusoidal_pe(t, cfg.d_model);
  Tensor x = embedding_gather(tape, model.src_embedding, ids);
  x = add_position(tape, x, pe, batch);
  if (train) x = dropout(tape, x, cfg.dropout, *rng, true);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const EncoderLayerParams& e = model.encoder[static_cast<std::size_t>(l)];
    const bool capture = tap && tap->site == AttentionTap::Site::EncoderSelf && tap->layer == l;
    AttentionOut att = mha_block(tape, x, x, e.wq, e.wk, e.wv, batch, t, t,
                                 cfg.n_heads, pad_mask, false, capture);
    if (capture) record_tap(tap, att.probs, batch, cfg.n_heads, t, t);
    Tensor z = matmul(tape, att.context, e.wo);
    if (train) z = dropout(tape, z, cfg.dropout, *rng, true);
    x = layer_norm(tape, add(tape, x, z), e.ln1_gain, e.ln1_bias, 1e-5f);
    Tensor f = matmul(tape, x, e.ffn_w1);
    f = gelu(tape, f);
    f = matmul(tape, f, e.ffn_w2);
    if (train) f = dropout(tape, f, cfg.dropout, *rng, true);
    x = layer_norm(tape, add(tape, x, f), e.ln2_gain, e.ln2_bias, 1e-5f);
  }
  return x;
}

Tensor decoder_stack(Tape* tape, const ModelParams& model,
                     const std::vector<int>& tgt_ids, int batch, int t_tgt,
                     const Tensor& memory_values, int t_src,
                     const std::vector<std::uint8_t>& src_key_pad,
                     bool train, Rng* rng, AttentionTap* tap) {
  const ModelConfig& cfg = model.config;
  check_token_rows(tgt_ids, cfg.vocab_size);
  require_rng(train, rng);
  if (memory_values.dim(1) != cfg.d_model) {
    throw std::invalid_argument("decoder: memory width does not match d_model");
  }
  if (memory_values.dim(0) != batch * t_src) {
    throw std::invalid_argument("decoder: memory row count mismatch");
  }
  const Tensor pe = sinusoidal_pe(t_tgt, cfg.d_model);
  static const std::vector<std::uint8_t> kNoMask;
  Tensor x = embedding_gather(tape, model.tgt_embedding, tgt_ids);
  x = add_position(tape, x, pe, batch);
  if (train) x = dropout(tape, x, cfg.dropout, *rng, true);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const DecoderLayerParams& d = model.decoder[static_cast<std::size_t>(l)];
    const bool cap_self = tap && tap->site == AttentionTap::Site::DecoderSelf && tap->layer == l;
    AttentionOut self_att = mha_block(tape, x, x, d.wq, d.wk, d.wv, batch, t_tgt,
                                      t_tgt, cfg.n_heads, kNoMask, true, cap_self);
    if (cap_self) record_tap(tap, self_att.probs, batch, cfg.n_heads, t_tgt, t_tgt);
    Tensor z = matmul(tape, self_att.context, d.wo);
    if (train) z = dropout(tape, z, cfg.dropout, *rng, true);
    x = layer_norm(tape, add(tape, x, z), d.ln1_gain, d.ln1_bias, 1e-5f);

    const bool cap_cross = tap && tap->site == AttentionTap::Site::DecoderCross && tap->layer == l;
    Tensor cq = matmul(tape, x, d.cross_wq);
    Tensor ck = matmul(tape, memory_values, d.cross_wk);
    Tensor cv = matmul(tape, memory_values, d.cross_wv);
    std::shared_ptr<std::vector<float>> cross_probs;
    Tensor cctx = attention_heads(tape, cq, ck, cv, batch, t_tgt, t_src,
                                  cfg.n_heads, src_key_pad, false,
                                  cap_cross ? &cross_probs : nullptr);
    if (cap_cross) record_tap(tap, cross_probs, batch, cfg.n_heads, t_tgt, t_src);
    Tensor cz = matmul(tape, cctx, d.cross_wo);
    if (train) cz = dropout(tape, cz, cfg.dropout, *rng, true);
    x = layer_norm(tape, add(tape, x, cz), d.ln2_gain, d.ln2_bias, 1e-5f);

    Tensor f = matmul(tape, x, d.ffn_w1);
    f = gelu(tape, f);
    f = matmul(tape, f, d.ffn_w2);
    if (train) f = dropout(tape, f, cfg.dropout, *rng, true);
    x = layer_norm(tape, add(tape, x, f), d.ln3_gain, d.ln3_bias, 1e-5f);
  }
  Tensor logits = matmul(tape, x, model.generator_w);
  logits = add_row(tape, logits, model.generator_b);
  return logits;
}

std::vector<Memory> encode(const ModelParams& model, const Batch& batch,
                           bool train_mode, Rng* rng, AttentionTap* tap) {
  const ModelConfig& cfg = model.config;
  if (batch.max_len > cfg.t_max + 2) {
    throw std::invalid_argument("encode: sequence longer than t_max allows");
  }
  for (int r = 0; r < batch.size; ++r) {
    for (int c = 0; c < batch.max_len; ++c) {
      const bool is_pad = batch.at(r, c) == Vocabulary::pad_id;
      const bool masked = batch.pad_mask[static_cast<std::size_t>(r) * batch.max_len + c] != 0;
      if (is_pad != masked) {
        throw std::invalid_argument("encode: pad mask inconsistent with pad tokens");
      }
    }
  }
  Tensor h = encoder_stack(nullptr, model, batch.token_ids, batch.pad_mask,
                           batch.size, batch.max_len, train_mode, rng, tap);
  std::vector<Memory> memories(static_cast<std::size_t>(batch.size));
  const float* ph = h.data();
  for (int r = 0; r < batch.size; ++r) {
    Memory& m = memories[static_cast<std::size_t>(r)];
    m.length = batch.lengths[static_cast<std::size_t>(r)];
    m.d_model = cfg.d_model;
    m.values.assign(ph + static_cast<std::ptrdiff_t>(r) * batch.max_len * cfg.d_model,
                    ph + (static_cast<std::ptrdiff_t>(r) * batch.max_len + m.length) * cfg.d_model);
    m.src_pad_mask.assign(static_cast<std::size_t>(m.length), 0);
  }
  return memories;
}

PackedMemory PackedMemory::pack(const std::vector<const Memory*>& memories) {
  if (memories.empty()) throw std::invalid_argument("pack: no memories");
  PackedMemory p;
  p.batch = static_cast<int>(memories.size());
  p.d_model = memories[0]->d_model;
  for (const Memory* m : memories) {
    if (m->d_model != p.d_model) {
      throw std::invalid_argument("pack: memory widths disagree");
    }
    p.t_src = std::max(p.t_src, m->length);
  }
  p.values = Tensor::zeros({p.batch * p.t_src, p.d_model});
  p.key_pad.assign(static_cast<std::size_t>(p.batch) * p.t_src, 1);
  float* pv = p.values.data();
  for (int b = 0; b < p.batch; ++b) {
    const Memory* m = memories[static_cast<std::size_t>(b)];
    std::memcpy(pv + static_cast<std::ptrdiff_t>(b) * p.t_src * p.d_model,
                m->values.data(),
                m->values.size() * sizeof(float));
    for (int i = 0; i < m->length; ++i) {
      p.key_pad[static_cast<std::size_t>(b) * p.t_src + i] = m->src_pad_mask[static_cast<std::size_t>(i)];
    }
  }
  return p;
}

PackedMemory PackedMemory::pack(const std::vector<Memory>& memories) {
  std::vector<const Memory*> ptrs;
  ptrs.reserve(memories.size());
  for (const Memory& m : memories) ptrs.push_back(&m);
  return pack(ptrs);
}

Tensor decoder_forward(const ModelParams& model, const Batch& tgt_prefix,
                       const PackedMemory& memory, bool train_mode, Rng* rng,
                       Tape* tape, AttentionTap* tap) {
  if (memory.d_model != model.config.d_model) {
    throw std::invalid_argument("decoder_forward: d_model mismatch with memory");
  }
  if (memory.batch != tgt_prefix.size) {
    throw std::invalid_argument("decoder_forward: batch size mismatch with memory");
  }
  return decoder_stack(tape, model, tgt_prefix.token_ids, tgt_prefix.size,
                       tgt_prefix.max_len, memory.values, memory.t_src,
                       memory.key_pad, train_mode, rng, tap);
}

}  // namespace moble
