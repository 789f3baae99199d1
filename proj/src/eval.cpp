#include "moble/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <thread>

namespace moble {

std::vector<DecodeResult> greedy_decode(const ModelParams& decoder_model,
                                        const std::vector<Memory>& memories,
                                        int t_max) {
  const int n = static_cast<int>(memories.size());
  std::vector<DecodeResult> results(static_cast<std::size_t>(n));
  if (n == 0) return results;
  for (const Memory& m : memories) {
    if (m.d_model != decoder_model.config.d_model) {
      throw std::invalid_argument("greedy_decode: memory width mismatch");
    }
  }
  std::vector<int> active(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = i;
  std::vector<std::vector<int>> prefixes(static_cast<std::size_t>(n),
                                         std::vector<int>{Vocabulary::bos_id});
  const int vocab = decoder_model.config.vocab_size;

  while (!active.empty()) {
    const int t = static_cast<int>(prefixes[static_cast<std::size_t>(active[0])].size());
    std::vector<const Memory*> mem_ptrs;
    mem_ptrs.reserve(active.size());
    for (const int i : active) mem_ptrs.push_back(&memories[static_cast<std::size_t>(i)]);
    const PackedMemory packed = PackedMemory::pack(mem_ptrs);

    Batch prefix_batch;
    prefix_batch.size = static_cast<int>(active.size());
    prefix_batch.max_len = t;
    prefix_batch.token_ids.resize(static_cast<std::size_t>(prefix_batch.size) * t);
    prefix_batch.pad_mask.assign(static_cast<std::size_t>(prefix_batch.size) * t, 0);
    prefix_batch.lengths.assign(static_cast<std::size_t>(prefix_batch.size), t);
    for (std::size_t r = 0; r < active.size(); ++r) {
      const auto& p = prefixes[static_cast<std::size_t>(active[r])];
      std::copy(p.begin(), p.end(), prefix_batch.token_ids.begin() + static_cast<std::ptrdiff_t>(r) * t);
    }

    const Tensor logits = decoder_forward(decoder_model, prefix_batch, packed, false);
    const float* pl = logits.data();

    std::vector<int> still_active;
    still_active.reserve(active.size());
    for (std::size_t r = 0; r < active.size(); ++r) {
      const int i = active[r];
      const float* row = pl + (static_cast<std::ptrdiff_t>(r) * t + (t - 1)) * vocab;
      int best = 0;
      float best_val = row[0];
      for (int j = 1; j < vocab; ++j) {
        if (row[j] > best_val) {
          best_val = row[j];
          best = j;
        }
      }
      DecodeResult& res = results[static_cast<std::size_t>(i)];
      res.ids.push_back(best);
      prefixes[static_cast<std::size_t>(i)].push_back(best);
      if (best == Vocabulary::eos_id) {
        res.stop = DecodeResult::Stop::Eos;
      } else if (static_cast<int>(res.ids.size()) >= decoder_model.config.t_max ||
                 static_cast<int>(res.ids.size()) >= t_max) {
        res.stop = DecodeResult::Stop::TMax;
      } else {
        still_active.push_back(i);
      }
    }
    active = std::move(still_active);
  }
  return results;
}

std::vector<DecodeResult> cross_decode(const ModelParams& encoder_model,
                                       const ModelParams& decoder_model,
                                       const Batch& batch) {
  if (encoder_model.config.d_model != decoder_model.config.d_model ||
      encoder_model.config.t_max != decoder_model.config.t_max) {
    throw std::invalid_argument("cross_decode: model configurations are incompatible");
  }
  const std::vector<Memory> memories = encode(encoder_model, batch, false);
  return greedy_decode(decoder_model, memories, decoder_model.config.t_max);
}

double metric_exact(const std::vector<std::string>& hyps,
                    const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("metric_exact: list sizes differ");
  }
  if (hyps.empty()) return 0.0;
  std::size_t eq = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    if (hyps[i] == refs[i]) ++eq;
  }
  return 100.0 * static_cast<double>(eq) / static_cast<double>(hyps.size());
}

namespace {

// "strip BOS; truncate at first EOS/pad"
std::vector<int> normalize_ids(const std::vector<int>& ids) {
  std::vector<int> out;
  std::size_t i = 0;
  if (!ids.empty() && ids[0] == Vocabulary::bos_id) i = 1;
  for (; i < ids.size(); ++i) {
    if (ids[i] == Vocabulary::eos_id || ids[i] == Vocabulary::pad_id) break;
    out.push_back(ids[i]);
  }
  return out;
}

}  // namespace

double metric_token_acc_pair(const std::vector<int>& hyp, const std::vector<int>& ref) {
  const std::vector<int> h = normalize_ids(hyp);
  const std::vector<int> r = normalize_ids(ref);
  const std::size_t len = std::max(h.size(), r.size());
  if (len == 0) return 1.0;
  std::size_t eq = 0;
  for (std::size_t i = 0; i < len; ++i) {
    if (i < h.size() && i < r.size() && h[i] == r[i]) ++eq;
  }
  return static_cast<double>(eq) / static_cast<double>(len);
}

double metric_token_acc(const std::vector<std::vector<int>>& hyps,
                        const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("metric_token_acc: list sizes differ");
  }
  if (hyps.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    s += metric_token_acc_pair(hyps[i], refs[i]);
  }
  return 100.0 * s / static_cast<double>(hyps.size());
}

int levenshtein_distance(const std::string& a, const std::string& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double metric_levsim(const std::string& hyp, const std::string& ref) {
  const int d = levenshtein_distance(hyp, ref);
  const std::size_t denom = std::max<std::size_t>(1, std::max(hyp.size(), ref.size()));
  return 100.0 * (1.0 - static_cast<double>(d) / static_cast<double>(denom));
}

double metric_levsim_mean(const std::vector<std::string>& hyps,
                          const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("metric_levsim: list sizes differ");
  }
  if (hyps.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) s += metric_levsim(hyps[i], refs[i]);
  return s / static_cast<double>(hyps.size());
}

std::vector<std::string> batch_references(const Batch& batch, const Vocabulary& vocab) {
  std::vector<std::string> refs;
  refs.reserve(static_cast<std::size_t>(batch.size));
  for (int r = 0; r < batch.size; ++r) {
    std::vector<int> row(batch.token_ids.begin() + static_cast<std::ptrdiff_t>(r) * batch.max_len,
                         batch.token_ids.begin() + static_cast<std::ptrdiff_t>(r + 1) * batch.max_len);
    refs.push_back(detokenize(row, vocab));
  }
  return refs;
}

MetricsRow score_decode(const std::string& encoder_id, const std::string& decoder_id,
                        const std::vector<DecodeResult>& hyps, const Batch& batch,
                        const Vocabulary& vocab) {
  if (static_cast<int>(hyps.size()) != batch.size) {
    throw std::invalid_argument("score_decode: decode count mismatch");
  }
  std::vector<std::string> hyp_strings, ref_strings;
  std::vector<std::vector<int>> hyp_ids, ref_ids;
  hyp_strings.reserve(hyps.size());
  for (const DecodeResult& h : hyps) {
    hyp_strings.push_back(detokenize(h.ids, vocab));
    hyp_ids.push_back(h.ids);
  }
  ref_strings = batch_references(batch, vocab);
  for (int r = 0; r < batch.size; ++r) {
    ref_ids.emplace_back(batch.token_ids.begin() + static_cast<std::ptrdiff_t>(r) * batch.max_len,
                         batch.token_ids.begin() + static_cast<std::ptrdiff_t>(r + 1) * batch.max_len);
  }
  MetricsRow row;
  row.encoder_id = encoder_id;
  row.decoder_id = decoder_id;
  row.n_samples = batch.size;
  row.exact_pct = metric_exact(hyp_strings, ref_strings);
  row.token_pct = metric_token_acc(hyp_ids, ref_ids);
  row.levsim_pct = metric_levsim_mean(hyp_strings, ref_strings);
  return row;
}

MetricsRow merge_rows(const std::vector<MetricsRow>& parts) {
  if (parts.empty()) throw std::invalid_argument("merge_rows: nothing to merge");
  MetricsRow out;
  out.encoder_id = parts[0].encoder_id;
  out.decoder_id = parts[0].decoder_id;
  double exact = 0.0, token = 0.0, lev = 0.0;
  int n = 0;
  for (const MetricsRow& p : parts) {
    exact += p.exact_pct * p.n_samples;
    token += p.token_pct * p.n_samples;
    lev += p.levsim_pct * p.n_samples;
    n += p.n_samples;
  }
  out.n_samples = n;
  out.exact_pct = exact / n;
  out.token_pct = token / n;
  out.levsim_pct = lev / n;
  return out;
}

namespace {

int eval_thread_budget(int jobs) {
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads <= 0) threads = 1;
  if (const char* env = std::getenv("MOBLE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) threads = std::min(threads, cap);
  }
  return std::max(1, std::min(threads, jobs));
}

}  // namespace

std::vector<MetricsRow> pair_matrix(const std::vector<NamedModel>& models,
                                    const std::vector<Batch>& batches) {
  if (models.size() < 2) {
    throw std::invalid_argument("pair_matrix: need at least two models");
  }
  if (batches.empty()) throw std::invalid_argument("pair_matrix: no batches");
  const Vocabulary& vocab = build_vocab();
  const int n_models = static_cast<int>(models.size());

  // Memories are a function of the encoder alone; compute them once per
  // encoder and share across all decoders.
  std::vector<std::vector<std::vector<Memory>>> memories(
      static_cast<std::size_t>(n_models));
  for (int e = 0; e < n_models; ++e) {
    memories[static_cast<std::size_t>(e)].reserve(batches.size());
    for (const Batch& b : batches) {
      memories[static_cast<std::size_t>(e)].push_back(encode(*models[static_cast<std::size_t>(e)].model, b, false));
    }
  }

  struct Job {
    int enc, dec;
  };
  std::vector<Job> jobs;
  for (int e = 0; e < n_models; ++e) {
    for (int d = 0; d < n_models; ++d) jobs.push_back({e, d});
  }
  std::vector<MetricsRow> rows(jobs.size());

  const int n_threads = eval_thread_budget(static_cast<int>(jobs.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) break;
      const Job job = jobs[j];
      const NamedModel& enc = models[static_cast<std::size_t>(job.enc)];
      const NamedModel& dec = models[static_cast<std::size_t>(job.dec)];
      std::vector<MetricsRow> parts;
      for (std::size_t b = 0; b < batches.size(); ++b) {
        const auto hyps = greedy_decode(*dec.model,
                                        memories[static_cast<std::size_t>(job.enc)][b],
                                        dec.model->config.t_max);
        parts.push_back(score_decode(enc.id, dec.id, hyps, batches[b], vocab));
      }
      rows[j] = merge_rows(parts);
    }
  };
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return rows;
}

double binding_advantage(const std::vector<MetricsRow>& rows,
                         const std::map<std::string, std::string>& key_class) {
  double self_sum = 0.0, cross_sum = 0.0;
  int self_n = 0, cross_n = 0;
  for (const MetricsRow& r : rows) {
    const auto ec = key_class.find(r.encoder_id);
    const auto dc = key_class.find(r.decoder_id);
    if (ec == key_class.end() || dc == key_class.end()) {
      throw std::invalid_argument("binding_advantage: model missing from key classes");
    }
    if (ec->second == dc->second) {
      self_sum += r.token_pct;
      ++self_n;
    } else {
      cross_sum += r.token_pct;
      ++cross_n;
    }
  }
  if (self_n == 0 || cross_n == 0) {
    throw std::invalid_argument("binding_advantage: need both self and cross rows");
  }
  return self_sum / self_n - cross_sum / cross_n;
}

}  // namespace moble
