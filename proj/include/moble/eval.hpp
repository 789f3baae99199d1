#pragma once

#include <map>
#include <string>
#include <vector>

#include "moble/data.hpp"
#include "moble/model.hpp"

namespace moble {

struct DecodeResult {
  // Tokens generated after <bos>, including the terminal <eos> when one was
  // emitted; never contains pad and never exceeds t_max tokens.
  std::vector<int> ids;
  enum class Stop { Eos, TMax } stop = Stop::TMax;
};

struct MetricsRow {
  std::string encoder_id;
  std::string decoder_id;
  double exact_pct = 0.0;
  double token_pct = 0.0;
  double levsim_pct = 0.0;
  int n_samples = 0;
};

struct NamedModel {
  std::string id;
  const ModelParams* model = nullptr;
};

// Greedy decoding from <bos>; each sequence stops at its own first <eos> or
// after t_max tokens. Ties in the argmax go to the lowest token id. Runs in
// evaluation mode (no dropout); deterministic.
std::vector<DecodeResult> greedy_decode(const ModelParams& decoder_model,
                                        const std::vector<Memory>& memories,
                                        int t_max);

// Fixes the memory and source key-padding mask produced by `encoder_model`
// and runs `decoder_model` over them with the same greedy procedure.
std::vector<DecodeResult> cross_decode(const ModelParams& encoder_model,
                                       const ModelParams& decoder_model,
                                       const Batch& batch);

double metric_exact(const std::vector<std::string>& hyps,
                    const std::vector<std::string>& refs);

// Strip bos, truncate at the first eos/pad, pad the shorter side, then
// average token-wise equality per pair and across the set.
double metric_token_acc_pair(const std::vector<int>& hyp, const std::vector<int>& ref);
double metric_token_acc(const std::vector<std::vector<int>>& hyps,
                        const std::vector<std::vector<int>>& refs);

int levenshtein_distance(const std::string& a, const std::string& b);
// 100 * (1 - d_L / max(1, max(|hyp|, |ref|)))
double metric_levsim(const std::string& hyp, const std::string& ref);
double metric_levsim_mean(const std::vector<std::string>& hyps,
                          const std::vector<std::string>& refs);

// Evaluates every ordered (encoder -> decoder) pair, self pairs included, on
// the same shared batches. MOBLE_THREADS caps the pair-level parallelism.
std::vector<MetricsRow> pair_matrix(const std::vector<NamedModel>& models,
                                    const std::vector<Batch>& batches);

// Computes exact/token/levsim for one decode run against batch references.
MetricsRow score_decode(const std::string& encoder_id, const std::string& decoder_id,
                        const std::vector<DecodeResult>& hyps, const Batch& batch,
                        const Vocabulary& vocab);
MetricsRow merge_rows(const std::vector<MetricsRow>& parts);

// Mean self token accuracy minus mean cross token accuracy, in percentage
// points. `key_class` maps model id -> parameter-identity class so clones
// and same-seed retrains of an encoder count as "self".
double binding_advantage(const std::vector<MetricsRow>& rows,
                         const std::map<std::string, std::string>& key_class);

std::vector<std::string> batch_references(const Batch& batch, const Vocabulary& vocab);

}  // namespace moble
