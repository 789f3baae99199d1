#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "moble/checkpoint.hpp"
#include "moble/eval.hpp"
#include "moble/model.hpp"
#include "moble/trainer.hpp"

namespace moble {

// Resolved experiment configuration; defaults reproduce the five-model desk
// protocol (seeds 111/222/333 + clone + same-seed retrain).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {111, 222, 333};
  std::uint64_t corpus_seed = 90210;
  std::uint64_t test_corpus_seed = 90211;
  int train_size = 6000;
  int test_size = 800;
  int len_lo = 8;
  int len_hi = 30;
  int eval_batches = 6;
  bool run_threatlab = true;
  int adapter_pairs = 512;
  double adapter_lambda = 1e-3;
  std::vector<int> quant_bits = {8, 6, 4, 3};
  double noise_sigma = 0.05;
  std::string device_label = "cpu";

  void validate() const;
};

// Flat key=value config file ('#' comments). Unknown keys are an error;
// missing keys keep their defaults.
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

std::string model_name_for_seed(const RunConfig& cfg, std::uint64_t seed);

// Stage entry points; all operate on files under `out_dir` so the CLI can
// run them incrementally. Each throws on failure.
void stage_gen_data(const RunConfig& cfg, const std::string& out_dir);
std::vector<double> stage_train_model(const RunConfig& cfg, const std::string& out_dir,
                                      std::uint64_t seed, const std::string& name);
void stage_train_all(const RunConfig& cfg, const std::string& out_dir);
void stage_clone(const std::string& out_dir, const std::string& src_name,
                 const std::string& dst_name);
nlohmann::json stage_eval_matrix(const RunConfig& cfg, const std::string& out_dir);
nlohmann::json stage_diagnose(const RunConfig& cfg, const std::string& out_dir);
nlohmann::json stage_threatlab(const RunConfig& cfg, const std::string& out_dir,
                               const std::string& pair_arg = "",
                               int adapter_pairs_override = 0);
// Perturbation sweep of self-decoding under quantization/noise.
nlohmann::json stage_perturb(const RunConfig& cfg, const std::string& out_dir,
                             int bits_override = 0, double sigma_override = -1.0);
nlohmann::json stage_report(const RunConfig& cfg, const std::string& out_dir);

// gen-data -> train x4 -> clone -> eval-matrix -> diagnose -> threatlab ->
// perturb -> report. Returns the final report.
nlohmann::json run_experiment(const RunConfig& cfg, const std::string& out_dir);

// Canonical model names for the five-model protocol.
std::vector<std::string> canonical_model_names(const RunConfig& cfg);

// The first `eval_batches` test batches in unshuffled corpus order.
std::vector<Batch> shared_eval_batches(const RunConfig& cfg, const std::string& out_dir);

struct LoadedModelSet {
  std::vector<LoadedCheckpoint> checkpoints;
  std::vector<NamedModel> named;  // views into `checkpoints`
};
LoadedModelSet load_model_set(const RunConfig& cfg, const std::string& out_dir);

extern const char* kVersionStamp;

}  // namespace moble
