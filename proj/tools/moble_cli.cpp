// Command-line driver for the five-model decoder-binding experiment:
// data generation, training, cloning, the ordered pair matrix, attention
// diagnostics, adapter/perturbation probes, and report aggregation.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "moble/experiment.hpp"

namespace {

moble::RunConfig resolve_config(const std::string& config_path,
                                const std::string& device_label) {
  moble::RunConfig cfg;
  if (!config_path.empty()) cfg = moble::load_run_config(config_path);
  if (!device_label.empty()) cfg.device_label = device_label;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moble: model-bound latent exchange experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_dir = "runs/default";
  std::string device_label;
  app.add_option("--config", config_path, "experiment config file (flat key = value)");
  app.add_option("--out", out_dir, "output directory for run artifacts");
  app.add_option("--device-label", device_label, "informational device label for reports");

  auto* cmd_gen = app.add_subcommand("gen-data", "generate train/test corpora");
  auto* cmd_train = app.add_subcommand("train", "train one model from the corpus");
  std::uint64_t train_seed = 111;
  std::string train_name;
  cmd_train->add_option("--seed", train_seed, "model seed (drives init, dropout, shuffling)");
  cmd_train->add_option("--name", train_name, "checkpoint name (default: position in seed list)");

  auto* cmd_clone = app.add_subcommand("clone", "copy a checkpoint byte-for-byte");
  std::string clone_pair = "M1,M1_CLONE";
  cmd_clone->add_option("--pairs", clone_pair, "source,destination model names");

  auto* cmd_eval = app.add_subcommand("eval-matrix", "run all ordered encoder->decoder pairs");
  auto* cmd_diag = app.add_subcommand("diagnose", "weight/attention divergence diagnostics");

  auto* cmd_attack = app.add_subcommand("attack", "fit and evaluate a linear adapter");
  std::string attack_pair;
  int adapter_pairs = 0;
  cmd_attack->add_option("--pairs", attack_pair, "encoder,decoder model names (default M1,M2)");
  cmd_attack->add_option("--adapter-pairs", adapter_pairs, "number of (M, H) training pairs");

  auto* cmd_perturb = app.add_subcommand("perturb", "latent quantization/noise sweep");
  int bits = 0;
  double sigma = -1.0;
  cmd_perturb->add_option("--bits", bits, "quantizer bits (overrides config sweep)");
  cmd_perturb->add_option("--sigma", sigma, "gaussian noise scale (overrides config)");

  auto* cmd_report = app.add_subcommand("report", "aggregate stage artifacts into report.json");
  auto* cmd_all = app.add_subcommand("run-all", "full pipeline: data, training, evaluation, report");

  CLI11_PARSE(app, argc, argv);

  try {
    const moble::RunConfig cfg = resolve_config(config_path, device_label);
    if (cmd_gen->parsed()) {
      moble::stage_gen_data(cfg, out_dir);
      std::printf("corpora written to %s\n", out_dir.c_str());
    } else if (cmd_train->parsed()) {
      const std::string name =
          train_name.empty() ? moble::model_name_for_seed(cfg, train_seed) : train_name;
      const auto losses = moble::stage_train_model(cfg, out_dir, train_seed, name);
      std::printf("trained %s (seed %llu); epoch losses:", name.c_str(),
                  static_cast<unsigned long long>(train_seed));
      for (const double l : losses) std::printf(" %.4f", l);
      std::printf("\n");
    } else if (cmd_clone->parsed()) {
      const auto comma = clone_pair.find(',');
      if (comma == std::string::npos) throw std::runtime_error("clone: --pairs expects src,dst");
      moble::stage_clone(out_dir, clone_pair.substr(0, comma), clone_pair.substr(comma + 1));
      std::printf("cloned %s\n", clone_pair.c_str());
    } else if (cmd_eval->parsed()) {
      const auto result = moble::stage_eval_matrix(cfg, out_dir);
      std::printf("pair matrix: %zu rows, binding advantage %.2f\n",
                  result.at("rows").size(), result.at("binding_advantage").get<double>());
    } else if (cmd_diag->parsed()) {
      const auto result = moble::stage_diagnose(cfg, out_dir);
      std::printf("diagnostics: %zu pairs\n", result.at("pairs").size());
    } else if (cmd_attack->parsed()) {
      const auto result = moble::stage_threatlab(cfg, out_dir, attack_pair, adapter_pairs);
      const auto& row = result.at("adapter_attacks").at(0);
      std::printf("adapter %s->%s: exact %.2f token %.2f levsim %.2f\n",
                  row.at("encoder").get<std::string>().c_str(),
                  row.at("decoder").get<std::string>().c_str(),
                  row.at("exact_pct").get<double>(), row.at("token_pct").get<double>(),
                  row.at("levsim_pct").get<double>());
    } else if (cmd_perturb->parsed()) {
      const auto result = moble::stage_perturb(cfg, out_dir, bits, sigma);
      std::printf("perturbation sweep rows: %zu\n", result.at("quantization_sweep").size());
    } else if (cmd_report->parsed()) {
      moble::stage_report(cfg, out_dir);
      std::printf("report written to %s/report.json\n", out_dir.c_str());
    } else if (cmd_all->parsed()) {
      moble::run_experiment(cfg, out_dir);
      std::printf("run complete; report at %s/report.json\n", out_dir.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
