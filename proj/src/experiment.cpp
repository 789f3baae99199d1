#include "moble/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "moble/diagnostics.hpp"
#include "moble/threatlab.hpp"

namespace fs = std::filesystem;

namespace moble {

#ifdef MOBLE_GIT_REV
const char* kVersionStamp = "moble 0.1.0 (" MOBLE_GIT_REV ")";
#else
const char* kVersionStamp = "moble 0.1.0";
#endif

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (seeds.empty()) throw std::invalid_argument("run config: need at least one seed");
  if (train_size <= 0 || test_size <= 0) {
    throw std::invalid_argument("run config: corpus sizes must be positive");
  }
  if (len_lo < 0 || len_lo > len_hi) {
    throw std::invalid_argument("run config: bad length bounds");
  }
  if (eval_batches <= 0) throw std::invalid_argument("run config: eval_batches must be positive");
  if (adapter_pairs <= 0) throw std::invalid_argument("run config: adapter_pairs must be positive");
  if (adapter_lambda < 0.0) throw std::invalid_argument("run config: adapter_lambda must be >= 0");
  for (const int b : quant_bits) {
    if (b < 2 || b > 16) throw std::invalid_argument("run config: quant bits must lie in [2,16]");
  }
  if (noise_sigma < 0.0) throw std::invalid_argument("run config: noise_sigma must be >= 0");
}

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (const char c : s) {
    if (c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

int thread_budget(int jobs) {
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads <= 0) threads = 1;
  if (const char* env = std::getenv("MOBLE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) threads = std::min(threads, cap);
  }
  return std::max(1, std::min(threads, jobs));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

fs::path models_dir(const std::string& out_dir) { return fs::path(out_dir) / "models"; }
fs::path ckpt_path(const std::string& out_dir, const std::string& name) {
  return models_dir(out_dir) / (name + ".ckpt");
}

void write_json_file(const nlohmann::json& j, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  return j;
}

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config: line " + std::to_string(line_no) + " is not key = value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    try {
      if (key == "d_model") cfg.model.d_model = std::stoi(value);
      else if (key == "n_layers") cfg.model.n_layers = std::stoi(value);
      else if (key == "n_heads") cfg.model.n_heads = std::stoi(value);
      else if (key == "d_ff") cfg.model.d_ff = std::stoi(value);
      else if (key == "dropout") cfg.model.dropout = std::stof(value);
      else if (key == "t_max") cfg.model.t_max = std::stoi(value);
      else if (key == "vocab_size") cfg.model.vocab_size = std::stoi(value);
      else if (key == "lr") cfg.train.lr = std::stof(value);
      else if (key == "weight_decay") cfg.train.weight_decay = std::stof(value);
      else if (key == "batch_size") cfg.train.batch_size = std::stoi(value);
      else if (key == "epochs") cfg.train.epochs = std::stoi(value);
      else if (key == "clip_norm") cfg.train.clip_norm = std::stof(value);
      else if (key == "beta1") cfg.train.beta1 = std::stof(value);
      else if (key == "beta2") cfg.train.beta2 = std::stof(value);
      else if (key == "adam_eps") cfg.train.adam_eps = std::stof(value);
      else if (key == "seeds") {
        cfg.seeds.clear();
        for (const auto& s : split_csv(value)) cfg.seeds.push_back(std::stoull(s));
      } else if (key == "corpus_seed") cfg.corpus_seed = std::stoull(value);
      else if (key == "test_corpus_seed") cfg.test_corpus_seed = std::stoull(value);
      else if (key == "train_size") cfg.train_size = std::stoi(value);
      else if (key == "test_size") cfg.test_size = std::stoi(value);
      else if (key == "len_lo") cfg.len_lo = std::stoi(value);
      else if (key == "len_hi") cfg.len_hi = std::stoi(value);
      else if (key == "eval_batches") cfg.eval_batches = std::stoi(value);
      else if (key == "run_threatlab") cfg.run_threatlab = (value == "true" || value == "1");
      else if (key == "adapter_pairs") cfg.adapter_pairs = std::stoi(value);
      else if (key == "adapter_lambda") cfg.adapter_lambda = std::stod(value);
      else if (key == "quant_bits") {
        cfg.quant_bits.clear();
        for (const auto& s : split_csv(value)) cfg.quant_bits.push_back(std::stoi(s));
      } else if (key == "noise_sigma") cfg.noise_sigma = std::stod(value);
      else if (key == "device_label") cfg.device_label = value;
      else throw std::runtime_error("config: unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw std::runtime_error("config: bad value for '" + key + "' on line " +
                               std::to_string(line_no));
    }
  }
  cfg.validate();
  return cfg;
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("config: cannot open " + path);
  out << "# moble experiment configuration\n";
  out << "d_model = " << cfg.model.d_model << "\n";
  out << "n_layers = " << cfg.model.n_layers << "\n";
  out << "n_heads = " << cfg.model.n_heads << "\n";
  out << "d_ff = " << cfg.model.d_ff << "\n";
  out << "dropout = " << fmt_double(cfg.model.dropout) << "\n";
  out << "t_max = " << cfg.model.t_max << "\n";
  out << "vocab_size = " << cfg.model.vocab_size << "\n";
  out << "lr = " << fmt_double(cfg.train.lr) << "\n";
  out << "weight_decay = " << fmt_double(cfg.train.weight_decay) << "\n";
  out << "batch_size = " << cfg.train.batch_size << "\n";
  out << "epochs = " << cfg.train.epochs << "\n";
  out << "clip_norm = " << fmt_double(cfg.train.clip_norm) << "\n";
  out << "beta1 = " << fmt_double(cfg.train.beta1) << "\n";
  out << "beta2 = " << fmt_double(cfg.train.beta2) << "\n";
  out << "adam_eps = " << fmt_double(cfg.train.adam_eps) << "\n";
  out << "seeds = ";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    out << (i ? "," : "") << cfg.seeds[i];
  }
  out << "\n";
  out << "corpus_seed = " << cfg.corpus_seed << "\n";
  out << "test_corpus_seed = " << cfg.test_corpus_seed << "\n";
  out << "train_size = " << cfg.train_size << "\n";
  out << "test_size = " << cfg.test_size << "\n";
  out << "len_lo = " << cfg.len_lo << "\n";
  out << "len_hi = " << cfg.len_hi << "\n";
  out << "eval_batches = " << cfg.eval_batches << "\n";
  out << "run_threatlab = " << (cfg.run_threatlab ? "true" : "false") << "\n";
  out << "adapter_pairs = " << cfg.adapter_pairs << "\n";
  out << "adapter_lambda = " << fmt_double(cfg.adapter_lambda) << "\n";
  out << "quant_bits = ";
  for (std::size_t i = 0; i < cfg.quant_bits.size(); ++i) {
    out << (i ? "," : "") << cfg.quant_bits[i];
  }
  out << "\n";
  out << "noise_sigma = " << fmt_double(cfg.noise_sigma) << "\n";
  out << "device_label = " << cfg.device_label << "\n";
  if (!out) throw std::runtime_error("config: write failed for " + path);
}

std::string model_name_for_seed(const RunConfig& cfg, std::uint64_t seed) {
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    if (cfg.seeds[i] == seed) return "M" + std::to_string(i + 1);
  }
  return "M_seed" + std::to_string(seed);
}

std::vector<std::string> canonical_model_names(const RunConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    names.push_back("M" + std::to_string(i + 1));
  }
  names.push_back("M1_CLONE");
  names.push_back("M1_SAMESEED");
  return names;
}

void stage_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const Vocabulary& vocab = build_vocab();
  const auto train_corpus = generate_corpus(cfg.corpus_seed, cfg.train_size,
                                            cfg.len_lo, cfg.len_hi, vocab);
  const auto test_corpus = generate_corpus(cfg.test_corpus_seed, cfg.test_size,
                                           cfg.len_lo, cfg.len_hi, vocab);
  save_corpus(train_corpus, (fs::path(out_dir) / "corpus_train.txt").string());
  save_corpus(test_corpus, (fs::path(out_dir) / "corpus_test.txt").string());
  save_run_config(cfg, (fs::path(out_dir) / "config.resolved.txt").string());
}

std::vector<double> stage_train_model(const RunConfig& cfg, const std::string& out_dir,
                                      std::uint64_t seed, const std::string& name) {
  const Vocabulary& vocab = build_vocab();
  const auto corpus = load_corpus((fs::path(out_dir) / "corpus_train.txt").string());
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  // One stream drives init and dropout, in that order.
  Rng rng(seed);
  ModelParams model = init_model(cfg.model, seed, rng);
  const auto losses = train(model, corpus, tc, vocab, &rng,
                            [&name, &tc](int epoch, double loss) {
                              std::printf("[train %s] epoch %d/%d mean nll %.4f\n",
                                          name.c_str(), epoch, tc.epochs, loss);
                              std::fflush(stdout);
                            });
  CheckpointExtras extras;
  extras.train_config = train_config_to_json(tc);
  extras.epoch_losses = losses;
  extras.device_label = cfg.device_label;
  fs::create_directories(models_dir(out_dir));
  save_checkpoint(model, ckpt_path(out_dir, name).string(), extras);
  return losses;
}

void stage_clone(const std::string& out_dir, const std::string& src_name,
                 const std::string& dst_name) {
  clone_checkpoint(ckpt_path(out_dir, src_name).string(),
                   ckpt_path(out_dir, dst_name).string());
}

void stage_train_all(const RunConfig& cfg, const std::string& out_dir) {
  struct Job {
    std::uint64_t seed;
    std::string name;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    jobs.push_back({cfg.seeds[i], "M" + std::to_string(i + 1)});
  }
  jobs.push_back({cfg.seeds[0], "M1_SAMESEED"});

  const int n_threads = thread_budget(static_cast<int>(jobs.size()));
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::string first_error;
  auto worker = [&]() {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) break;
      try {
        stage_train_model(cfg, out_dir, jobs[j].seed, jobs[j].name);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (first_error.empty()) {
          first_error = "training " + jobs[j].name + ": " + e.what();
        }
      }
    }
  };
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (!first_error.empty()) throw std::runtime_error(first_error);
  stage_clone(out_dir, "M1", "M1_CLONE");
}

std::vector<Batch> shared_eval_batches(const RunConfig& cfg, const std::string& out_dir) {
  const Vocabulary& vocab = build_vocab();
  const auto test_corpus = load_corpus((fs::path(out_dir) / "corpus_test.txt").string());
  auto batches = make_batches(test_corpus, vocab, cfg.train.batch_size, std::nullopt);
  if (static_cast<int>(batches.size()) > cfg.eval_batches) {
    batches.resize(static_cast<std::size_t>(cfg.eval_batches));
  }
  return batches;
}

LoadedModelSet load_model_set(const RunConfig& cfg, const std::string& out_dir) {
  LoadedModelSet set;
  const auto names = canonical_model_names(cfg);
  set.checkpoints.reserve(names.size());
  for (const auto& name : names) {
    set.checkpoints.push_back(load_checkpoint(ckpt_path(out_dir, name).string()));
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    set.named.push_back({names[i], &set.checkpoints[i].model});
  }
  return set;
}

namespace {

nlohmann::json row_to_json(const MetricsRow& row) {
  return nlohmann::json{{"encoder", row.encoder_id},   {"decoder", row.decoder_id},
                        {"exact_pct", row.exact_pct},  {"token_pct", row.token_pct},
                        {"levsim_pct", row.levsim_pct},{"n_samples", row.n_samples}};
}

void write_matrix_csv(const std::vector<nlohmann::json>& rows, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "encoder,decoder,exact_pct,token_pct,levsim_pct,n\n";
  for (const auto& r : rows) {
    out << r.at("encoder").get<std::string>() << ','
        << r.at("decoder").get<std::string>() << ','
        << fmt_double(r.at("exact_pct").get<double>()) << ','
        << fmt_double(r.at("token_pct").get<double>()) << ','
        << fmt_double(r.at("levsim_pct").get<double>()) << ','
        << r.at("n_samples").get<int>() << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

nlohmann::json stage_eval_matrix(const RunConfig& cfg, const std::string& out_dir) {
  const auto batches = shared_eval_batches(cfg, out_dir);
  LoadedModelSet set = load_model_set(cfg, out_dir);
  const auto rows = pair_matrix(set.named, batches);

  std::map<std::string, std::string> key_class;
  std::map<std::string, std::string> cfg_hash;
  for (std::size_t i = 0; i < set.named.size(); ++i) {
    key_class[set.named[i].id] = param_digest(*set.named[i].model);
    cfg_hash[set.named[i].id] =
        set.checkpoints[i].metadata.value("config_hash", std::string("?"));
  }
  const double advantage = binding_advantage(rows, key_class);

  nlohmann::json out;
  out["rows"] = nlohmann::json::array();
  std::vector<nlohmann::json> row_json;
  for (const auto& r : rows) {
    nlohmann::json j = row_to_json(r);
    j["encoder_config_hash"] = cfg_hash.at(r.encoder_id);
    j["decoder_config_hash"] = cfg_hash.at(r.decoder_id);
    row_json.push_back(j);
    out["rows"].push_back(j);
  }
  out["binding_advantage"] = advantage;
  out["key_classes"] = key_class;
  out["n_batches"] = batches.size();

  write_json_file(out, fs::path(out_dir) / "eval" / "pair_matrix.json");
  write_matrix_csv(row_json, fs::path(out_dir) / "eval" / "pair_matrix.csv");
  return out;
}

namespace {

Batch probe_batch(const std::string& text) {
  const Vocabulary& vocab = build_vocab();
  return make_batches({text}, vocab, 1, std::nullopt).at(0);
}

}  // namespace

nlohmann::json stage_diagnose(const RunConfig& cfg, const std::string& out_dir) {
  const auto batches = shared_eval_batches(cfg, out_dir);
  LoadedModelSet set = load_model_set(cfg, out_dir);
  const Batch probe = probe_batch("secure message");
  const fs::path diag_dir = fs::path(out_dir) / "diagnostics";
  const fs::path attn_dir = diag_dir / "attention";
  fs::create_directories(attn_dir);

  // Encoder layer-0 captures on the probe plus the shared batches; the same
  // inputs for every model so maps pair up across models.
  std::vector<AttentionCapture> captures(set.named.size());
  for (std::size_t i = 0; i < set.named.size(); ++i) {
    AttentionCapture all;
    all.site = AttentionCapture::Site::EncoderSelfL0;
    AttentionCapture on_probe =
        capture_attention(*set.named[i].model, probe, AttentionCapture::Site::EncoderSelfL0);
    all.maps.insert(all.maps.end(), on_probe.maps.begin(), on_probe.maps.end());
    for (const Batch& b : batches) {
      AttentionCapture c =
          capture_attention(*set.named[i].model, b, AttentionCapture::Site::EncoderSelfL0);
      all.maps.insert(all.maps.end(), c.maps.begin(), c.maps.end());
    }
    captures[i] = std::move(all);
    save_capture_csv(on_probe,
                     (attn_dir / ("encoder_self_l0_" + set.named[i].id + ".csv")).string());
  }

  // Decoder-site probe exports: self-decoding for each model, plus true
  // cross-decoding M1 memory -> M2 decoder when present.
  for (std::size_t i = 0; i < set.named.size(); ++i) {
    const AttentionCapture self_cap = capture_attention(
        *set.named[i].model, probe, AttentionCapture::Site::DecoderSelfFinalStep);
    save_capture_csv(self_cap,
                     (attn_dir / ("decoder_self_final_" + set.named[i].id + ".csv")).string());
    const AttentionCapture cross_cap = capture_attention(
        *set.named[i].model, probe, AttentionCapture::Site::DecoderCross);
    save_capture_csv(cross_cap,
                     (attn_dir / ("decoder_cross_self_" + set.named[i].id + ".csv")).string());
  }
  if (set.named.size() >= 2) {
    const AttentionCapture cross_m1_m2 =
        capture_attention(*set.named[1].model, probe,
                          AttentionCapture::Site::DecoderCross, set.named[0].model);
    save_capture_csv(cross_m1_m2,
                     (attn_dir / ("decoder_cross_" + set.named[0].id + "_to_" +
                                  set.named[1].id + ".csv")).string());
  }

  nlohmann::json out;
  out["pairs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < set.named.size(); ++i) {
    for (std::size_t j = i + 1; j < set.named.size(); ++j) {
      nlohmann::json pair;
      pair["a"] = set.named[i].id;
      pair["b"] = set.named[j].id;
      pair["weight_l2"] = weight_l2(*set.named[i].model, *set.named[j].model);
      pair["attn_kl"] = attn_kl(captures[i], captures[j]);
      pair["attn_cosine"] = attn_cosine(captures[i], captures[j]);
      pair["config_hash_a"] = set.checkpoints[i].metadata.value("config_hash", std::string("?"));
      pair["config_hash_b"] = set.checkpoints[j].metadata.value("config_hash", std::string("?"));
      out["pairs"].push_back(pair);
    }
  }
  out["probe"] = "secure message";
  out["n_capture_inputs"] = 1 + batches.size();

  write_json_file(out, diag_dir / "diagnostics.json");
  {
    std::ofstream csv(diag_dir / "divergence.csv", std::ios::binary | std::ios::trunc);
    csv << "a,b,weight_l2,attn_kl,attn_cosine\n";
    for (const auto& p : out["pairs"]) {
      csv << p.at("a").get<std::string>() << ',' << p.at("b").get<std::string>() << ','
          << fmt_double(p.at("weight_l2").get<double>()) << ','
          << fmt_double(p.at("attn_kl").get<double>()) << ','
          << fmt_double(p.at("attn_cosine").get<double>()) << '\n';
    }
  }
  return out;
}

nlohmann::json stage_threatlab(const RunConfig& cfg, const std::string& out_dir,
                               const std::string& pair_arg, int adapter_pairs_override) {
  const Vocabulary& vocab = build_vocab();
  const auto batches = shared_eval_batches(cfg, out_dir);
  LoadedModelSet set = load_model_set(cfg, out_dir);
  auto find_model = [&](const std::string& id) -> const ModelParams& {
    for (const auto& nm : set.named) {
      if (nm.id == id) return *nm.model;
    }
    throw std::invalid_argument("threatlab: unknown model '" + id + "'");
  };

  std::string enc_id = "M1", dec_id = "M2";
  if (!pair_arg.empty()) {
    const auto parts = split_csv(pair_arg);
    if (parts.size() != 2) {
      throw std::invalid_argument("threatlab: --pairs expects 'enc,dec'");
    }
    enc_id = parts[0];
    dec_id = parts[1];
  }
  const int n_pairs = adapter_pairs_override > 0 ? adapter_pairs_override : cfg.adapter_pairs;
  const ModelParams& enc = find_model(enc_id);
  const ModelParams& dec = find_model(dec_id);

  nlohmann::json out;
  out["adapter_pairs"] = n_pairs;
  out["lambda"] = cfg.adapter_lambda;
  out["train_source"] = "corpus_train.txt";
  out["eval_source"] = "corpus_test.txt";
  out["train_eval_disjoint"] = true;

  // Identity-adapter control: must reproduce the self row exactly.
  {
    const int d = enc.config.d_model;
    Adapter identity;
    identity.w = Tensor::zeros({d, d});
    for (int i = 0; i < d; ++i) identity.w.data()[static_cast<std::ptrdiff_t>(i) * d + i] = 1.0f;
    identity.bias = Tensor::zeros({d});
    identity.source_id = enc_id;
    identity.target_id = enc_id;
    std::vector<MetricsRow> parts;
    for (const Batch& b : batches) {
      parts.push_back(adapter_cross_decode(enc, identity, enc, b));
    }
    out["identity_adapter_self"] = row_to_json(merge_rows(parts));
  }

  // Fit the attack adapter on training-corpus pairs (never on eval inputs).
  const auto train_corpus = load_corpus((fs::path(out_dir) / "corpus_train.txt").string());
  std::vector<std::string> fit_corpus(
      train_corpus.begin(),
      train_corpus.begin() + std::min<std::size_t>(train_corpus.size(),
                                                   static_cast<std::size_t>(n_pairs)));
  const auto fit_batches = make_batches(fit_corpus, vocab, cfg.train.batch_size, std::nullopt);
  std::vector<Memory> src_mems, dst_mems;
  for (const Batch& b : fit_batches) {
    auto ma = encode(enc, b, false);
    auto mb = encode(dec, b, false);
    src_mems.insert(src_mems.end(), ma.begin(), ma.end());
    dst_mems.insert(dst_mems.end(), mb.begin(), mb.end());
  }
  Adapter adapter = fit_linear_adapter(src_mems, dst_mems, cfg.adapter_lambda);
  adapter.source_id = enc_id;
  adapter.target_id = dec_id;

  {
    std::vector<MetricsRow> parts;
    for (const Batch& b : batches) {
      parts.push_back(adapter_cross_decode(enc, adapter, dec, b));
    }
    nlohmann::json attack = row_to_json(merge_rows(parts));
    attack["n_train_pairs"] = adapter.n_train_pairs;
    attack["lambda"] = adapter.lambda;
    out["adapter_attacks"] = nlohmann::json::array({attack});
  }

  // Zero-shot baseline for the same pair, for side-by-side reading.
  {
    std::vector<MetricsRow> parts;
    for (const Batch& b : batches) {
      parts.push_back(score_decode(enc_id, dec_id, cross_decode(enc, dec, b), b, vocab));
    }
    out["zero_shot_baseline"] = row_to_json(merge_rows(parts));
  }

  write_json_file(out, fs::path(out_dir) / "threatlab" / "threatlab.json");
  return out;
}

nlohmann::json stage_perturb(const RunConfig& cfg, const std::string& out_dir,
                             int bits_override, double sigma_override) {
  const Vocabulary& vocab = build_vocab();
  const auto batches = shared_eval_batches(cfg, out_dir);
  LoadedModelSet set = load_model_set(cfg, out_dir);
  const ModelParams& m1 = *set.named[0].model;

  std::vector<int> bit_levels = cfg.quant_bits;
  if (bits_override > 0) bit_levels = {bits_override};
  std::sort(bit_levels.rbegin(), bit_levels.rend());
  const double sigma = sigma_override >= 0.0 ? sigma_override : cfg.noise_sigma;

  // Memories once; perturbations applied per level.
  std::vector<std::vector<Memory>> memories;
  memories.reserve(batches.size());
  for (const Batch& b : batches) memories.push_back(encode(m1, b, false));

  auto sweep_row = [&](const PerturbSpec& spec) {
    std::vector<MetricsRow> parts;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto perturbed = perturb_latents(memories[b], spec);
      const auto hyps = greedy_decode(m1, perturbed, m1.config.t_max);
      parts.push_back(score_decode("M1", "M1", hyps, batches[b], vocab));
    }
    return row_to_json(merge_rows(parts));
  };

  nlohmann::json out;
  out["model"] = "M1";
  out["quantization_sweep"] = nlohmann::json::array();
  for (const int bits : bit_levels) {
    PerturbSpec spec;
    spec.mode = PerturbSpec::Mode::Quantize;
    spec.bits = bits;
    nlohmann::json row = sweep_row(spec);
    row["bits"] = bits;
    out["quantization_sweep"].push_back(row);
  }
  {
    PerturbSpec spec;
    spec.mode = PerturbSpec::Mode::Gaussian;
    spec.sigma = sigma;
    spec.seed = derive_seed(cfg.corpus_seed, "latent-noise");
    nlohmann::json row = sweep_row(spec);
    row["sigma"] = sigma;
    out["gaussian_noise"] = row;
  }

  write_json_file(out, fs::path(out_dir) / "threatlab" / "perturb.json");
  return out;
}

nlohmann::json stage_report(const RunConfig& cfg, const std::string& out_dir) {
  LoadedModelSet set = load_model_set(cfg, out_dir);
  nlohmann::json report;
  report["run_id"] = config_hash(cfg.model, train_config_to_json(cfg.train), cfg.seeds[0]);
  report["created"] = now_iso8601();
  report["version"] = kVersionStamp;
  report["device_label"] = cfg.device_label;

  {
    std::ifstream cfg_in(fs::path(out_dir) / "config.resolved.txt");
    std::stringstream ss;
    ss << cfg_in.rdbuf();
    report["config_text"] = ss.str();
  }

  nlohmann::json models;
  for (std::size_t i = 0; i < set.named.size(); ++i) {
    nlohmann::json m;
    m["seed"] = set.checkpoints[i].model.seed;
    m["config_hash"] = set.checkpoints[i].metadata.value("config_hash", std::string("?"));
    m["param_digest"] = param_digest(*set.named[i].model);
    m["epoch_losses"] = set.checkpoints[i].extras.epoch_losses;
    m["param_count"] = set.named[i].model->param_count();
    models[set.named[i].id] = m;
  }
  report["models"] = models;

  const nlohmann::json eval_json = read_json_file(fs::path(out_dir) / "eval" / "pair_matrix.json");
  report["pair_matrix"] = eval_json.at("rows");
  report["binding_advantage"] = eval_json.at("binding_advantage");
  report["key_classes"] = eval_json.at("key_classes");
  report["diagnostics"] = read_json_file(fs::path(out_dir) / "diagnostics" / "diagnostics.json");
  const fs::path threat_path = fs::path(out_dir) / "threatlab" / "threatlab.json";
  if (fs::exists(threat_path)) {
    report["threatlab"] = read_json_file(threat_path);
    const fs::path perturb_path = fs::path(out_dir) / "threatlab" / "perturb.json";
    if (fs::exists(perturb_path)) {
      report["threatlab"]["perturbation"] = read_json_file(perturb_path);
    }
  }

  nlohmann::json equality;
  equality["clone_equals_m1"] = files_identical(ckpt_path(out_dir, "M1").string(),
                                                ckpt_path(out_dir, "M1_CLONE").string());
  equality["sameseed_equals_m1"] = files_identical(ckpt_path(out_dir, "M1").string(),
                                                   ckpt_path(out_dir, "M1_SAMESEED").string());
  report["checkpoint_equality"] = equality;

  write_json_file(report, fs::path(out_dir) / "report.json");
  return report;
}

nlohmann::json run_experiment(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const char* stage = "gen-data";
  try {
    stage_gen_data(cfg, out_dir);
    stage = "train";
    stage_train_all(cfg, out_dir);
    stage = "eval-matrix";
    stage_eval_matrix(cfg, out_dir);
    stage = "diagnose";
    stage_diagnose(cfg, out_dir);
    if (cfg.run_threatlab) {
      stage = "attack";
      stage_threatlab(cfg, out_dir);
      stage = "perturb";
      stage_perturb(cfg, out_dir);
    }
    stage = "report";
    return stage_report(cfg, out_dir);
  } catch (const std::exception& e) {
    throw std::runtime_error("experiment stage '" + std::string(stage) + "' failed: " + e.what());
  }
}

}  // namespace moble
