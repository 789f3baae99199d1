#include "moble/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace moble {

namespace {

constexpr char kMagic[4] = {'M', 'O', 'B', 'L'};
constexpr std::uint16_t kFormatVersion = 1;

void write_u16(std::ostream& out, std::uint16_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

[[noreturn]] void format_error(const std::string& path, std::uint64_t offset,
                               const std::string& what) {
  throw std::runtime_error("checkpoint " + path + ": " + what + " (at byte offset " +
                           std::to_string(offset) + ")");
}

std::string f64_repr(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"d_model", cfg.d_model},   {"n_layers", cfg.n_layers},
                        {"n_heads", cfg.n_heads},   {"d_ff", cfg.d_ff},
                        {"dropout", cfg.dropout},   {"t_max", cfg.t_max},
                        {"vocab_size", cfg.vocab_size}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.dropout = j.at("dropout").get<float>();
  cfg.t_max = j.at("t_max").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.validate();
  return cfg;
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return nlohmann::json{{"lr", cfg.lr},
                        {"weight_decay", cfg.weight_decay},
                        {"batch_size", cfg.batch_size},
                        {"epochs", cfg.epochs},
                        {"clip_norm", cfg.clip_norm},
                        {"seed", cfg.seed},
                        {"beta1", cfg.beta1},
                        {"beta2", cfg.beta2},
                        {"adam_eps", cfg.adam_eps}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.lr = j.at("lr").get<float>();
  cfg.weight_decay = j.at("weight_decay").get<float>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  cfg.clip_norm = j.at("clip_norm").get<float>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.beta1 = j.at("beta1").get<float>();
  cfg.beta2 = j.at("beta2").get<float>();
  cfg.adam_eps = j.at("adam_eps").get<float>();
  return cfg;
}

std::string config_hash(const ModelConfig& model_cfg, const nlohmann::json& train_cfg,
                        std::uint64_t seed) {
  const std::string canon = model_config_to_json(model_cfg).dump() + "|" +
                            (train_cfg.is_null() ? "{}" : train_cfg.dump()) + "|" +
                            std::to_string(seed);
  std::uint64_t h = 1469598103934665603ull;
  for (const char c : canon) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const ModelParams& model, const std::string& path,
                     const CheckpointExtras& extras) {
  model.config.validate();
  const auto params = model.named_params();

  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    manifest.push_back(entry);
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
  }

  nlohmann::json meta;
  meta["format_version"] = kFormatVersion;
  meta["model_config"] = model_config_to_json(model.config);
  meta["seed"] = model.seed;
  meta["train_config"] = extras.train_config;
  // Losses as decimal strings so that parse -> dump is bit-stable.
  nlohmann::json losses = nlohmann::json::array();
  for (const double l : extras.epoch_losses) losses.push_back(f64_repr(l));
  meta["epoch_losses"] = losses;
  meta["device_label"] = extras.device_label;
  meta["config_hash"] = config_hash(model.config, extras.train_config, model.seed);
  meta["manifest"] = manifest;
  const std::string meta_str = meta.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  write_u16(out, kFormatVersion);
  write_u64(out, meta_str.size());
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  write_u64(out, offset);
  for (const auto& [name, t] : params) {
    (void)name;
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);

  char magic[4];
  if (!in.read(magic, 4)) format_error(path, 0, "truncated before magic");
  if (std::memcmp(magic, kMagic, 4) != 0) format_error(path, 0, "bad magic");
  std::uint16_t version = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof(version))) {
    format_error(path, 4, "truncated before version");
  }
  if (version != kFormatVersion) {
    format_error(path, 4, "unsupported format version " + std::to_string(version));
  }
  std::uint64_t meta_len = 0;
  if (!in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len))) {
    format_error(path, 6, "truncated before metadata length");
  }
  std::string meta_str(meta_len, '\0');
  if (!in.read(meta_str.data(), static_cast<std::streamsize>(meta_len))) {
    format_error(path, 14, "truncated metadata");
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_str);
  } catch (const std::exception& e) {
    format_error(path, 14, std::string("metadata is not valid JSON: ") + e.what());
  }
  std::uint64_t payload_len = 0;
  const std::uint64_t payload_len_off = 14 + meta_len;
  if (!in.read(reinterpret_cast<char*>(&payload_len), sizeof(payload_len))) {
    format_error(path, payload_len_off, "truncated before payload length");
  }

  LoadedCheckpoint result;
  const ModelConfig cfg = model_config_from_json(meta.at("model_config"));
  const std::uint64_t seed = meta.at("seed").get<std::uint64_t>();
  // Allocate the parameter set structurally, then overwrite from the payload.
  result.model = init_model(cfg, seed);

  const auto params = result.model.named_params();
  const auto& manifest = meta.at("manifest");
  if (manifest.size() != params.size()) {
    format_error(path, payload_len_off, "manifest entry count mismatch");
  }
  std::uint64_t expect_offset = 0;
  const std::uint64_t payload_start = payload_len_off + 8;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.at("name").get<std::string>() != params[i].first) {
      format_error(path, payload_start, "manifest name order mismatch at " + params[i].first);
    }
    const auto shape = entry.at("shape").get<std::vector<int>>();
    if (shape != params[i].second.shape()) {
      format_error(path, payload_start, "manifest shape mismatch at " + params[i].first);
    }
    if (entry.at("offset").get<std::uint64_t>() != expect_offset) {
      format_error(path, payload_start, "manifest offsets not contiguous at " + params[i].first);
    }
    expect_offset += static_cast<std::uint64_t>(params[i].second.numel()) * sizeof(float);
  }
  if (expect_offset != payload_len) {
    format_error(path, payload_len_off, "payload length disagrees with manifest");
  }
  for (const auto& [name, t] : params) {
    Tensor handle = t;
    if (!in.read(reinterpret_cast<char*>(handle.data()),
                 static_cast<std::streamsize>(handle.numel() * sizeof(float)))) {
      format_error(path, payload_start, "truncated payload in " + name);
    }
  }
  char extra = 0;
  if (in.read(&extra, 1)) {
    format_error(path, payload_start + payload_len, "trailing bytes after payload");
  }

  result.extras.train_config = meta.value("train_config", nlohmann::json());
  if (meta.contains("epoch_losses")) {
    for (const auto& l : meta["epoch_losses"]) {
      result.extras.epoch_losses.push_back(std::stod(l.get<std::string>()));
    }
  }
  result.extras.device_label = meta.value("device_label", "");
  result.metadata = std::move(meta);
  return result;
}

void clone_checkpoint(const std::string& src_path, const std::string& dst_path) {
  std::ifstream in(src_path, std::ios::binary);
  if (!in) throw std::runtime_error("clone_checkpoint: cannot open " + src_path);
  std::ofstream out(dst_path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("clone_checkpoint: cannot open " + dst_path);
  out << in.rdbuf();
  if (!out) throw std::runtime_error("clone_checkpoint: copy failed");
}

bool files_identical(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary);
  std::ifstream fb(b, std::ios::binary);
  if (!fa || !fb) throw std::runtime_error("files_identical: cannot open inputs");
  constexpr std::size_t kChunk = 1 << 20;
  std::vector<char> ba(kChunk), bb(kChunk);
  for (;;) {
    fa.read(ba.data(), kChunk);
    fb.read(bb.data(), kChunk);
    if (fa.gcount() != fb.gcount()) return false;
    if (std::memcmp(ba.data(), bb.data(), static_cast<std::size_t>(fa.gcount())) != 0) {
      return false;
    }
    if (fa.eof() && fb.eof()) return true;
    if (fa.eof() != fb.eof()) return false;
  }
}

}  // namespace moble
