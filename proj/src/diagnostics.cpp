#include "moble/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "moble/eval.hpp"

namespace moble {

double weight_l2(const ModelParams& a, const ModelParams& b) {
  const auto pa = a.named_params();
  const auto pb = b.named_params();
  if (pa.size() != pb.size()) {
    throw std::invalid_argument("weight_l2: parameter sets differ");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || pa[i].second.shape() != pb[i].second.shape()) {
      throw std::invalid_argument("weight_l2: parameter name/shape mismatch at " + pa[i].first);
    }
    const float* x = pa[i].second.data();
    const float* y = pb[i].second.data();
    const std::int64_t n = pa[i].second.numel();
    for (std::int64_t j = 0; j < n; ++j) {
      const double d = static_cast<double>(x[j]) - static_cast<double>(y[j]);
      sq += d * d;
    }
  }
  return std::sqrt(sq);
}

namespace {

AttentionCapture::Map to_capture_map(const AttentionTap::Map& m, int prefix_len) {
  AttentionCapture::Map out;
  out.t_q = m.t_q;
  out.t_k = m.t_k;
  out.prefix_len = prefix_len;
  out.probs = m.probs;
  return out;
}

}  // namespace

AttentionCapture capture_attention(const ModelParams& model, const Batch& batch,
                                   AttentionCapture::Site site,
                                   const ModelParams* memory_encoder) {
  AttentionCapture capture;
  capture.site = site;

  if (site == AttentionCapture::Site::EncoderSelfL0) {
    AttentionTap tap;
    tap.site = AttentionTap::Site::EncoderSelf;
    tap.layer = 0;
    encode(model, batch, false, nullptr, &tap);
    for (const auto& m : tap.maps) capture.maps.push_back(to_capture_map(m, 0));
    return capture;
  }

  // Decoder sites: greedily decode first, then replay the final step with a
  // tap attached. The memory comes from `memory_encoder` when given (true
  // cross-decoding), otherwise from the model itself.
  const ModelParams& enc = memory_encoder ? *memory_encoder : model;
  const std::vector<Memory> memories = encode(enc, batch, false);
  const std::vector<DecodeResult> decodes =
      greedy_decode(model, memories, model.config.t_max);

  for (std::size_t i = 0; i < decodes.size(); ++i) {
    const DecodeResult& dec = decodes[i];
    // Prefix that produced the last token: bos + everything before it.
    std::vector<int> prefix;
    prefix.push_back(Vocabulary::bos_id);
    for (std::size_t j = 0; j + 1 < dec.ids.size(); ++j) prefix.push_back(dec.ids[j]);
    const int t = static_cast<int>(prefix.size());

    Batch one;
    one.size = 1;
    one.max_len = t;
    one.token_ids = prefix;
    one.pad_mask.assign(static_cast<std::size_t>(t), 0);
    one.lengths = {t};

    const PackedMemory packed = PackedMemory::pack({&memories[i]});
    AttentionTap tap;
    tap.site = site == AttentionCapture::Site::DecoderSelfFinalStep
                   ? AttentionTap::Site::DecoderSelf
                   : AttentionTap::Site::DecoderCross;
    tap.layer = 0;
    decoder_forward(model, one, packed, false, nullptr, nullptr, &tap);
    if (tap.maps.size() != 1) {
      throw std::logic_error("capture_attention: tap produced unexpected map count");
    }
    capture.maps.push_back(to_capture_map(tap.maps[0], t));
  }
  return capture;
}

namespace {
constexpr double kSmoothingEps = 1e-9;

void check_aligned(const AttentionCapture& a, const AttentionCapture& b) {
  if (a.maps.size() != b.maps.size()) {
    throw std::invalid_argument("attention divergence: capture sizes differ");
  }
  for (std::size_t i = 0; i < a.maps.size(); ++i) {
    if (a.maps[i].t_q != b.maps[i].t_q || a.maps[i].t_k != b.maps[i].t_k) {
      throw std::invalid_argument("attention divergence: map shapes differ");
    }
  }
}

}  // namespace

double kl_rows(const std::vector<float>& a, const std::vector<float>& b,
               int rows, int cols) {
  if (a.size() != b.size() ||
      a.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
    throw std::invalid_argument("kl_rows: shape mismatch");
  }
  double total = 0.0;
  for (int i = 0; i < rows; ++i) {
    const float* ra = a.data() + static_cast<std::ptrdiff_t>(i) * cols;
    const float* rb = b.data() + static_cast<std::ptrdiff_t>(i) * cols;
    double sum_a = 0.0, sum_b = 0.0;
    for (int j = 0; j < cols; ++j) {
      sum_a += static_cast<double>(ra[j]) + kSmoothingEps;
      sum_b += static_cast<double>(rb[j]) + kSmoothingEps;
    }
    double row_kl = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double pa = (static_cast<double>(ra[j]) + kSmoothingEps) / sum_a;
      const double pb = (static_cast<double>(rb[j]) + kSmoothingEps) / sum_b;
      row_kl += pa * std::log(pa / pb);
    }
    total += row_kl;
  }
  return total / rows;
}

double cosine_flat(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double attn_kl(const AttentionCapture& a, const AttentionCapture& b) {
  check_aligned(a, b);
  if (a.maps.empty()) throw std::invalid_argument("attn_kl: empty capture");
  double total = 0.0;
  std::int64_t rows = 0;
  for (std::size_t i = 0; i < a.maps.size(); ++i) {
    total += kl_rows(a.maps[i].probs, b.maps[i].probs, a.maps[i].t_q, a.maps[i].t_k) *
             a.maps[i].t_q;
    rows += a.maps[i].t_q;
  }
  return total / static_cast<double>(rows);
}

double attn_cosine(const AttentionCapture& a, const AttentionCapture& b) {
  check_aligned(a, b);
  if (a.maps.empty()) throw std::invalid_argument("attn_cosine: empty capture");
  double total = 0.0;
  for (std::size_t i = 0; i < a.maps.size(); ++i) {
    total += cosine_flat(a.maps[i].probs, b.maps[i].probs);
  }
  return total / static_cast<double>(a.maps.size());
}

void save_capture_csv(const AttentionCapture& capture, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_capture_csv: cannot open " + path);
  out << "seq,query,key,prob\n";
  char buf[64];
  for (std::size_t s = 0; s < capture.maps.size(); ++s) {
    const auto& m = capture.maps[s];
    for (int i = 0; i < m.t_q; ++i) {
      for (int j = 0; j < m.t_k; ++j) {
        std::snprintf(buf, sizeof(buf), "%.9g",
                      static_cast<double>(m.probs[static_cast<std::size_t>(i) * m.t_k + j]));
        out << s << ',' << i << ',' << j << ',' << buf << '\n';
      }
    }
  }
  if (!out) throw std::runtime_error("save_capture_csv: write failed for " + path);
}

std::string param_digest(const ModelParams& model) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : model.named_params()) {
    mix(name.data(), name.size());
    for (const int d : t.shape()) mix(&d, sizeof(d));
    mix(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace moble
