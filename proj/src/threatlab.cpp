#include "moble/threatlab.hpp"

#include <cmath>
#include <stdexcept>

#include "moble/rng.hpp"

namespace moble {

namespace {

// Cholesky solve of the symmetric positive-definite system G X = C, where G
// is n x n and C is n x m, all in double. Throws on a non-positive pivot.
std::vector<double> cholesky_solve(std::vector<double> g, std::vector<double> c,
                                   int n, int m) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = g[static_cast<std::size_t>(i) * n + j];
      for (int k = 0; k < j; ++k) {
        s -= g[static_cast<std::size_t>(i) * n + k] * g[static_cast<std::size_t>(j) * n + k];
      }
      if (i == j) {
        if (s <= 1e-12) {
          throw std::runtime_error(
              "fit_linear_adapter: singular normal equations; increase lambda");
        }
        g[static_cast<std::size_t>(i) * n + j] = std::sqrt(s);
      } else {
        g[static_cast<std::size_t>(i) * n + j] = s / g[static_cast<std::size_t>(j) * n + j];
      }
    }
  }
  // Forward substitution L Y = C, then back substitution L^T X = Y.
  for (int col = 0; col < m; ++col) {
    for (int i = 0; i < n; ++i) {
      double s = c[static_cast<std::size_t>(i) * m + col];
      for (int k = 0; k < i; ++k) {
        s -= g[static_cast<std::size_t>(i) * n + k] * c[static_cast<std::size_t>(k) * m + col];
      }
      c[static_cast<std::size_t>(i) * m + col] = s / g[static_cast<std::size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
      double s = c[static_cast<std::size_t>(i) * m + col];
      for (int k = i + 1; k < n; ++k) {
        s -= g[static_cast<std::size_t>(k) * n + i] * c[static_cast<std::size_t>(k) * m + col];
      }
      c[static_cast<std::size_t>(i) * m + col] = s / g[static_cast<std::size_t>(i) * n + i];
    }
  }
  return c;
}

}  // namespace

Adapter fit_linear_adapter(const std::vector<Memory>& source_mems,
                           const std::vector<Memory>& target_mems,
                           double lambda) {
  if (source_mems.size() != target_mems.size() || source_mems.empty()) {
    throw std::invalid_argument("fit_linear_adapter: memory lists must pair up");
  }
  if (lambda < 0.0) throw std::invalid_argument("fit_linear_adapter: lambda must be >= 0");
  const int d = source_mems[0].d_model;
  std::int64_t rows = 0;
  for (std::size_t i = 0; i < source_mems.size(); ++i) {
    if (source_mems[i].d_model != d || target_mems[i].d_model != d) {
      throw std::invalid_argument("fit_linear_adapter: memory widths disagree");
    }
    if (source_mems[i].length != target_mems[i].length) {
      throw std::invalid_argument("fit_linear_adapter: paired memories differ in length");
    }
    rows += source_mems[i].length;
  }
  if (rows < d + 1) {
    throw std::invalid_argument("fit_linear_adapter: need at least d_model+1 token rows");
  }

  // Normal equations over the bias-augmented design matrix X = [h_a, 1].
  const int n = d + 1;
  std::vector<double> gram(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<double> rhs(static_cast<std::size_t>(n) * d, 0.0);
  std::vector<double> x_row(static_cast<std::size_t>(n));
  for (std::size_t s = 0; s < source_mems.size(); ++s) {
    const Memory& a = source_mems[s];
    const Memory& b = target_mems[s];
    for (int r = 0; r < a.length; ++r) {
      const float* ha = a.values.data() + static_cast<std::ptrdiff_t>(r) * d;
      const float* hb = b.values.data() + static_cast<std::ptrdiff_t>(r) * d;
      for (int i = 0; i < d; ++i) x_row[static_cast<std::size_t>(i)] = ha[i];
      x_row[static_cast<std::size_t>(d)] = 1.0;
      for (int i = 0; i < n; ++i) {
        const double xi = x_row[static_cast<std::size_t>(i)];
        for (int j = i; j < n; ++j) {
          gram[static_cast<std::size_t>(i) * n + j] += xi * x_row[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < d; ++j) {
          rhs[static_cast<std::size_t>(i) * d + j] += xi * hb[j];
        }
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < i; ++j) {
      gram[static_cast<std::size_t>(i) * n + j] = gram[static_cast<std::size_t>(j) * n + i];
    }
  }
  for (int i = 0; i < d; ++i) {
    gram[static_cast<std::size_t>(i) * n + i] += lambda;  // bias row unpenalized
  }

  const std::vector<double> solution = cholesky_solve(std::move(gram), std::move(rhs), n, d);

  Adapter adapter;
  adapter.lambda = lambda;
  adapter.n_train_pairs = static_cast<int>(source_mems.size());
  adapter.w = Tensor::zeros({d, d});
  adapter.bias = Tensor::zeros({d});
  float* pw = adapter.w.data();
  float* pb = adapter.bias.data();
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      pw[static_cast<std::ptrdiff_t>(i) * d + j] =
          static_cast<float>(solution[static_cast<std::size_t>(i) * d + j]);
    }
  }
  for (int j = 0; j < d; ++j) {
    pb[j] = static_cast<float>(solution[static_cast<std::size_t>(d) * d + j]);
  }
  return adapter;
}

Memory apply_adapter(const Adapter& adapter, const Memory& memory) {
  const int d = memory.d_model;
  if (adapter.w.dim(0) != d || adapter.w.dim(1) != d || adapter.bias.numel() != d) {
    throw std::invalid_argument("apply_adapter: width mismatch");
  }
  Memory out = memory;
  const float* pw = adapter.w.data();
  const float* pb = adapter.bias.data();
  for (int r = 0; r < memory.length; ++r) {
    const float* h = memory.values.data() + static_cast<std::ptrdiff_t>(r) * d;
    float* o = out.values.data() + static_cast<std::ptrdiff_t>(r) * d;
    for (int j = 0; j < d; ++j) {
      float s = pb[j];
      for (int i = 0; i < d; ++i) s += h[i] * pw[static_cast<std::ptrdiff_t>(i) * d + j];
      o[j] = s;
    }
  }
  return out;
}

MetricsRow adapter_cross_decode(const ModelParams& encoder_model,
                                const Adapter& adapter,
                                const ModelParams& decoder_model,
                                const Batch& batch) {
  const std::vector<Memory> memories = encode(encoder_model, batch, false);
  std::vector<Memory> adapted;
  adapted.reserve(memories.size());
  for (const Memory& m : memories) adapted.push_back(apply_adapter(adapter, m));
  const auto hyps = greedy_decode(decoder_model, adapted, decoder_model.config.t_max);
  return score_decode(adapter.source_id, adapter.target_id, hyps, batch, build_vocab());
}

namespace {

void quantize_rows(std::vector<float>& values, int bits) {
  if (bits < 2 || bits > 16) {
    throw std::invalid_argument("perturb_latent: bits must lie in [2,16]");
  }
  float max_abs = 0.0f;
  for (const float v : values) max_abs = std::max(max_abs, std::abs(v));
  if (max_abs == 0.0f) return;
  const float levels = static_cast<float>((1 << (bits - 1)) - 1);
  const float step = max_abs / levels;
  for (float& v : values) {
    float q = std::round(v / step);
    q = std::min(std::max(q, -levels), levels);
    v = q * step;
  }
}

}  // namespace

Memory perturb_latent(const Memory& memory, const PerturbSpec& spec) {
  std::vector<Memory> one = perturb_latents(std::vector<Memory>{memory}, spec);
  return one[0];
}

std::vector<Memory> perturb_latents(const std::vector<Memory>& memories,
                                    const PerturbSpec& spec) {
  std::vector<Memory> out = memories;
  if (spec.mode == PerturbSpec::Mode::Quantize) {
    for (Memory& m : out) quantize_rows(m.values, spec.bits);
  } else {
    if (spec.sigma < 0.0) throw std::invalid_argument("perturb_latent: sigma must be >= 0");
    if (spec.sigma == 0.0) return out;
    Rng rng(spec.seed);
    for (Memory& m : out) {
      for (float& v : m.values) {
        v += static_cast<float>(spec.sigma * rng.normal());
      }
    }
  }
  return out;
}

}  // namespace moble
