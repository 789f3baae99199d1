#include "moble/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace moble {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.d_ = std::make_shared<Data>();
  t.d_->shape = std::move(shape);
  t.d_->data.assign(static_cast<std::size_t>(shape_numel(t.d_->shape)), 0.0f);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.d_->data.begin(), t.d_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("tensor: data size does not match shape");
  }
  Tensor t;
  t.d_ = std::make_shared<Data>();
  t.d_->shape = std::move(shape);
  t.d_->data = std::move(data);
  t.d_->requires_grad = requires_grad;
  return t;
}

std::vector<float>& Tensor::grad() {
  if (d_->grad.empty()) d_->grad.assign(d_->data.size(), 0.0f);
  return d_->grad;
}

void Tensor::zero_grad() {
  if (d_->grad.empty()) {
    d_->grad.assign(d_->data.size(), 0.0f);
  } else {
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
  }
}

float Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item: tensor is not scalar");
  return d_->data[0];
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(const char* op, Tensor out, std::vector<Tensor> inputs,
                  std::function<void()> backward_fn) {
  nodes_.push_back(Node{op, std::move(out), std::move(inputs), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward: tape already consumed");
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a defined scalar");
  }
  Tensor seed = loss;
  seed.grad()[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    if (n.backward && n.out.grad_allocated()) n.backward();
    for (Tensor& in : n.inputs) {
      if (in.requires_grad() && !in.grad_allocated()) in.grad();
    }
    // The output grad has been fully consumed; intermediates free it early.
    n.backward = nullptr;
    if (!n.out.same_storage(loss)) n.out.release_grad();
    n.inputs.clear();
  }
  consumed_ = true;
}

// ---------------------------------------------------------------------------
// GEMM kernels. Register-tiled plain C++; per output element the accumulation
// order is fixed, which keeps every call bit-reproducible.

namespace detail {

void gemm_nn(int m, int kk, int n, const float* a, int lda, const float* b,
             int ldb, float* c, int ldc, bool accumulate) {
  constexpr int MR = 4;
  constexpr int NR = 32;
  // Partial row blocks read from a virtual zero row so every element takes
  // the same code path (and hence the same fma rounding) regardless of m.
  static thread_local std::vector<float> zero_row;
  if (static_cast<int>(zero_row.size()) < kk) {
    zero_row.assign(static_cast<std::size_t>(kk), 0.0f);
  }
  for (int i0 = 0; i0 < m; i0 += MR) {
    const int mb = std::min(MR, m - i0);
    const float* arow[MR];
    for (int r = 0; r < MR; ++r) {
      arow[r] = r < mb ? a + static_cast<std::ptrdiff_t>(i0 + r) * lda : zero_row.data();
    }
    for (int j0 = 0; j0 < n; j0 += NR) {
      const int nb = std::min(NR, n - j0);
      float acc[MR][NR];
      if (nb == NR) {
        for (int r = 0; r < MR; ++r) {
          if (accumulate && r < mb) {
            for (int j = 0; j < NR; ++j) acc[r][j] = c[(i0 + r) * ldc + j0 + j];
          } else {
            for (int j = 0; j < NR; ++j) acc[r][j] = 0.0f;
          }
        }
        for (int k = 0; k < kk; ++k) {
          const float* brow = b + static_cast<std::ptrdiff_t>(k) * ldb + j0;
          const float x0 = arow[0][k];
          const float x1 = arow[1][k];
          const float x2 = arow[2][k];
          const float x3 = arow[3][k];
          for (int j = 0; j < NR; ++j) {
            acc[0][j] = std::fma(x0, brow[j], acc[0][j]);
            acc[1][j] = std::fma(x1, brow[j], acc[1][j]);
            acc[2][j] = std::fma(x2, brow[j], acc[2][j]);
            acc[3][j] = std::fma(x3, brow[j], acc[3][j]);
          }
        }
        for (int r = 0; r < mb; ++r) {
          for (int j = 0; j < NR; ++j) c[(i0 + r) * ldc + j0 + j] = acc[r][j];
        }
      } else {
        for (int r = 0; r < MR; ++r) {
          if (accumulate && r < mb) {
            for (int j = 0; j < nb; ++j) acc[r][j] = c[(i0 + r) * ldc + j0 + j];
          } else {
            for (int j = 0; j < nb; ++j) acc[r][j] = 0.0f;
          }
        }
        for (int k = 0; k < kk; ++k) {
          const float* brow = b + static_cast<std::ptrdiff_t>(k) * ldb + j0;
          const float x0 = arow[0][k];
          const float x1 = arow[1][k];
          const float x2 = arow[2][k];
          const float x3 = arow[3][k];
          for (int j = 0; j < nb; ++j) {
            acc[0][j] = std::fma(x0, brow[j], acc[0][j]);
            acc[1][j] = std::fma(x1, brow[j], acc[1][j]);
            acc[2][j] = std::fma(x2, brow[j], acc[2][j]);
            acc[3][j] = std::fma(x3, brow[j], acc[3][j]);
          }
        }
        for (int r = 0; r < mb; ++r) {
          for (int j = 0; j < nb; ++j) c[(i0 + r) * ldc + j0 + j] = acc[r][j];
        }
      }
    }
  }
}

void gemm_nt(int m, int kk, int n, const float* a, int lda, const float* b,
             int ldb, float* c, int ldc, bool accumulate) {
  // Transpose B into scratch once, then reuse the register-tiled NN kernel.
  static thread_local std::vector<float> scratch;
  scratch.resize(static_cast<std::size_t>(kk) * n);
  constexpr int TB = 32;
  for (int k0 = 0; k0 < kk; k0 += TB) {
    const int kb = std::min(TB, kk - k0);
    for (int j0 = 0; j0 < n; j0 += TB) {
      const int jb = std::min(TB, n - j0);
      for (int j = j0; j < j0 + jb; ++j) {
        const float* brow = b + static_cast<std::ptrdiff_t>(j) * ldb + k0;
        for (int k = 0; k < kb; ++k) {
          scratch[static_cast<std::size_t>(k0 + k) * n + j] = brow[k];
        }
      }
    }
  }
  gemm_nn(m, kk, n, a, lda, scratch.data(), n, c, ldc, accumulate);
}

void gemm_tn(int m, int kk, int n, const float* a, int lda, const float* b,
             int ldb, float* c, int ldc, bool accumulate) {
  constexpr int MR = 4;
  if (!accumulate) {
    for (int k = 0; k < kk; ++k) {
      std::memset(c + static_cast<std::ptrdiff_t>(k) * ldc, 0,
                  static_cast<std::size_t>(n) * sizeof(float));
    }
  }
  // A single code path for every row block: partial blocks borrow virtual
  // zero rows, whose fma(0, b, acc) contributions are exact no-ops. Per
  // element the terms land in strict m-ascending order, so the bits cannot
  // depend on how many rows the caller happened to pass.
  static thread_local std::vector<float> zero_row;
  if (static_cast<int>(zero_row.size()) < std::max(n, kk)) {
    zero_row.assign(static_cast<std::size_t>(std::max(n, kk)), 0.0f);
  }
  for (int m0 = 0; m0 < m; m0 += MR) {
    const int mb = std::min(MR, m - m0);
    const float* arow[MR];
    const float* brow[MR];
    for (int r = 0; r < MR; ++r) {
      arow[r] = r < mb ? a + static_cast<std::ptrdiff_t>(m0 + r) * lda : zero_row.data();
      brow[r] = r < mb ? b + static_cast<std::ptrdiff_t>(m0 + r) * ldb : zero_row.data();
    }
    for (int k = 0; k < kk; ++k) {
      const float x0 = arow[0][k];
      const float x1 = arow[1][k];
      const float x2 = arow[2][k];
      const float x3 = arow[3][k];
      float* crow = c + static_cast<std::ptrdiff_t>(k) * ldc;
      for (int j = 0; j < n; ++j) {
        float acc = crow[j];
        acc = std::fma(x0, brow[0][j], acc);
        acc = std::fma(x1, brow[1][j], acc);
        acc = std::fma(x2, brow[2][j], acc);
        acc = std::fma(x3, brow[3][j], acc);
        crow[j] = acc;
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

namespace {

bool wants_grad(const Tensor& t) { return t.requires_grad(); }

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a 2-d tensor");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dimensions disagree");
  }
  Tensor out = Tensor::zeros({m, n}, wants_grad(a) || wants_grad(b));
  detail::gemm_nn(m, k, n, a.data(), k, b.data(), n, out.data(), n, false);
  if (tape && out.requires_grad()) {
    Tensor av = a, bv = b, ov = out;
    tape->record("matmul", out, {a, b}, [av, bv, ov, m, k, n]() mutable {
      const float* g = ov.grad().data();
      if (av.requires_grad()) {
        detail::gemm_nt(m, n, k, g, n, bv.data(), n, av.grad().data(), k, true);
      }
      if (bv.requires_grad()) {
        detail::gemm_tn(m, k, n, av.data(), k, g, n, bv.grad().data(), n, true);
      }
    });
  }
  return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const std::int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape(), wants_grad(a) || wants_grad(b));
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (tape && out.requires_grad()) {
    Tensor av = a, bv = b, ov = out;
    tape->record("add", out, {a, b}, [av, bv, ov, n]() mutable {
      const float* g = ov.grad().data();
      if (av.requires_grad()) {
        float* ga = av.grad().data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bv.requires_grad()) {
        float* gb = bv.grad().data();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const std::int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape(), wants_grad(a) || wants_grad(b));
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (tape && out.requires_grad()) {
    Tensor av = a, bv = b, ov = out;
    tape->record("mul", out, {a, b}, [av, bv, ov, n]() mutable {
      const float* g = ov.grad().data();
      if (av.requires_grad()) {
        float* ga = av.grad().data();
        const float* pb2 = bv.data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
      }
      if (bv.requires_grad()) {
        float* gb = bv.grad().data();
        const float* pa2 = av.data();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape* tape, const Tensor& a, float c) {
  const std::int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape(), wants_grad(a));
  const float* pa = a.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (tape && out.requires_grad()) {
    Tensor av = a, ov = out;
    tape->record("scale", out, {a}, [av, ov, c, n]() mutable {
      const float* g = ov.grad().data();
      float* ga = av.grad().data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

Tensor sum_all(Tape* tape, const Tensor& a) {
  const std::int64_t n = a.numel();
  double s = 0.0;
  const float* pa = a.data();
  for (std::int64_t i = 0; i < n; ++i) s += pa[i];
  Tensor out = Tensor::from_data({1}, {static_cast<float>(s)}, wants_grad(a));
  if (tape && out.requires_grad()) {
    Tensor av = a, ov = out;
    tape->record("sum", out, {a}, [av, ov, n]() mutable {
      const float g = ov.grad()[0];
      float* ga = av.grad().data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor add_row(Tape* tape, const Tensor& a, const Tensor& row) {
  require_2d(a, "add_row");
  const int m = a.dim(0), d = a.dim(1);
  if (row.numel() != d) throw std::invalid_argument("add_row: width mismatch");
  Tensor out = Tensor::zeros(a.shape(), wants_grad(a) || wants_grad(row));
  const float* pa = a.data();
  const float* pr = row.data();
  float* po = out.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < d; ++j) po[i * d + j] = pa[i * d + j] + pr[j];
  }
  if (tape && out.requires_grad()) {
    Tensor av = a, rv = row, ov = out;
    tape->record("add_row", out, {a, row}, [av, rv, ov, m, d]() mutable {
      const float* g = ov.grad().data();
      if (av.requires_grad()) {
        float* ga = av.grad().data();
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * d; ++i) ga[i] += g[i];
      }
      if (rv.requires_grad()) {
        float* gr = rv.grad().data();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < d; ++j) gr[j] += g[i * d + j];
        }
      }
    });
  }
  return out;
}

Tensor add_position(Tape* tape, const Tensor& x, const Tensor& pos, int batch) {
  require_2d(x, "add_position");
  require_2d(pos, "add_position");
  const int rows = x.dim(0), d = x.dim(1);
  if (batch <= 0 || rows % batch != 0) {
    throw std::invalid_argument("add_position: rows not divisible by batch");
  }
  const int t = rows / batch;
  if (pos.dim(0) < t || pos.dim(1) != d) {
    throw std::invalid_argument("add_position: positional table too small");
  }
  Tensor out = Tensor::zeros(x.shape(), wants_grad(x));
  const float* px = x.data();
  const float* pp = pos.data();
  float* po = out.data();
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < t; ++i) {
      const float* xr = px + (static_cast<std::ptrdiff_t>(b) * t + i) * d;
      const float* pr = pp + static_cast<std::ptrdiff_t>(i) * d;
      float* orow = po + (static_cast<std::ptrdiff_t>(b) * t + i) * d;
      for (int j = 0; j < d; ++j) orow[j] = xr[j] + pr[j];
    }
  }
  if (tape && out.requires_grad()) {
    Tensor xv = x, ov = out;
    const std::int64_t n = x.numel();
    tape->record("add_position", out, {x}, [xv, ov, n]() mutable {
      const float* g = ov.grad().data();
      float* gx = xv.grad().data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor gelu(Tape* tape, const Tensor& x) {
  const std::int64_t n = x.numel();
  Tensor out = Tensor::zeros(x.shape(), wants_grad(x));
  const float* px = x.data();
  float* po = out.data();
  constexpr float inv_sqrt2 = 0.7071067811865475f;
  for (std::int64_t i = 0; i < n; ++i) {
    const float v = px[i];
    po[i] = v * 0.5f * (1.0f + std::erf(v * inv_sqrt2));
  }
  if (tape && out.requires_grad()) {
    Tensor xv = x, ov = out;
    tape->record("gelu", out, {x}, [xv, ov, n]() mutable {
      constexpr float inv_sqrt_2pi = 0.3989422804014327f;
      const float* g = ov.grad().data();
      const float* px2 = xv.data();
      float* gx = xv.grad().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const float v = px2[i];
        const float cdf = 0.5f * (1.0f + std::erf(v * 0.7071067811865475f));
        const float pdf = inv_sqrt_2pi * std::exp(-0.5f * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, float eps) {
  require_2d(x, "layer_norm");
  const int m = x.dim(0), d = x.dim(1);
  if (d == 0) throw std::invalid_argument("layer_norm: zero feature dimension");
  if (gain.numel() != d || bias.numel() != d) {
    throw std::invalid_argument("layer_norm: gain/bias length mismatch");
  }
  Tensor out = Tensor::zeros(x.shape(),
                             wants_grad(x) || wants_grad(gain) || wants_grad(bias));
  auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(m));
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(m));
  const float* px = x.data();
  const float* pg = gain.data();
  const float* pb = bias.data();
  float* po = out.data();
  for (int i = 0; i < m; ++i) {
    const float* row = px + static_cast<std::ptrdiff_t>(i) * d;
    float mu = 0.0f;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (int j = 0; j < d; ++j) {
      const float c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + eps);
    (*mean)[static_cast<std::size_t>(i)] = mu;
    (*inv_std)[static_cast<std::size_t>(i)] = inv;
    float* orow = po + static_cast<std::ptrdiff_t>(i) * d;
    for (int j = 0; j < d; ++j) orow[j] = (row[j] - mu) * inv * pg[j] + pb[j];
  }
  if (tape && out.requires_grad()) {
    Tensor xv = x, gv = gain, bv = bias, ov = out;
    tape->record("layer_norm", out, {x, gain, bias},
                 [xv, gv, bv, ov, mean, inv_std, m, d]() mutable {
      const float* g = ov.grad().data();
      const float* px2 = xv.data();
      const float* pg2 = gv.data();
      float* gx = xv.requires_grad() ? xv.grad().data() : nullptr;
      float* gg = gv.requires_grad() ? gv.grad().data() : nullptr;
      float* gb = bv.requires_grad() ? bv.grad().data() : nullptr;
      for (int i = 0; i < m; ++i) {
        const float mu = (*mean)[static_cast<std::size_t>(i)];
        const float inv = (*inv_std)[static_cast<std::size_t>(i)];
        const float* row = px2 + static_cast<std::ptrdiff_t>(i) * d;
        const float* grow = g + static_cast<std::ptrdiff_t>(i) * d;
        if (gg || gb) {
          for (int j = 0; j < d; ++j) {
            const float xhat = (row[j] - mu) * inv;
            if (gg) gg[j] += grow[j] * xhat;
            if (gb) gb[j] += grow[j];
          }
        }
        if (gx) {
          float m1 = 0.0f, m2 = 0.0f;
          for (int j = 0; j < d; ++j) {
            const float t = grow[j] * pg2[j];
            m1 += t;
            m2 += t * (row[j] - mu) * inv;
          }
          m1 /= static_cast<float>(d);
          m2 /= static_cast<float>(d);
          float* gxrow = gx + static_cast<std::ptrdiff_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            const float xhat = (row[j] - mu) * inv;
            const float t = grow[j] * pg2[j];
            gxrow[j] += inv * (t - m1 - xhat * m2);
          }
        }
      }
    });
  }
  return out;
}

namespace {

// Row softmax with a disallowed mask, shared by the public op and attention.
// Scores are read through `scale`; masked outputs are exactly zero.
void softmax_row(const float* scores, const std::uint8_t* masked, int width,
                 float scale_factor, float* out) {
  float row_max = -std::numeric_limits<float>::infinity();
  bool any = false;
  for (int j = 0; j < width; ++j) {
    const float v = scores[j] * scale_factor + (masked && masked[j] ? -1e9f : 0.0f);
    if (!masked || !masked[j]) {
      any = true;
      if (v > row_max) row_max = v;
    }
  }
  if (!any) throw std::runtime_error("softmax: fully masked row");
  float sum = 0.0f;
  for (int j = 0; j < width; ++j) {
    if (masked && masked[j]) {
      out[j] = 0.0f;
    } else {
      const float e = std::exp(scores[j] * scale_factor - row_max);
      out[j] = e;
      sum += e;
    }
  }
  const float inv = 1.0f / sum;
  for (int j = 0; j < width; ++j) out[j] *= inv;
}

}  // namespace

Tensor masked_softmax_rows(Tape* tape, const Tensor& scores,
                           const std::vector<std::uint8_t>& mask) {
  require_2d(scores, "masked_softmax_rows");
  const int m = scores.dim(0), n = scores.dim(1);
  if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != scores.numel()) {
    throw std::invalid_argument("masked_softmax_rows: mask size mismatch");
  }
  Tensor out = Tensor::zeros(scores.shape(), wants_grad(scores));
  const float* ps = scores.data();
  float* po = out.data();
  const std::uint8_t* pm = mask.empty() ? nullptr : mask.data();
  for (int i = 0; i < m; ++i) {
    softmax_row(ps + static_cast<std::ptrdiff_t>(i) * n,
                pm ? pm + static_cast<std::ptrdiff_t>(i) * n : nullptr, n, 1.0f,
                po + static_cast<std::ptrdiff_t>(i) * n);
  }
  if (tape && out.requires_grad()) {
    Tensor sv = scores, ov = out;
    tape->record("masked_softmax_rows", out, {scores}, [sv, ov, m, n]() mutable {
      const float* g = ov.grad().data();
      const float* p = ov.data();
      float* gs = sv.grad().data();
      for (int i = 0; i < m; ++i) {
        const float* prow = p + static_cast<std::ptrdiff_t>(i) * n;
        const float* grow = g + static_cast<std::ptrdiff_t>(i) * n;
        float dot = 0.0f;
        for (int j = 0; j < n; ++j) dot += grow[j] * prow[j];
        float* gsrow = gs + static_cast<std::ptrdiff_t>(i) * n;
        for (int j = 0; j < n; ++j) gsrow[j] += prow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

Tensor cross_entropy_logits(Tape* tape, const Tensor& logits,
                            const std::vector<int>& targets, int ignore_id) {
  require_2d(logits, "cross_entropy_logits");
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n) {
    throw std::invalid_argument("cross_entropy_logits: target count mismatch");
  }
  for (int t : targets) {
    if (t < 0 || t >= v) {
      throw std::invalid_argument("cross_entropy_logits: target id out of range");
    }
  }
  auto lse = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
  const float* pl = logits.data();
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < n; ++i) {
    const float* row = pl + static_cast<std::ptrdiff_t>(i) * v;
    float row_max = row[0];
    for (int j = 1; j < v; ++j) row_max = std::max(row_max, row[j]);
    float s = 0.0f;
    for (int j = 0; j < v; ++j) s += std::exp(row[j] - row_max);
    const float l = row_max + std::log(s);
    (*lse)[static_cast<std::size_t>(i)] = l;
    if (targets[static_cast<std::size_t>(i)] != ignore_id) {
      total += static_cast<double>(l) -
               static_cast<double>(row[targets[static_cast<std::size_t>(i)]]);
      ++count;
    }
  }
  if (count == 0) {
    throw std::runtime_error("cross_entropy_logits: every position is ignored");
  }
  const float loss = static_cast<float>(total / count);
  if (!std::isfinite(loss)) {
    throw std::runtime_error("cross_entropy_logits: non-finite loss");
  }
  Tensor out = Tensor::from_data({1}, {loss}, wants_grad(logits));
  if (tape && out.requires_grad()) {
    Tensor lv = logits, ov = out;
    auto tgt = std::make_shared<std::vector<int>>(targets);
    tape->record("cross_entropy_logits", out, {logits},
                 [lv, ov, tgt, lse, ignore_id, n, v, count]() mutable {
      const float gscale = ov.grad()[0] / static_cast<float>(count);
      const float* pl2 = lv.data();
      float* gl = lv.grad().data();
      for (int i = 0; i < n; ++i) {
        const int t = (*tgt)[static_cast<std::size_t>(i)];
        if (t == ignore_id) continue;
        const float l = (*lse)[static_cast<std::size_t>(i)];
        const float* row = pl2 + static_cast<std::ptrdiff_t>(i) * v;
        float* grow = gl + static_cast<std::ptrdiff_t>(i) * v;
        for (int j = 0; j < v; ++j) {
          const float p = std::exp(row[j] - l);
          grow[j] += gscale * (p - (j == t ? 1.0f : 0.0f));
        }
      }
    });
  }
  return out;
}

Tensor dropout(Tape* tape, const Tensor& x, float p, Rng& rng, bool train) {
  if (!(p >= 0.0f && p < 1.0f)) {
    throw std::invalid_argument("dropout: p must lie in [0,1)");
  }
  if (!train || p == 0.0f) return x;
  const std::int64_t n = x.numel();
  const float keep_scale = 1.0f / (1.0f - p);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(n));
  Tensor out = Tensor::zeros(x.shape(), wants_grad(x));
  const float* px = x.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const bool keep = rng.uniform() >= p;
    (*mask)[static_cast<std::size_t>(i)] = keep ? 1 : 0;
    po[i] = keep ? px[i] * keep_scale : 0.0f;
  }
  if (tape && out.requires_grad()) {
    Tensor xv = x, ov = out;
    tape->record("dropout", out, {x}, [xv, ov, mask, keep_scale, n]() mutable {
      const float* g = ov.grad().data();
      float* gx = xv.grad().data();
      for (std::int64_t i = 0; i < n; ++i) {
        if ((*mask)[static_cast<std::size_t>(i)]) gx[i] += g[i] * keep_scale;
      }
    });
  }
  return out;
}

Tensor embedding_gather(Tape* tape, const Tensor& table,
                        const std::vector<int>& ids) {
  require_2d(table, "embedding_gather");
  const int v = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::invalid_argument("embedding_gather: id out of range");
    }
  }
  Tensor out = Tensor::zeros({n, d}, wants_grad(table));
  const float* pt = table.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i) {
    std::memcpy(po + static_cast<std::ptrdiff_t>(i) * d,
                pt + static_cast<std::ptrdiff_t>(ids[static_cast<std::size_t>(i)]) * d,
                static_cast<std::size_t>(d) * sizeof(float));
  }
  if (tape && out.requires_grad()) {
    Tensor tv = table, ov = out;
    auto idv = std::make_shared<std::vector<int>>(ids);
    tape->record("embedding_gather", out, {table}, [tv, ov, idv, d, n]() mutable {
      const float* g = ov.grad().data();
      float* gt = tv.grad().data();
      for (int i = 0; i < n; ++i) {
        float* trow = gt + static_cast<std::ptrdiff_t>((*idv)[static_cast<std::size_t>(i)]) * d;
        const float* grow = g + static_cast<std::ptrdiff_t>(i) * d;
        for (int j = 0; j < d; ++j) trow[j] += grow[j];
      }
    });
  }
  return out;
}

Tensor attention_heads(Tape* tape, const Tensor& q, const Tensor& k,
                       const Tensor& v, int batch, int t_q, int t_k, int heads,
                       const std::vector<std::uint8_t>& key_pad, bool causal,
                       std::shared_ptr<std::vector<float>>* probs_out) {
  require_2d(q, "attention_heads");
  require_2d(k, "attention_heads");
  require_2d(v, "attention_heads");
  const int d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d) {
    throw std::invalid_argument("attention_heads: model width mismatch");
  }
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("attention_heads: width not divisible by heads");
  }
  if (q.dim(0) != batch * t_q || k.dim(0) != batch * t_k || v.dim(0) != batch * t_k) {
    throw std::invalid_argument("attention_heads: packed row counts disagree");
  }
  if (!key_pad.empty() &&
      static_cast<int>(key_pad.size()) != batch * t_k) {
    throw std::invalid_argument("attention_heads: key mask size mismatch");
  }
  if (causal && t_q != t_k) {
    throw std::invalid_argument("attention_heads: causal mask needs square maps");
  }
  const int dk = d / heads;
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));
  const bool needs_grad = wants_grad(q) || wants_grad(k) || wants_grad(v);
  Tensor out = Tensor::zeros({batch * t_q, d}, needs_grad);

  auto probs = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(batch) * heads * t_q * t_k);
  std::vector<float> scores(static_cast<std::size_t>(t_q) * t_k);
  std::vector<std::uint8_t> row_mask(static_cast<std::size_t>(t_k));

  for (int b = 0; b < batch; ++b) {
    const std::uint8_t* pad_b = key_pad.empty() ? nullptr : key_pad.data() + static_cast<std::ptrdiff_t>(b) * t_k;
    for (int h = 0; h < heads; ++h) {
      const float* qv = q.data() + static_cast<std::ptrdiff_t>(b) * t_q * d + h * dk;
      const float* kv2 = k.data() + static_cast<std::ptrdiff_t>(b) * t_k * d + h * dk;
      const float* vv = v.data() + static_cast<std::ptrdiff_t>(b) * t_k * d + h * dk;
      detail::gemm_nt(t_q, dk, t_k, qv, d, kv2, d, scores.data(), t_k, false);
      float* pblock = probs->data() +
                      (static_cast<std::ptrdiff_t>(b) * heads + h) * t_q * t_k;
      for (int i = 0; i < t_q; ++i) {
        const std::uint8_t* mrow = nullptr;
        if (pad_b || causal) {
          for (int j = 0; j < t_k; ++j) {
            row_mask[static_cast<std::size_t>(j)] =
                static_cast<std::uint8_t>(((pad_b && pad_b[j]) || (causal && j > i)) ? 1 : 0);
          }
          mrow = row_mask.data();
        }
        softmax_row(scores.data() + static_cast<std::ptrdiff_t>(i) * t_k, mrow,
                    t_k, inv_sqrt_dk, pblock + static_cast<std::ptrdiff_t>(i) * t_k);
      }
      float* ov = out.data() + static_cast<std::ptrdiff_t>(b) * t_q * d + h * dk;
      detail::gemm_nn(t_q, t_k, dk, pblock, t_k, vv, d, ov, d, false);
    }
  }
  if (probs_out) *probs_out = probs;

  if (tape && needs_grad) {
    Tensor qt = q, kt = k, vt = v, ot = out;
    tape->record("attention_heads", out, {q, k, v},
                 [qt, kt, vt, ot, probs, batch, t_q, t_k, heads, dk, d,
                  inv_sqrt_dk]() mutable {
      std::vector<float> dp(static_cast<std::size_t>(t_q) * t_k);
      const float* g = ot.grad().data();
      float* gq = qt.requires_grad() ? qt.grad().data() : nullptr;
      float* gk = kt.requires_grad() ? kt.grad().data() : nullptr;
      float* gv = vt.requires_grad() ? vt.grad().data() : nullptr;
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
          const float* qv = qt.data() + static_cast<std::ptrdiff_t>(b) * t_q * d + h * dk;
          const float* kv2 = kt.data() + static_cast<std::ptrdiff_t>(b) * t_k * d + h * dk;
          const float* vv = vt.data() + static_cast<std::ptrdiff_t>(b) * t_k * d + h * dk;
          const float* pblock = probs->data() +
                                (static_cast<std::ptrdiff_t>(b) * heads + h) * t_q * t_k;
          const float* gctx = g + static_cast<std::ptrdiff_t>(b) * t_q * d + h * dk;
          // dP = dCtx * V^T
          detail::gemm_nt(t_q, dk, t_k, gctx, d, vv, d, dp.data(), t_k, false);
          // dS = scale * P o (dP - rowdot(dP, P))
          for (int i = 0; i < t_q; ++i) {
            float* dprow = dp.data() + static_cast<std::ptrdiff_t>(i) * t_k;
            const float* prow = pblock + static_cast<std::ptrdiff_t>(i) * t_k;
            float dot = 0.0f;
            for (int j = 0; j < t_k; ++j) dot += dprow[j] * prow[j];
            for (int j = 0; j < t_k; ++j) {
              dprow[j] = inv_sqrt_dk * prow[j] * (dprow[j] - dot);
            }
          }
          if (gv) {
            detail::gemm_tn(t_q, t_k, dk, pblock, t_k, gctx, d,
                            gv + static_cast<std::ptrdiff_t>(b) * t_k * d + h * dk, d, true);
          }
          if (gq) {
            detail::gemm_nn(t_q, t_k, dk, dp.data(), t_k, kv2, d,
                            gq + static_cast<std::ptrdiff_t>(b) * t_q * d + h * dk, d, true);
          }
          if (gk) {
            detail::gemm_tn(t_q, t_k, dk, dp.data(), t_k, qv, d,
                            gk + static_cast<std::ptrdiff_t>(b) * t_k * d + h * dk, d, true);
          }
        }
      }
    });
  }
  return out;
}

double finite_diff_check(const std::function<double()>& f, Tensor param,
                         const std::vector<float>& analytic, double h,
                         int max_coords, Rng& rng) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");
  const std::int64_t n = param.numel();
  if (static_cast<std::int64_t>(analytic.size()) != n) {
    throw std::invalid_argument("finite_diff_check: gradient size mismatch");
  }
  std::vector<std::int64_t> coords;
  if (max_coords >= n) {
    coords.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
  } else {
    std::unordered_set<std::int64_t> seen;
    while (static_cast<int>(coords.size()) < max_coords) {
      const auto c = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
      if (seen.insert(c).second) coords.push_back(c);
    }
  }
  double worst = 0.0;
  float* pd = param.data();
  for (const std::int64_t c : coords) {
    const float orig = pd[c];
    const float hi = orig + static_cast<float>(h);
    const float lo = orig - static_cast<float>(h);
    pd[c] = hi;
    const double f_hi = f();
    pd[c] = lo;
    const double f_lo = f();
    pd[c] = orig;
    if (!std::isfinite(f_hi) || !std::isfinite(f_lo)) {
      throw std::runtime_error("finite_diff_check: non-finite objective");
    }
    const double denom = static_cast<double>(hi) - static_cast<double>(lo);
    const double g_fd = (f_hi - f_lo) / denom;
    const double g_ad = static_cast<double>(analytic[static_cast<std::size_t>(c)]);
    const double rel = std::abs(g_ad - g_fd) /
                       std::max(1.0, std::max(std::abs(g_ad), std::abs(g_fd)));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace moble
