#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "moble/rng.hpp"

namespace moble {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);

// Dense row-major float32 tensor. Storage is shared between handles; values
// are treated as immutable once an op has produced them (parameters are the
// exception: the optimizer rewrites leaf data between steps).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(d_->data.size()); }
  int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }

  float* data() { return d_->data.data(); }
  const float* data() const { return d_->data.data(); }
  std::vector<float>& vec() { return d_->data; }
  const std::vector<float>& vec() const { return d_->data; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool grad_allocated() const { return d_ && !d_->grad.empty(); }
  // Allocates (zeroed) on first use.
  std::vector<float>& grad();
  const std::vector<float>& grad() const { return d_->grad; }
  void zero_grad();
  void release_grad() { d_->grad.clear(); d_->grad.shrink_to_fit(); }

  float item() const;

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  struct Data {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;
  };
  std::shared_ptr<Data> d_;
};

// Recorded forward computation. Ops append nodes in execution order, which is
// already a topological order; backward() walks the list once in reverse.
class Tape {
 public:
  struct Node {
    const char* op;
    Tensor out;
    std::vector<Tensor> inputs;
    std::function<void()> backward;
  };

  void record(const char* op, Tensor out, std::vector<Tensor> inputs,
              std::function<void()> backward_fn);

  // Seeds d(loss)=1 and propagates to every recorded tensor that requires
  // grad. Leaves that never receive flow end up with zero-filled grads.
  // Consumes the tape: nodes are released as they are processed.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- differentiable primitives ----
// `tape` may be null: the op then runs forward-only (evaluation mode).

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, float c);
Tensor sum_all(Tape* tape, const Tensor& a);
// [N,d] + row vector [d]
Tensor add_row(Tape* tape, const Tensor& a, const Tensor& row);
// x is [B*T,d], pos is [T,d]; adds pos to every sequence in the pack.
Tensor add_position(Tape* tape, const Tensor& x, const Tensor& pos, int batch);
Tensor gelu(Tape* tape, const Tensor& x);
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, float eps);
// mask marks *disallowed* entries (true = masked). Applied as additive -1e9
// before the row softmax; masked outputs are exactly 0.
Tensor masked_softmax_rows(Tape* tape, const Tensor& scores,
                           const std::vector<std::uint8_t>& mask);
Tensor cross_entropy_logits(Tape* tape, const Tensor& logits,
                            const std::vector<int>& targets, int ignore_id);
Tensor dropout(Tape* tape, const Tensor& x, float p, Rng& rng, bool train);
Tensor embedding_gather(Tape* tape, const Tensor& table,
                        const std::vector<int>& ids);

// Fused scaled-dot-product attention over packed heads.
// q: [B*Tq, d], k/v: [B*Tk, d] with d = heads * d_head. key_pad (optional,
// B*Tk entries, true = padded key) and `causal` build the per-row mask.
// Softmax probabilities are saved for backward; `probs_out`, when non-null,
// receives them as [B, heads, Tq, Tk] row-major.
Tensor attention_heads(Tape* tape, const Tensor& q, const Tensor& k,
                       const Tensor& v, int batch, int t_q, int t_k, int heads,
                       const std::vector<std::uint8_t>& key_pad, bool causal,
                       std::shared_ptr<std::vector<float>>* probs_out = nullptr);

// ---- gradient checking ----

// Central-difference check of d(f)/d(param) against `analytic`, over up to
// `max_coords` coordinates sampled with `rng`. Returns the max of
// |g_ad - g_fd| / max(1, |g_ad|, |g_fd|). `f` re-evaluates the loss at the
// current parameter values; `param` is perturbed in place and restored.
double finite_diff_check(const std::function<double()>& f, Tensor param,
                         const std::vector<float>& analytic, double h,
                         int max_coords, Rng& rng);

namespace detail {
// C[M,N] (+)= A[M,K] * B[K,N]. Per-element accumulation over k is strictly
// ascending, so results are bit-identical to a naive per-element loop built
// in this translation-unit-independent way.
void gemm_nn(int m, int k, int n, const float* a, int lda, const float* b,
             int ldb, float* c, int ldc, bool accumulate);
// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(int m, int k, int n, const float* a, int lda, const float* b,
             int ldb, float* c, int ldc, bool accumulate);
// C[K,N] (+)= A[M,K]^T * B[M,N]
void gemm_tn(int m, int k, int n, const float* a, int lda, const float* b,
             int ldb, float* c, int ldc, bool accumulate);
}  // namespace detail

}  // namespace moble
