#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "moble/rng.hpp"
#include "moble/tensor.hpp"

using namespace moble;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false,
                     float lo = -1.0f, float hi = 1.0f) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t.data()[i] = rng.uniform_range(lo, hi);
  }
  return t;
}

// Naive triple-loop reference: one fused multiply-add per step, k ascending
// per output element, the same arithmetic contract the kernel honors.
std::vector<float> naive_matmul(const Tensor& a, const Tensor& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> c(static_cast<std::size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int kk = 0; kk < k; ++kk) {
        acc = std::fma(a.data()[i * k + kk], b.data()[kk * n + j], acc);
      }
      c[static_cast<std::size_t>(i) * n + j] = acc;
    }
  }
  return c;
}

}  // namespace

TEST_CASE("matmul identity and basis selection") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(nullptr, eye, m);
  CHECK(r.vec() == std::vector<float>{1, 2, 3, 4});

  Tensor sel = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  Tensor v = Tensor::from_data({2, 1}, {5, 7});
  Tensor r2 = matmul(nullptr, sel, v);
  CHECK(r2.vec() == std::vector<float>{5, 0});
}

TEST_CASE("matmul matches naive triple-loop oracle exactly") {
  Rng rng(7);
  for (const auto& [m, k, n] : {std::tuple{3, 4, 2}, {5, 7, 9}, {16, 33, 65}, {70, 256, 86}}) {
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = matmul(nullptr, a, b);
    const auto ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(c.data()[i] == ref[i]);
    }
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(nullptr, a, b), std::invalid_argument);
}

TEST_CASE("matmul gradients follow dA = dC B^T and dB = A^T dC") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({4, 2}, rng, true);
  Tape tape;
  Tensor c = matmul(&tape, a, b);
  Tensor loss = sum_all(&tape, c);
  tape.backward(loss);
  // d(sum)/dC is all-ones, so dA[i][k] = sum_j B[k][j], dB[k][j] = sum_i A[i][k].
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      float expect = 0.0f;
      for (int j = 0; j < 2; ++j) expect += b.data()[k * 2 + j];
      CHECK(a.grad()[static_cast<std::size_t>(i) * 4 + k] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  for (int k = 0; k < 4; ++k) {
    for (int j = 0; j < 2; ++j) {
      float expect = 0.0f;
      for (int i = 0; i < 3; ++i) expect += a.data()[i * 4 + k];
      CHECK(b.grad()[static_cast<std::size_t>(k) * 2 + j] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("masked softmax basics") {
  SUBCASE("symmetric row") {
    Tensor s = Tensor::from_data({1, 2}, {0, 0});
    Tensor p = masked_softmax_rows(nullptr, s, {});
    CHECK(p.data()[0] == doctest::Approx(0.5));
    CHECK(p.data()[1] == doctest::Approx(0.5));
  }
  SUBCASE("single allowed key") {
    Tensor s = Tensor::from_data({1, 2}, {3.7f, 100.0f});
    Tensor p = masked_softmax_rows(nullptr, s, {0, 1});
    CHECK(p.data()[0] == 1.0f);
    CHECK(p.data()[1] == 0.0f);
  }
  SUBCASE("closed form") {
    Tensor s = Tensor::from_data({1, 3}, {std::log(1.0f), std::log(2.0f), std::log(3.0f)});
    Tensor p = masked_softmax_rows(nullptr, s, {});
    CHECK(p.data()[0] == doctest::Approx(1.0 / 6).epsilon(1e-6));
    CHECK(p.data()[1] == doctest::Approx(2.0 / 6).epsilon(1e-6));
    CHECK(p.data()[2] == doctest::Approx(3.0 / 6).epsilon(1e-6));
  }
  SUBCASE("fully masked row is an error") {
    Tensor s = Tensor::from_data({1, 2}, {1, 2});
    CHECK_THROWS_AS(masked_softmax_rows(nullptr, s, {1, 1}), std::runtime_error);
  }
}

TEST_CASE("masked softmax rows are stochastic with masked entries exactly zero") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int rows = 1 + static_cast<int>(rng.below(6));
    const int cols = 2 + static_cast<int>(rng.below(10));
    Tensor s = random_tensor({rows, cols}, rng, false, -5.0f, 5.0f);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(rows) * cols, 0);
    for (int i = 0; i < rows; ++i) {
      // Mask a strict subset of each row.
      const int n_masked = static_cast<int>(rng.below(static_cast<std::uint64_t>(cols)));
      for (int j = 0; j < n_masked; ++j) {
        mask[static_cast<std::size_t>(i) * cols +
             rng.below(static_cast<std::uint64_t>(cols))] = 1;
      }
      bool all = true;
      for (int j = 0; j < cols; ++j) all = all && mask[static_cast<std::size_t>(i) * cols + j];
      if (all) mask[static_cast<std::size_t>(i) * cols] = 0;
    }
    Tensor p = masked_softmax_rows(nullptr, s, mask);
    for (int i = 0; i < rows; ++i) {
      float sum = 0.0f;
      for (int j = 0; j < cols; ++j) {
        const float v = p.data()[i * cols + j];
        sum += v;
        if (mask[static_cast<std::size_t>(i) * cols + j]) CHECK(v == 0.0f);
        CHECK(v >= 0.0f);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("layer norm closed forms") {
  Tensor gain = Tensor::full({4}, 1.0f);
  Tensor bias = Tensor::zeros({4});
  SUBCASE("constant row maps to zeros") {
    Tensor x = Tensor::full({1, 4}, 3.25f);
    Tensor y = layer_norm(nullptr, x, gain, bias, 1e-5f);
    for (int j = 0; j < 4; ++j) CHECK(y.data()[j] == doctest::Approx(0.0));
  }
  SUBCASE("already-normalized row survives up to eps") {
    Tensor x = Tensor::from_data({1, 2}, {1, -1});
    Tensor g2 = Tensor::full({2}, 1.0f);
    Tensor b2 = Tensor::zeros({2});
    Tensor y = layer_norm(nullptr, x, g2, b2, 1e-5f);
    CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(y.data()[1] == doctest::Approx(-1.0).epsilon(1e-4));
  }
  SUBCASE("zero gain collapses to the bias") {
    Rng rng(5);
    Tensor x = random_tensor({2, 4}, rng);
    Tensor g0 = Tensor::zeros({4});
    Tensor bc = Tensor::full({4}, 0.75f);
    Tensor y = layer_norm(nullptr, x, g0, bc, 1e-5f);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.75f);
  }
  SUBCASE("zero feature dimension is an error") {
    Tensor x = Tensor::zeros({1, 0});
    Tensor g0 = Tensor::zeros({0});
    CHECK_THROWS_AS(layer_norm(nullptr, x, g0, g0, 1e-5f), std::invalid_argument);
  }
}

TEST_CASE("gelu values against the erf oracle") {
  Tensor x = Tensor::from_data({1, 3}, {0.0f, 10.0f, 1.0f});
  Tensor y = gelu(nullptr, x);
  CHECK(y.data()[0] == 0.0f);
  CHECK(y.data()[1] == doctest::Approx(10.0).epsilon(1e-6));
  const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  CHECK(y.data()[2] == doctest::Approx(phi1).epsilon(1e-4));
}

TEST_CASE("cross entropy closed forms") {
  SUBCASE("uniform logits give ln |V|") {
    Tensor logits = Tensor::zeros({4, 86});
    Tensor loss = cross_entropy_logits(nullptr, logits, {5, 12, 0, 85}, -1);
    CHECK(loss.item() == doctest::Approx(std::log(86.0)).epsilon(1e-5));
  }
  SUBCASE("saturated correct logit gives ~0") {
    Tensor logits = Tensor::zeros({1, 5});
    logits.data()[2] = 1e4f;
    Tensor loss = cross_entropy_logits(nullptr, logits, {2}, -1);
    CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("all-ignored is an error") {
    Tensor logits = Tensor::zeros({3, 5});
    CHECK_THROWS_AS(cross_entropy_logits(nullptr, logits, {0, 0, 0}, 0), std::runtime_error);
  }
}

TEST_CASE("backward fills simple closed-form gradients") {
  Rng rng(13);
  SUBCASE("sum gives all-ones") {
    Tensor w = random_tensor({3, 5}, rng, true);
    Tape tape;
    Tensor loss = sum_all(&tape, w);
    tape.backward(loss);
    for (const float g : w.grad()) CHECK(g == 1.0f);
  }
  SUBCASE("half square norm gives w") {
    Tensor w = random_tensor({7}, rng, true);
    Tape tape;
    Tensor loss = scale(&tape, sum_all(&tape, mul(&tape, w, w)), 0.5f);
    tape.backward(loss);
    for (std::int64_t i = 0; i < w.numel(); ++i) {
      CHECK(w.grad()[static_cast<std::size_t>(i)] == doctest::Approx(w.data()[i]).epsilon(1e-6));
    }
  }
  SUBCASE("unused leaves get zero grads") {
    Tensor w = random_tensor({4}, rng, true);
    Tensor v = random_tensor({4}, rng, true);
    Tape tape;
    Tensor loss = sum_all(&tape, w);
    Tensor unused = mul(&tape, v, v);
    (void)unused;
    tape.backward(loss);
    REQUIRE(v.grad_allocated());
    for (const float g : v.grad()) CHECK(g == 0.0f);
  }
  SUBCASE("non-scalar loss is an error") {
    Tensor w = random_tensor({4}, rng, true);
    Tape tape;
    Tensor y = mul(&tape, w, w);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
}

TEST_CASE("backward is linear over summed losses") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const std::uint64_t seed = rng.next_u64();
    auto build = [&](int which) {
      // which: 0 -> loss1+loss2, 1 -> loss1, 2 -> loss2
      Rng local(seed);
      Tensor w = random_tensor({6}, local, true);
      Tensor u = random_tensor({6}, local, true);
      Tape tape;
      Tensor l1 = sum_all(&tape, mul(&tape, w, u));
      Tensor l2 = scale(&tape, sum_all(&tape, mul(&tape, w, w)), 0.5f);
      Tensor loss = which == 0 ? add(&tape, l1, l2) : (which == 1 ? l1 : l2);
      tape.backward(loss);
      return std::pair{w.grad(), u.grad()};
    };
    const auto [gw_both, gu_both] = build(0);
    const auto [gw_1, gu_1] = build(1);
    const auto [gw_2, gu_2] = build(2);
    for (std::size_t i = 0; i < gw_both.size(); ++i) {
      CHECK(gw_both[i] == doctest::Approx(gw_1[i] + gw_2[i]).epsilon(1e-5));
      CHECK(gu_both[i] == doctest::Approx(gu_1[i] + gu_2[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("ops are deterministic across repeated evaluation") {
  Rng rng(23);
  Tensor a = random_tensor({17, 33}, rng);
  Tensor b = random_tensor({33, 29}, rng);
  Tensor c1 = matmul(nullptr, a, b);
  Tensor c2 = matmul(nullptr, a, b);
  for (std::int64_t i = 0; i < c1.numel(); ++i) CHECK(c1.data()[i] == c2.data()[i]);
  Tensor g1 = gelu(nullptr, c1);
  Tensor g2 = gelu(nullptr, c2);
  for (std::int64_t i = 0; i < g1.numel(); ++i) CHECK(g1.data()[i] == g2.data()[i]);
}

TEST_CASE("dropout keeps scale and masks gradients") {
  Rng data_rng(29);
  Tensor x = random_tensor({50, 20}, data_rng, true);
  SUBCASE("train mode masks and rescales") {
    Rng rng(101);
    Tape tape;
    Tensor y = dropout(&tape, x, 0.5f, rng, true);
    int kept = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      if (y.data()[i] != 0.0f) {
        ++kept;
        CHECK(y.data()[i] == doctest::Approx(x.data()[i] * 2.0f));
      }
    }
    CHECK(kept > 300);
    CHECK(kept < 700);
  }
  SUBCASE("eval mode is the identity") {
    Rng rng(101);
    Tensor y = dropout(nullptr, x, 0.5f, rng, false);
    CHECK(y.same_storage(x));
  }
  SUBCASE("p outside [0,1) is rejected") {
    Rng rng(101);
    CHECK_THROWS_AS(dropout(nullptr, x, 1.0f, rng, true), std::invalid_argument);
  }
}

TEST_CASE("finite differences confirm analytic gradients") {
  SUBCASE("quadratic") {
    Tensor w = Tensor::from_data({1}, {3.0f}, true);
    Rng rng(1);
    auto f = [&]() { return static_cast<double>(w.data()[0]) * w.data()[0]; };
    const double err = finite_diff_check(f, w, {6.0f}, 1e-3, 1, rng);
    CHECK(err <= 1e-3);
  }
  SUBCASE("cross entropy on random logits matches softmax-minus-onehot") {
    Rng rng(31);
    Tensor logits = random_tensor({3, 4}, rng, true);
    const std::vector<int> targets = {2, 0, 3};
    Tape tape;
    Tensor loss = cross_entropy_logits(&tape, logits, targets, -1);
    tape.backward(loss);
    const std::vector<float> analytic = logits.grad();
    auto f = [&]() {
      return static_cast<double>(cross_entropy_logits(nullptr, logits, targets, -1).item());
    };
    Rng pick(33);
    const double err = finite_diff_check(f, logits, analytic, 1e-3, 12, pick);
    CHECK(err <= 1e-3);
  }
  SUBCASE("layer norm, gelu, softmax, attention composite") {
    Rng rng(37);
    Tensor x = random_tensor({4, 8}, rng, true);
    Tensor gain = Tensor::full({8}, 1.0f, true);
    Tensor bias = Tensor::zeros({8}, true);
    auto forward = [&](Tape* tape) {
      Tensor h = layer_norm(tape, x, gain, bias, 1e-5f);
      h = gelu(tape, h);
      Tensor q = h, k = h, v = h;
      Tensor ctx = attention_heads(tape, q, k, v, 2, 2, 2, 2, {}, true);
      return sum_all(tape, mul(tape, ctx, ctx));
    };
    Tape tape;
    Tensor loss = forward(&tape);
    tape.backward(loss);
    const std::vector<float> analytic = x.grad();
    auto f = [&]() { return static_cast<double>(forward(nullptr).item()); };
    Rng pick(39);
    const double err = finite_diff_check(f, x, analytic, 1e-2, 20, pick);
    CHECK(err <= 3e-3);
  }
}
