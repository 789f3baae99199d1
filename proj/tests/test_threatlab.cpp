#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "moble/rng.hpp"
#include "moble/threatlab.hpp"

using namespace moble;

namespace {

Memory random_memory(Rng& rng, int length, int d) {
  Memory m;
  m.length = length;
  m.d_model = d;
  m.values.resize(static_cast<std::size_t>(length) * d);
  for (float& v : m.values) v = rng.uniform_range(-1.0f, 1.0f);
  m.src_pad_mask.assign(static_cast<std::size_t>(length), 0);
  return m;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 4;
  cfg.d_ff = 64;
  cfg.t_max = 50;
  return cfg;
}

}  // namespace

TEST_CASE("self-alignment recovers the identity map") {
  const int d = 16;
  Rng rng(3);
  std::vector<Memory> mems;
  for (int i = 0; i < 6; ++i) mems.push_back(random_memory(rng, 10, d));
  const Adapter a = fit_linear_adapter(mems, mems, 1e-8);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      const float expect = i == j ? 1.0f : 0.0f;
      CHECK(a.w.data()[i * d + j] == doctest::Approx(expect).epsilon(1e-3));
    }
    CHECK(std::abs(a.bias.data()[i]) < 1e-3f);
  }
}

TEST_CASE("exactly-linear pairs are recovered to 1e-4") {
  const int d = 12;
  Rng rng(5);
  Tensor true_w = Tensor::zeros({d, d});
  std::vector<float> true_b(static_cast<std::size_t>(d));
  for (int i = 0; i < d * d; ++i) true_w.data()[i] = rng.uniform_range(-0.8f, 0.8f);
  for (float& v : true_b) v = rng.uniform_range(-0.5f, 0.5f);

  std::vector<Memory> src, dst;
  for (int s = 0; s < 12; ++s) {
    Memory a = random_memory(rng, 14, d);
    Memory b = a;
    for (int r = 0; r < a.length; ++r) {
      for (int j = 0; j < d; ++j) {
        float v = true_b[static_cast<std::size_t>(j)];
        for (int i = 0; i < d; ++i) {
          v += a.values[static_cast<std::size_t>(r) * d + i] * true_w.data()[i * d + j];
        }
        b.values[static_cast<std::size_t>(r) * d + j] = v;
      }
    }
    src.push_back(std::move(a));
    dst.push_back(std::move(b));
  }
  const Adapter fit = fit_linear_adapter(src, dst, 1e-10);
  for (int i = 0; i < d * d; ++i) {
    CHECK(fit.w.data()[i] == doctest::Approx(true_w.data()[i]).epsilon(1e-4));
  }
  for (int j = 0; j < d; ++j) {
    CHECK(fit.bias.data()[j] == doctest::Approx(true_b[static_cast<std::size_t>(j)]).epsilon(1e-4));
  }
}

TEST_CASE("huge ridge shrinks W toward zero and bias toward the target mean") {
  const int d = 8;
  Rng rng(7);
  std::vector<Memory> src, dst;
  for (int s = 0; s < 8; ++s) {
    src.push_back(random_memory(rng, 10, d));
    dst.push_back(random_memory(rng, 10, d));
  }
  const Adapter a = fit_linear_adapter(src, dst, 1e9);
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  int rows = 0;
  for (const Memory& m : dst) {
    for (int r = 0; r < m.length; ++r) {
      for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += m.values[static_cast<std::size_t>(r) * d + j];
    }
    rows += m.length;
  }
  for (int j = 0; j < d; ++j) {
    CHECK(std::abs(a.w.data()[j * d + j]) < 1e-4f);
    CHECK(a.bias.data()[j] == doctest::Approx(mean[static_cast<std::size_t>(j)] / rows).epsilon(1e-4));
  }
}

TEST_CASE("singular normal equations demand regularization") {
  const int d = 8;
  Rng rng(9);
  const Memory proto = random_memory(rng, 1, d);
  // Identical rows: rank-1 design, singular at lambda = 0.
  std::vector<Memory> src;
  for (int i = 0; i < 30; ++i) {
    Memory m = proto;
    src.push_back(m);
  }
  CHECK_THROWS_AS(fit_linear_adapter(src, src, 0.0), std::runtime_error);
  CHECK_NOTHROW(fit_linear_adapter(src, src, 1e-3));
  // Too few rows is a contract violation.
  std::vector<Memory> few = {random_memory(rng, 4, d)};
  CHECK_THROWS_AS(fit_linear_adapter(few, few, 1e-3), std::invalid_argument);
}

TEST_CASE("identity adapter on its own memories reproduces self-decoding exactly") {
  const ModelConfig cfg = tiny_config();
  const ModelParams model = init_model(cfg, 77);
  const Vocabulary& vocab = build_vocab();
  const auto corpus = generate_corpus(55, 16, 8, 30, vocab);
  const Batch batch = make_batches(corpus, vocab, 16, std::nullopt)[0];

  Adapter identity;
  identity.w = Tensor::zeros({cfg.d_model, cfg.d_model});
  for (int i = 0; i < cfg.d_model; ++i) {
    identity.w.data()[static_cast<std::ptrdiff_t>(i) * cfg.d_model + i] = 1.0f;
  }
  identity.bias = Tensor::zeros({cfg.d_model});
  identity.source_id = "M";
  identity.target_id = "M";

  const MetricsRow via_adapter = adapter_cross_decode(model, identity, model, batch);
  const auto direct = cross_decode(model, model, batch);
  const MetricsRow self_row = score_decode("M", "M", direct, batch, vocab);
  CHECK(via_adapter.exact_pct == self_row.exact_pct);
  CHECK(via_adapter.token_pct == self_row.token_pct);
  CHECK(via_adapter.levsim_pct == self_row.levsim_pct);
}

TEST_CASE("latent quantization respects the symmetric quantizer bound") {
  Rng rng(11);
  const Memory m = random_memory(rng, 20, 16);
  for (const int bits : {2, 4, 8, 12, 16}) {
    PerturbSpec spec;
    spec.mode = PerturbSpec::Mode::Quantize;
    spec.bits = bits;
    const Memory q = perturb_latent(m, spec);
    float max_abs = 0.0f;
    for (const float v : m.values) max_abs = std::max(max_abs, std::abs(v));
    const float step = max_abs / static_cast<float>((1 << (bits - 1)) - 1);
    for (std::size_t i = 0; i < m.values.size(); ++i) {
      CHECK(std::abs(q.values[i] - m.values[i]) <= step / 2 + 1e-7f);
    }
  }
  SUBCASE("16 bits is a near-identity") {
    PerturbSpec spec;
    spec.mode = PerturbSpec::Mode::Quantize;
    spec.bits = 16;
    const Memory q = perturb_latent(m, spec);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m.values.size(); ++i) {
      num += std::pow(static_cast<double>(q.values[i]) - m.values[i], 2);
      den += std::pow(static_cast<double>(m.values[i]), 2);
    }
    CHECK(std::sqrt(num / den) < 1e-3);
  }
  SUBCASE("bits outside [2,16] are rejected") {
    PerturbSpec spec;
    spec.mode = PerturbSpec::Mode::Quantize;
    spec.bits = 1;
    CHECK_THROWS_AS(perturb_latent(m, spec), std::invalid_argument);
    spec.bits = 17;
    CHECK_THROWS_AS(perturb_latent(m, spec), std::invalid_argument);
  }
}

TEST_CASE("gaussian perturbation is seeded and vanishes at sigma 0") {
  Rng rng(13);
  const Memory m = random_memory(rng, 12, 8);
  PerturbSpec spec;
  spec.mode = PerturbSpec::Mode::Gaussian;
  spec.sigma = 0.0;
  spec.seed = 5;
  CHECK(perturb_latent(m, spec).values == m.values);

  spec.sigma = 0.1;
  const Memory n1 = perturb_latent(m, spec);
  const Memory n2 = perturb_latent(m, spec);
  CHECK(n1.values == n2.values);
  CHECK(n1.values != m.values);
  spec.seed = 6;
  const Memory n3 = perturb_latent(m, spec);
  CHECK(n3.values != n1.values);
  spec.sigma = -0.5;
  CHECK_THROWS_AS(perturb_latent(m, spec), std::invalid_argument);
}
