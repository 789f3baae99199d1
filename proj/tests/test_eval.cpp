#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "moble/eval.hpp"
#include "moble/rng.hpp"

using namespace moble;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 4;
  cfg.d_ff = 64;
  cfg.dropout = 0.1f;
  cfg.t_max = 50;
  cfg.vocab_size = 86;
  return cfg;
}

Batch small_batch(const std::vector<std::string>& texts) {
  return make_batches(texts, build_vocab(), static_cast<int>(texts.size()), std::nullopt)[0];
}

// Independent full-matrix DP oracle for edit distance.
int levenshtein_oracle(const std::string& a, const std::string& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) dp[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) dp[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      dp[i][j] = std::min({dp[i - 1][j] + 1, dp[i][j - 1] + 1,
                           dp[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
  }
  return dp[n][m];
}

// Hand-rolled restatement of the token-accuracy normalization.
double token_acc_oracle(std::vector<int> hyp, std::vector<int> ref) {
  auto norm = [](std::vector<int> v) {
    if (!v.empty() && v.front() == 1) v.erase(v.begin());
    std::vector<int> out;
    for (const int id : v) {
      if (id == 2 || id == 0) break;
      out.push_back(id);
    }
    return out;
  };
  const auto h = norm(std::move(hyp));
  const auto r = norm(std::move(ref));
  const std::size_t len = std::max(h.size(), r.size());
  if (len == 0) return 1.0;
  std::size_t eq = 0;
  for (std::size_t i = 0; i < len; ++i) {
    if (i < h.size() && i < r.size() && h[i] == r[i]) ++eq;
  }
  return static_cast<double>(eq) / static_cast<double>(len);
}

std::vector<int> random_ids(Rng& rng, int lo_len, int hi_len) {
  const int len = lo_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi_len - lo_len + 1)));
  std::vector<int> ids;
  for (int i = 0; i < len; ++i) ids.push_back(3 + static_cast<int>(rng.below(83)));
  return ids;
}

}  // namespace

TEST_CASE("exact match percentages") {
  CHECK(metric_exact({"a", "b"}, {"a", "b"}) == 100.0);
  CHECK(metric_exact({"a", "b"}, {"x", "y"}) == 0.0);
  CHECK(metric_exact({"a", "b", "c", "d"}, {"a", "x", "y", "z"}) == 25.0);
  CHECK_THROWS_AS(metric_exact({"a"}, {}), std::invalid_argument);
}

TEST_CASE("token accuracy follows the strip/truncate/pad rule") {
  CHECK(metric_token_acc({{3, 4, 5}}, {{3, 4, 5}}) == 100.0);
  // hyp "ab" vs ref "abc": pad the shorter side, 2 of 3 match.
  CHECK(metric_token_acc({{3, 4}}, {{3, 4, 5}}) == doctest::Approx(200.0 / 3).epsilon(1e-9));
  // bos stripped, eos truncates.
  CHECK(metric_token_acc({{1, 3, 4, 2, 9, 9}}, {{3, 4}}) == 100.0);
  // single corruption at position i drops accuracy by exactly 100/len.
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto ref = random_ids(rng, 5, 20);
    auto hyp = ref;
    const std::size_t i = rng.below(ref.size());
    hyp[i] = hyp[i] == 3 ? 4 : 3;
    const double acc = metric_token_acc({hyp}, {ref});
    CHECK(acc == doctest::Approx(100.0 - 100.0 / static_cast<double>(ref.size())).epsilon(1e-9));
  }
}

TEST_CASE("token accuracy matches the hand-rolled oracle on 200 random pairs") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    // Raw sequences may carry bos/eos/pad framing.
    auto mk = [&]() {
      std::vector<int> v = random_ids(rng, 0, 15);
      if (rng.below(2)) v.insert(v.begin(), 1);
      if (rng.below(2)) v.push_back(2);
      if (rng.below(3) == 0) v.push_back(0);
      return v;
    };
    const auto hyp = mk();
    const auto ref = mk();
    CHECK(metric_token_acc({hyp}, {ref}) ==
          doctest::Approx(100.0 * token_acc_oracle(hyp, ref)).epsilon(1e-12));
  }
}

TEST_CASE("random-vs-random token accuracy sits at chance level") {
  Rng rng(11);
  std::vector<std::vector<int>> hyps, refs;
  for (int i = 0; i < 20000; ++i) {
    hyps.push_back(random_ids(rng, 8, 30));
    refs.push_back(random_ids(rng, 8, 30));
  }
  const double acc = metric_token_acc(hyps, refs);
  CHECK(acc > 0.8);
  CHECK(acc < 1.7);  // ~1/|V| which is about 1.16-1.2%
}

TEST_CASE("levenshtein similarity closed forms and oracle agreement") {
  CHECK(metric_levsim("same", "same") == 100.0);
  CHECK(metric_levsim("abc", "abd") == doctest::Approx(200.0 / 3).epsilon(1e-9));
  CHECK(metric_levsim("", "") == 100.0);  // max(1, 0) guard
  Rng rng(13);
  const Vocabulary& vocab = build_vocab();
  for (int trial = 0; trial < 1000; ++trial) {
    auto mk = [&]() {
      const int len = static_cast<int>(rng.below(20));
      std::string s;
      for (int i = 0; i < len; ++i) s.push_back(vocab.char_of(3 + static_cast<int>(rng.below(83))));
      return s;
    };
    const std::string a = mk(), b = mk();
    CHECK(levenshtein_distance(a, b) == levenshtein_oracle(a, b));
    CHECK(metric_levsim(a, b) == metric_levsim(b, a));  // symmetry
  }
}

TEST_CASE("greedy decoding stops per sequence and breaks ties low") {
  const ModelConfig cfg = tiny_config();
  const Vocabulary& vocab = build_vocab();
  const Batch batch = small_batch({"abcd", "xy"});

  SUBCASE("forced eos at step one gives an empty hypothesis") {
    ModelParams model = init_model(cfg, 1);
    std::fill(model.generator_w.vec().begin(), model.generator_w.vec().end(), 0.0f);
    model.generator_b.vec()[Vocabulary::eos_id] = 10.0f;
    const auto memories = encode(model, batch, false);
    const auto results = greedy_decode(model, memories, cfg.t_max);
    for (const auto& r : results) {
      CHECK(r.ids == std::vector<int>{Vocabulary::eos_id});
      CHECK(r.stop == DecodeResult::Stop::Eos);
      CHECK(detokenize(r.ids, vocab) == "");
    }
  }
  SUBCASE("ties go to the lowest token id") {
    ModelParams model = init_model(cfg, 1);
    std::fill(model.generator_w.vec().begin(), model.generator_w.vec().end(), 0.0f);
    model.generator_b.vec()[9] = 10.0f;
    model.generator_b.vec()[5] = 10.0f;  // tie with id 9
    const auto memories = encode(model, batch, false);
    const auto results = greedy_decode(model, memories, cfg.t_max);
    for (const auto& r : results) {
      CHECK(r.stop == DecodeResult::Stop::TMax);
      CHECK(static_cast<int>(r.ids.size()) == cfg.t_max);
      for (const int id : r.ids) CHECK(id == 5);
    }
  }
}

TEST_CASE("cross decoding with itself is bit-identical to self-decoding") {
  const ModelConfig cfg = tiny_config();
  const ModelParams model = init_model(cfg, 21);
  const Batch batch = small_batch({"first sequence", "second one", "third!"});
  const auto via_cross = cross_decode(model, model, batch);
  const auto memories = encode(model, batch, false);
  const auto direct = greedy_decode(model, memories, cfg.t_max);
  REQUIRE(via_cross.size() == direct.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(via_cross[i].ids == direct[i].ids);
    CHECK(via_cross[i].stop == direct[i].stop);
  }
  CHECK_THROWS_AS(
      cross_decode(model, init_model(ModelConfig{.d_model = 64, .n_heads = 4}, 1), batch),
      std::invalid_argument);
}

TEST_CASE("pair matrix covers every ordered pair on shared batches") {
  const ModelConfig cfg = tiny_config();
  const ModelParams m1 = init_model(cfg, 1);
  const ModelParams m2 = init_model(cfg, 2);
  const ModelParams m3 = init_model(cfg, 3);
  const Vocabulary& vocab = build_vocab();
  const auto corpus = generate_corpus(31, 24, 8, 30, vocab);
  const auto batches = make_batches(corpus, vocab, 12, std::nullopt);
  const std::vector<NamedModel> models = {{"M1", &m1}, {"M2", &m2}, {"M3", &m3}};
  const auto rows = pair_matrix(models, batches);
  REQUIRE(rows.size() == 9);
  for (const auto& row : rows) {
    CHECK(row.n_samples == 24);
    CHECK(row.exact_pct >= 0.0);
    CHECK(row.exact_pct <= 100.0);
    CHECK(row.token_pct >= 0.0);
    CHECK(row.token_pct <= 100.0);
    CHECK(row.levsim_pct >= 0.0);
    CHECK(row.levsim_pct <= 100.0);
  }
  // Self rows appear exactly once per model, in order.
  int self_rows = 0;
  for (const auto& row : rows) {
    if (row.encoder_id == row.decoder_id) ++self_rows;
  }
  CHECK(self_rows == 3);

  // Untrained models decode garbage everywhere: no binding advantage.
  std::map<std::string, std::string> classes = {{"M1", "a"}, {"M2", "b"}, {"M3", "c"}};
  CHECK(std::abs(binding_advantage(rows, classes)) < 5.0);
}

TEST_CASE("binding advantage separates self from cross by key class") {
  std::vector<MetricsRow> rows;
  auto mk = [](const char* e, const char* d, double token) {
    MetricsRow r;
    r.encoder_id = e;
    r.decoder_id = d;
    r.token_pct = token;
    r.n_samples = 768;
    return r;
  };
  // Paper-like numbers: self/clone near 98, cross near 1.
  rows.push_back(mk("M1", "M1", 98.82));
  rows.push_back(mk("M1", "M1_CLONE", 98.82));
  rows.push_back(mk("M1_CLONE", "M1", 98.82));
  rows.push_back(mk("M1_CLONE", "M1_CLONE", 98.82));
  rows.push_back(mk("M2", "M2", 98.49));
  rows.push_back(mk("M1", "M2", 1.03));
  rows.push_back(mk("M2", "M1", 0.98));
  rows.push_back(mk("M2", "M1_CLONE", 1.01));
  rows.push_back(mk("M1_CLONE", "M2", 1.05));
  const std::map<std::string, std::string> classes = {
      {"M1", "k1"}, {"M1_CLONE", "k1"}, {"M2", "k2"}};
  const double adv = binding_advantage(rows, classes);
  CHECK(adv == doctest::Approx(97.0).epsilon(0.01));

  // All-identical models: self == cross is impossible to form; advantage over
  // a single class throws (no cross rows).
  const std::map<std::string, std::string> one_class = {
      {"M1", "k"}, {"M1_CLONE", "k"}, {"M2", "k"}};
  CHECK_THROWS_AS(binding_advantage(rows, one_class), std::invalid_argument);

  // Identical metrics on both sides cancel to zero.
  std::vector<MetricsRow> flat;
  flat.push_back(mk("A", "A", 42.0));
  flat.push_back(mk("A", "B", 42.0));
  flat.push_back(mk("B", "A", 42.0));
  flat.push_back(mk("B", "B", 42.0));
  const std::map<std::string, std::string> two = {{"A", "a"}, {"B", "b"}};
  CHECK(binding_advantage(flat, two) == 0.0);
}
