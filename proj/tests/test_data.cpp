#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>

#include "moble/data.hpp"
#include "moble/rng.hpp"

using namespace moble;

TEST_CASE("vocabulary table is the pinned 86-token inventory") {
  const Vocabulary& v = build_vocab();
  CHECK(v.size() == 86);
  CHECK(Vocabulary::pad_id == 0);
  CHECK(Vocabulary::bos_id == 1);
  CHECK(Vocabulary::eos_id == 2);
  CHECK(v.id_of('a') == 3);
  CHECK(v.id_of('z') == 28);
  CHECK(v.id_of('A') == 29);
  CHECK(v.id_of('Z') == 54);
  CHECK(v.id_of('0') == 55);
  CHECK(v.id_of('9') == 64);
  CHECK(v.id_of(' ') == 65);
  CHECK(v.id_of('.') == 66);
  CHECK(v.id_of('#') == 85);
  // Bijection over the 83 payload characters.
  for (int id = 3; id < 86; ++id) {
    CHECK(v.id_of(v.char_of(id)) == id);
  }
  CHECK_THROWS_AS(v.id_of('\t'), std::invalid_argument);
  CHECK_THROWS_AS(v.char_of(0), std::invalid_argument);
}

TEST_CASE("tokenize frames and truncates") {
  const Vocabulary& v = build_vocab();
  CHECK(tokenize("a1!", v) == std::vector<int>{1, 3, 56, 70, 2});
  CHECK(tokenize("", v) == std::vector<int>{1, 2});
  const std::string sixty(60, 'q');
  const auto ids = tokenize(sixty, v);
  CHECK(ids.size() == 50);
  CHECK(ids.front() == Vocabulary::bos_id);
  CHECK(ids.back() == Vocabulary::eos_id);
  CHECK_THROWS_AS(tokenize("\n", v), std::invalid_argument);
}

TEST_CASE("detokenize strips framing") {
  const Vocabulary& v = build_vocab();
  CHECK(detokenize({1, 3, 4, 2}, v) == "ab");
  CHECK(detokenize({1, 2}, v) == "");
  CHECK(detokenize({1, 3, 0, 4}, v) == "a");  // stops at pad
}

TEST_CASE("tokenize/detokenize round-trips random payload strings") {
  const Vocabulary& v = build_vocab();
  Rng rng(41);
  for (int i = 0; i < 1000; ++i) {
    const int len = static_cast<int>(rng.below(31));
    std::string s;
    for (int j = 0; j < len; ++j) {
      s.push_back(v.char_of(3 + static_cast<int>(rng.below(83))));
    }
    CHECK(detokenize(tokenize(s, v), v) == s);
  }
}

TEST_CASE("corpus generation is deterministic with uniform lengths") {
  const Vocabulary& v = build_vocab();
  const auto c1 = generate_corpus(99, 6000, 8, 30, v);
  const auto c2 = generate_corpus(99, 6000, 8, 30, v);
  CHECK(c1 == c2);
  const auto c3 = generate_corpus(100, 6000, 8, 30, v);
  CHECK(c1 != c3);
  for (const auto& s : c1) {
    CHECK(s.size() >= 8);
    CHECK(s.size() <= 30);
    for (const char ch : s) CHECK(v.contains(ch));
  }

  // Empirical length histogram over 100k draws: 23 buckets within 1/23 +- 0.5%.
  const auto big = generate_corpus(7, 100000, 8, 30, v);
  std::map<std::size_t, int> hist;
  for (const auto& s : big) hist[s.size()]++;
  CHECK(hist.size() == 23);
  for (const auto& [len, count] : hist) {
    const double frac = static_cast<double>(count) / 100000.0;
    CHECK(frac == doctest::Approx(1.0 / 23).epsilon(0.115));  // 0.5% absolute
    CHECK(std::abs(frac - 1.0 / 23) < 0.005);
  }
}

TEST_CASE("batches pad to the batch-local maximum") {
  const Vocabulary& v = build_vocab();
  const auto corpus = generate_corpus(11, 800, 8, 30, v);
  const auto batches = make_batches(corpus, v, 128, std::nullopt);
  CHECK(batches.size() == 7);  // 6 x 128 + 1 x 32
  for (std::size_t i = 0; i + 1 < batches.size(); ++i) CHECK(batches[i].size == 128);
  CHECK(batches.back().size == 32);

  for (const Batch& b : batches) {
    int longest = 0;
    for (int r = 0; r < b.size; ++r) longest = std::max(longest, b.lengths[static_cast<std::size_t>(r)]);
    CHECK(b.max_len == longest);
    CHECK(b.max_len < 50);  // batch-local max, not the global cap
    for (int r = 0; r < b.size; ++r) {
      CHECK(b.at(r, 0) == Vocabulary::bos_id);
      int eos_count = 0;
      for (int c = 0; c < b.max_len; ++c) {
        const bool is_pad = b.at(r, c) == Vocabulary::pad_id;
        CHECK((b.pad_mask[static_cast<std::size_t>(r) * b.max_len + c] != 0) == is_pad);
        if (b.at(r, c) == Vocabulary::eos_id) ++eos_count;
        if (c >= b.lengths[static_cast<std::size_t>(r)]) CHECK(is_pad);
      }
      CHECK(eos_count == 1);
      CHECK(b.at(r, b.lengths[static_cast<std::size_t>(r)] - 1) == Vocabulary::eos_id);
    }
  }

  // Shuffle determinism.
  const auto s1 = make_batches(corpus, v, 128, 5);
  const auto s2 = make_batches(corpus, v, 128, 5);
  const auto s3 = make_batches(corpus, v, 128, 6);
  CHECK(s1.size() == s2.size());
  CHECK(s1[0].token_ids == s2[0].token_ids);
  CHECK(s1[0].token_ids != s3[0].token_ids);
}

TEST_CASE("corpus export/import round-trips") {
  const Vocabulary& v = build_vocab();
  const auto corpus = generate_corpus(13, 50, 8, 30, v);
  const auto path = std::filesystem::temp_directory_path() / "moble_corpus_test.txt";
  save_corpus(corpus, path.string());
  const auto loaded = load_corpus(path.string());
  CHECK(loaded == corpus);
  std::filesystem::remove(path);
}
