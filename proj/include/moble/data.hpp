#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace moble {

// Fixed 86-token character inventory: ids 0..2 are the specials, then
// lowercase, uppercase, digits, and 21 symbols in a pinned order so that
// checkpoints and corpora stay compatible across builds.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int bos_id = 1;
  static constexpr int eos_id = 2;

  Vocabulary();

  int size() const { return 86; }
  int payload_size() const { return 83; }

  bool contains(char c) const;
  int id_of(char c) const;       // throws on unknown characters
  char char_of(int id) const;    // payload ids only (3..85)

 private:
  int id_of_[256];
  char char_of_[86];
};

const Vocabulary& build_vocab();

// Token-id matrix padded to the batch-local maximum length.
struct Batch {
  int size = 0;        // rows
  int max_len = 0;     // columns
  std::vector<int> token_ids;           // size * max_len, row-major
  std::vector<std::uint8_t> pad_mask;   // true exactly at pad positions
  std::vector<int> lengths;             // unpadded token count per row

  int at(int row, int col) const { return token_ids[static_cast<std::size_t>(row) * max_len + col]; }
};

// [bos, chars..., eos], truncated so the total length never exceeds 50.
std::vector<int> tokenize(const std::string& s, const Vocabulary& vocab);

// Strips a leading bos, stops at the first eos or pad, maps the rest back.
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

// n random payload strings with lengths uniform on [len_lo, len_hi]; a pure
// function of the seed, independent of any model stream.
std::vector<std::string> generate_corpus(std::uint64_t seed, int n, int len_lo,
                                         int len_hi, const Vocabulary& vocab);

// Tokenizes, optionally shuffles sequence order, and chunks into batches with
// batch-local padding. No seed means the corpus order is kept as-is.
std::vector<Batch> make_batches(const std::vector<std::string>& corpus,
                                const Vocabulary& vocab, int batch_size,
                                std::optional<std::uint64_t> shuffle_seed);

std::vector<Batch> batches_from_token_rows(const std::vector<std::vector<int>>& rows,
                                           int batch_size);

// One payload per line, UTF-8.
void save_corpus(const std::vector<std::string>& corpus, const std::string& path);
std::vector<std::string> load_corpus(const std::string& path);

}  // namespace moble
