#include "moble/data.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "moble/rng.hpp"

namespace moble {

namespace {
constexpr int kMaxTokens = 50;
constexpr const char* kSymbols = " .,:;!?-_/+*=()[]{}@#";
}  // namespace

Vocabulary::Vocabulary() {
  for (int& v : id_of_) v = -1;
  char_of_[pad_id] = '\0';
  char_of_[bos_id] = '\0';
  char_of_[eos_id] = '\0';
  int next = 3;
  for (char c = 'a'; c <= 'z'; ++c) char_of_[next++] = c;
  for (char c = 'A'; c <= 'Z'; ++c) char_of_[next++] = c;
  for (char c = '0'; c <= '9'; ++c) char_of_[next++] = c;
  for (const char* p = kSymbols; *p; ++p) char_of_[next++] = *p;
  if (next != 86) throw std::logic_error("vocabulary: bad table size");
  for (int id = 3; id < 86; ++id) {
    id_of_[static_cast<unsigned char>(char_of_[id])] = id;
  }
}

bool Vocabulary::contains(char c) const {
  return id_of_[static_cast<unsigned char>(c)] >= 0;
}

int Vocabulary::id_of(char c) const {
  const int id = id_of_[static_cast<unsigned char>(c)];
  if (id < 0) {
    throw std::invalid_argument(std::string("vocabulary: unknown character '") + c + "'");
  }
  return id;
}

char Vocabulary::char_of(int id) const {
  if (id < 3 || id >= 86) {
    throw std::invalid_argument("vocabulary: id has no character form");
  }
  return char_of_[id];
}

const Vocabulary& build_vocab() {
  static const Vocabulary vocab;
  return vocab;
}

std::vector<int> tokenize(const std::string& s, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(std::min<std::size_t>(s.size() + 2, kMaxTokens));
  ids.push_back(Vocabulary::bos_id);
  const std::size_t payload_cap = kMaxTokens - 2;
  for (std::size_t i = 0; i < s.size() && i < payload_cap; ++i) {
    ids.push_back(vocab.id_of(s[i]));
  }
  ids.push_back(Vocabulary::eos_id);
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  std::size_t i = 0;
  if (!ids.empty() && ids[0] == Vocabulary::bos_id) i = 1;
  for (; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id == Vocabulary::eos_id || id == Vocabulary::pad_id) break;
    if (id == Vocabulary::bos_id) continue;
    out.push_back(vocab.char_of(id));
  }
  return out;
}

std::vector<std::string> generate_corpus(std::uint64_t seed, int n, int len_lo,
                                         int len_hi, const Vocabulary& vocab) {
  if (len_lo > len_hi || len_lo < 0) {
    throw std::invalid_argument("generate_corpus: bad length bounds");
  }
  Rng rng(seed);
  const int span = len_hi - len_lo + 1;
  std::vector<std::string> corpus;
  corpus.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int len = len_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
    std::string s(static_cast<std::size_t>(len), '\0');
    for (int j = 0; j < len; ++j) {
      s[static_cast<std::size_t>(j)] =
          vocab.char_of(3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.payload_size()))));
    }
    corpus.push_back(std::move(s));
  }
  return corpus;
}

std::vector<Batch> batches_from_token_rows(const std::vector<std::vector<int>>& rows,
                                           int batch_size) {
  if (batch_size <= 0) throw std::invalid_argument("batches: batch size must be positive");
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(batch_size));
    Batch b;
    b.size = static_cast<int>(end - start);
    int t = 0;
    for (std::size_t i = start; i < end; ++i) {
      t = std::max(t, static_cast<int>(rows[i].size()));
    }
    b.max_len = t;
    b.token_ids.assign(static_cast<std::size_t>(b.size) * t, Vocabulary::pad_id);
    b.pad_mask.assign(static_cast<std::size_t>(b.size) * t, 1);
    b.lengths.resize(static_cast<std::size_t>(b.size));
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t r = i - start;
      b.lengths[r] = static_cast<int>(rows[i].size());
      for (std::size_t j = 0; j < rows[i].size(); ++j) {
        b.token_ids[r * t + j] = rows[i][j];
        b.pad_mask[r * t + j] = 0;
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<Batch> make_batches(const std::vector<std::string>& corpus,
                                const Vocabulary& vocab, int batch_size,
                                std::optional<std::uint64_t> shuffle_seed) {
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    order = rng.permutation(corpus.size());
  }
  std::vector<std::vector<int>> rows;
  rows.reserve(corpus.size());
  for (const std::size_t i : order) rows.push_back(tokenize(corpus[i], vocab));
  return batches_from_token_rows(rows, batch_size);
}

void save_corpus(const std::vector<std::string>& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
  for (const auto& s : corpus) out << s << '\n';
  if (!out) throw std::runtime_error("save_corpus: write failed for " + path);
}

std::vector<std::string> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  std::vector<std::string> corpus;
  std::string line;
  while (std::getline(in, line)) corpus.push_back(line);
  return corpus;
}

}  // namespace moble
