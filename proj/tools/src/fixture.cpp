#include "lmt/cli/fixture.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "lmt/corpus.hpp"
#include "lmt/error.hpp"
#include "lmt/rng.hpp"

namespace lmt::cli {

namespace {

constexpr std::array<std::string_view, 10> kEnglishSyllables = {"ba", "de", "ki", "lo", "mu",
                                                                "ne", "po", "ra", "si", "tu"};
constexpr std::array<std::string_view, 10> kCipherSyllables = {"zy", "xo", "qa", "vu", "jy",
                                                               "wo", "fa", "gu", "hy", "co"};

// Inverse-CDF sampling from fixed weights.
class Categorical {
 public:
  explicit Categorical(const std::vector<double>& weights) : cdf_(weights.size()) {
    std::partial_sum(weights.begin(), weights.end(), cdf_.begin());
  }
  std::size_t sample(Rng& rng) const {
    const double u = rng.uniform() * cdf_.back();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

struct BigramModel {
  Categorical unigram;
  std::vector<std::vector<std::size_t>> next;
  std::vector<Categorical> next_dist;
};

BigramModel sample_model(const CipherFixtureOptions& o, Rng& rng) {
  std::vector<double> w(o.vocab_size);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / std::pow(static_cast<double>(i + 1), o.zipf);
  BigramModel m{Categorical(w), {}, {}};
  const std::size_t fan = std::min(o.successors, o.vocab_size);
  std::vector<double> rank_weights(fan);
  for (std::size_t r = 0; r < fan; ++r) rank_weights[r] = 1.0 / static_cast<double>(r + 1);
  m.next.resize(o.vocab_size);
  for (auto& succ : m.next) {
    while (succ.size() < fan) {
      const std::size_t c = m.unigram.sample(rng);
      if (std::find(succ.begin(), succ.end(), c) == succ.end()) succ.push_back(c);
    }
    m.next_dist.emplace_back(rank_weights);
  }
  return m;
}

std::vector<std::vector<std::size_t>> sample_sentences(const BigramModel& m, const CipherFixtureOptions& o,
                                                       std::size_t n, Rng& rng) {
  std::vector<std::vector<std::size_t>> out(n);
  for (auto& s : out) {
    const std::size_t len = o.min_len + rng.uniform_int(o.max_len - o.min_len + 1);
    std::size_t w = m.unigram.sample(rng);
    s.push_back(w);
    while (s.size() < len) {
      if (rng.bernoulli(o.smoothing))
        w = m.unigram.sample(rng);
      else
        w = m.next[w][m.next_dist[w].sample(rng)];
      s.push_back(w);
    }
  }
  return out;
}

std::string render(const std::vector<std::size_t>& s, const std::vector<std::string>& words) {
  std::string line;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) line += ' ';
    line += words[s[i]];
  }
  return line;
}

void write_tsv(const std::string& path, const std::vector<std::pair<std::string, std::string>>& rows) {
  std::vector<std::string> lines;
  lines.reserve(rows.size());
  for (const auto& [a, b] : rows) lines.push_back(a + "\t" + b);
  write_lines(path, lines);
}

}  // namespace

void CipherFixtureOptions::validate() const {
  if (vocab_size < 10) throw InvalidArgument("cipher fixture: vocab_size must be >= 10");
  if (sentences == 0 || heldout == 0) throw InvalidArgument("cipher fixture: sentence counts must be positive");
  if (min_len == 0 || min_len > max_len) throw InvalidArgument("cipher fixture: need 0 < min_len <= max_len");
  if (successors == 0) throw InvalidArgument("cipher fixture: successors must be positive");
  if (!(smoothing >= 0.0 && smoothing <= 1.0)) throw InvalidArgument("cipher fixture: smoothing must be in [0, 1]");
  if (!(dict_dropout >= 0.0 && dict_dropout < 1.0))
    throw InvalidArgument("cipher fixture: dict_dropout must be in [0, 1)");
  if (!(split_prob >= 0.0 && split_prob <= 1.0)) throw InvalidArgument("cipher fixture: split_prob must be in [0, 1]");
  if (!(zipf >= 0.0)) throw InvalidArgument("cipher fixture: zipf must be >= 0");
}

std::string syllable_word(std::size_t index, bool cipher) {
  const auto& syl = cipher ? kCipherSyllables : kEnglishSyllables;
  const std::string digits = std::to_string(index);
  std::string w;
  for (char c : digits) w += syl[static_cast<std::size_t>(c - '0')];
  return w;
}

CipherFixture make_cipher_fixture(const CipherFixtureOptions& o) {
  o.validate();
  const std::size_t v = o.vocab_size;
  CipherFixture f;

  Rng model_rng(derive_seed(o.seed, 1));
  const BigramModel model = sample_model(o, model_rng);

  std::vector<std::size_t> perm(v);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng perm_rng(derive_seed(o.seed, 2));
  for (std::size_t i = v; i > 1; --i) std::swap(perm[i - 1], perm[perm_rng.uniform_int(i)]);

  for (std::size_t i = 0; i < v; ++i) {
    f.english_words.push_back(syllable_word(i, false));
    f.cipher_words.push_back(syllable_word(perm[i], true));
    f.dictionary.emplace_back(f.cipher_words[i], f.english_words[i]);
  }

  Rng train_rng(derive_seed(o.seed, 3)), valid_rng(derive_seed(o.seed, 4));
  const auto train = sample_sentences(model, o, o.sentences, train_rng);
  const auto valid = sample_sentences(model, o, o.heldout, valid_rng);
  for (const auto& s : train) {
    f.en_train.push_back(render(s, f.english_words));
    f.fg_train.push_back(render(s, f.cipher_words));
  }
  for (const auto& s : valid) {
    f.en_valid.push_back(render(s, f.english_words));
    f.fg_valid.push_back(render(s, f.cipher_words));
  }

  Rng drop_rng(derive_seed(o.seed, 5));
  for (const auto& entry : f.dictionary)
    if (!drop_rng.bernoulli(o.dict_dropout)) f.noisy_dictionary.push_back(entry);

  if (o.split_prob > 0.0) {
    Rng split_rng(derive_seed(o.seed, 6));
    std::vector<std::string> pieces(v);
    for (std::size_t i = 0; i < v; ++i) {
      const auto& w = f.cipher_words[i];
      if (w.size() >= 4 && split_rng.bernoulli(o.split_prob)) {
        const std::size_t cut = (w.size() / 4) * 2;
        pieces[i] = w.substr(0, cut) + "@@ " + w.substr(cut);
        ++f.split_types;
      } else {
        pieces[i] = w;
      }
    }
    for (const auto& s : train) f.fg_train_split.push_back(render(s, pieces));
    for (const auto& s : valid) f.fg_valid_split.push_back(render(s, pieces));
  }
  return f;
}

void write_cipher_fixture(const CipherFixture& f, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path d(dir);
  write_lines((d / "en.train.txt").string(), f.en_train);
  write_lines((d / "en.valid.txt").string(), f.en_valid);
  write_lines((d / "fg.train.txt").string(), f.fg_train);
  write_lines((d / "fg.valid.txt").string(), f.fg_valid);
  write_tsv((d / "dictionary.tsv").string(), f.dictionary);
  write_tsv((d / "dictionary.noisy.tsv").string(), f.noisy_dictionary);
  if (!f.fg_train_split.empty()) {
    write_lines((d / "fg.split.train.txt").string(), f.fg_train_split);
    write_lines((d / "fg.split.valid.txt").string(), f.fg_valid_split);
  }
}

}  // namespace lmt::cli
