#include "lmt/word_alignment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "lmt/error.hpp"
#include "lmt/rng.hpp"

namespace lmt {

namespace {

using PairKey = std::uint64_t;

// Source id `null_id` stands for the NULL source token.
PairKey key_of(TokenId f, TokenId e) {
  return (static_cast<PairKey>(static_cast<std::uint32_t>(f)) << 32) | static_cast<std::uint32_t>(e);
}

TokenId source_of(PairKey k) { return static_cast<TokenId>(k >> 32); }
TokenId target_of(PairKey k) { return static_cast<TokenId>(static_cast<std::int32_t>(k & 0xffffffffu)); }

TokenId max_source_id(const ParallelCorpus& corpus) {
  TokenId m = -1;
  for (const auto& p : corpus.pairs)
    for (TokenId f : p.source) m = std::max(m, f);
  return m;
}

void sort_row(AlignmentModel::Row& row) {
  std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) { return a.target < b.target; });
}

AlignmentModel::Row normalized(AlignmentModel::Row row, double prune) {
  double total = 0.0;
  for (const auto& e : row) total += e.prob;
  if (total <= 0) return {};
  AlignmentModel::Row kept;
  for (const auto& e : row)
    if (e.prob / total >= prune) kept.push_back({e.target, e.prob / total});
  if (kept.empty()) {
    auto best = std::max_element(row.begin(), row.end(), [](const auto& a, const auto& b) { return a.prob < b.prob; });
    kept.push_back({best->target, 1.0});
  }
  double s = 0.0;
  for (const auto& e : kept) s += e.prob;
  for (auto& e : kept) e.prob /= s;
  sort_row(kept);
  return kept;
}

}  // namespace

double AlignmentModel::prob(TokenId source, TokenId target) const {
  if (source < 0 || static_cast<std::size_t>(source) >= rows.size()) return 0.0;
  for (const auto& e : rows[static_cast<std::size_t>(source)])
    if (e.target == target) return e.prob;
  return 0.0;
}

TokenId AlignmentModel::argmax(TokenId source) const {
  if (source < 0 || static_cast<std::size_t>(source) >= rows.size()) return -1;
  TokenId best = -1;
  double best_p = -1.0;
  for (const auto& e : rows[static_cast<std::size_t>(source)])
    if (e.target != kNullTarget && e.prob > best_p) {
      best = e.target;
      best_p = e.prob;
    }
  return best;
}

void AlignmentModel::save(const std::string& path, const Vocabulary& source_vocab,
                          const Vocabulary& target_vocab) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  char buf[32];
  for (std::size_t i = 0; i < source_vocab.size(); ++i) {
    out << source_vocab.token(static_cast<TokenId>(i));
    if (i < rows.size()) {
      for (const auto& e : rows[i]) {
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, e.prob);
        out << ' ' << (e.target == kNullTarget ? std::string(kNullToken) : target_vocab.token(e.target)) << ':'
            << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
      }
    }
    out << '\n';
  }
  if (!out) throw IoError(path, "write failed");
}

double ibm1_log_likelihood(const ParallelCorpus& corpus, const AlignmentModel& model) {
  const auto null_id = static_cast<TokenId>(model.rows.size());
  std::unordered_map<PairKey, double> t;
  for (std::size_t f = 0; f < model.rows.size(); ++f)
    for (const auto& e : model.rows[f]) t[key_of(static_cast<TokenId>(f), e.target)] = e.prob;
  for (const auto& e : model.null_row) t[key_of(null_id, e.target)] = e.prob;
  double ll = 0.0;
  for (const auto& pair : corpus.pairs) {
    const double denom = static_cast<double>(pair.source.size() + 1);
    for (TokenId e : pair.target) {
      double z = 0.0;
      for (TokenId f : pair.source)
        if (auto it = t.find(key_of(f, e)); it != t.end()) z += it->second;
      if (auto it = t.find(key_of(null_id, e)); it != t.end()) z += it->second;
      ll += std::log(z / denom);
    }
  }
  return ll;
}

AlignmentModel train_ibm1(const ParallelCorpus& corpus, const Ibm1Options& options) {
  if (corpus.empty()) throw InvalidArgument("train_ibm1: empty corpus");
  if (options.iterations < 1) throw InvalidArgument("train_ibm1: iterations must be >= 1");

  const TokenId null_id = max_source_id(corpus) + 1;
  const auto num_sources = static_cast<std::size_t>(null_id) + 1;

  // Uniform over co-occurring pairs.
  std::unordered_map<PairKey, double> t;
  for (const auto& pair : corpus.pairs)
    for (TokenId e : pair.target) {
      for (TokenId f : pair.source) t.emplace(key_of(f, e), 0.0);
      t.emplace(key_of(null_id, e), 0.0);
    }
  std::vector<std::size_t> fanout(num_sources, 0);
  for (const auto& [k, v] : t) ++fanout[static_cast<std::size_t>(source_of(k))];
  for (auto& [k, v] : t) v = 1.0 / static_cast<double>(fanout[static_cast<std::size_t>(source_of(k))]);

  // Pointer cache per sentence position keeps the inner loops off the hash map.
  AlignmentModel model;
  std::unordered_map<PairKey, double> counts;
  counts.reserve(t.size());
  for (const auto& [k, v] : t) counts.emplace(k, 0.0);
  std::vector<double*> tp, cp;

  auto e_step = [&](bool accumulate) {
    double ll = 0.0;
    for (const auto& pair : corpus.pairs) {
      const std::size_t l = pair.source.size() + 1;
      const double denom = static_cast<double>(l);
      for (TokenId e : pair.target) {
        tp.clear();
        cp.clear();
        for (std::size_t i = 0; i <= pair.source.size(); ++i) {
          const TokenId f = i < pair.source.size() ? pair.source[i] : null_id;
          const PairKey k = key_of(f, e);
          tp.push_back(&t.find(k)->second);
          if (accumulate) cp.push_back(&counts.find(k)->second);
        }
        double z = 0.0;
        for (double* p : tp) z += *p;
        ll += std::log(z / denom);
        if (accumulate)
          for (std::size_t i = 0; i < tp.size(); ++i) *cp[i] += *tp[i] / z;
      }
    }
    return ll;
  };

  for (std::size_t it = 0; it < options.iterations; ++it) {
    for (auto& [k, v] : counts) v = 0.0;
    model.log_likelihoods.push_back(e_step(true));
    std::vector<double> totals(num_sources, 0.0);
    for (const auto& [k, c] : counts) totals[static_cast<std::size_t>(source_of(k))] += c;
    for (auto& [k, v] : t) v = counts[k] / totals[static_cast<std::size_t>(source_of(k))];
    ++model.iterations_run;
  }
  model.final_log_likelihood = e_step(false);
  model.log_likelihoods.push_back(model.final_log_likelihood);

  std::vector<AlignmentModel::Row> raw(num_sources);
  for (const auto& [k, v] : t) raw[static_cast<std::size_t>(source_of(k))].push_back({target_of(k), v});
  model.rows.resize(static_cast<std::size_t>(null_id));
  for (std::size_t f = 0; f < model.rows.size(); ++f) {
    sort_row(raw[f]);  // fixes summation order
    model.rows[f] = normalized(std::move(raw[f]), options.prune);
  }
  sort_row(raw[static_cast<std::size_t>(null_id)]);
  model.null_row = normalized(std::move(raw[static_cast<std::size_t>(null_id)]), options.prune);
  return model;
}

AlignmentModel parse_fastalign_lines(const std::vector<std::string>& lines, const ParallelCorpus& corpus,
                                     const std::string& source_name) {
  if (lines.size() != corpus.size())
    throw FormatError(source_name, 0, std::to_string(lines.size()) + " alignment lines for " +
                                          std::to_string(corpus.size()) + " sentence pairs");
  std::unordered_map<PairKey, double> counts;
  TokenId max_f = max_source_id(corpus);
  std::vector<bool> aligned;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const auto& pair = corpus.pairs[n];
    aligned.assign(pair.source.size(), false);
    for (const auto& link : split_whitespace(lines[n])) {
      const auto dash = link.find('-');
      std::size_t i = 0, j = 0;
      const char* end = link.data() + link.size();
      if (dash == std::string::npos || dash == 0 ||
          std::from_chars(link.data(), link.data() + dash, i).ptr != link.data() + dash ||
          std::from_chars(link.data() + dash + 1, end, j).ptr != end || dash + 1 == link.size())
        throw FormatError(source_name, n + 1, "malformed alignment '" + link + "'");
      if (i >= pair.source.size() || j >= pair.target.size())
        throw FormatError(source_name, n + 1, "alignment '" + link + "' out of range for a " +
                                                  std::to_string(pair.source.size()) + "x" +
                                                  std::to_string(pair.target.size()) + " pair");
      counts[key_of(pair.source[i], pair.target[j])] += 1.0;
      aligned[i] = true;
    }
    for (std::size_t i = 0; i < pair.source.size(); ++i)
      if (!aligned[i]) counts[key_of(pair.source[i], AlignmentModel::kNullTarget)] += 1.0;
  }
  AlignmentModel model;
  std::vector<AlignmentModel::Row> raw(static_cast<std::size_t>(max_f + 1));
  for (const auto& [k, c] : counts) raw[static_cast<std::size_t>(source_of(k))].push_back({target_of(k), c});
  model.rows.resize(raw.size());
  for (std::size_t f = 0; f < raw.size(); ++f) {
    sort_row(raw[f]);
    model.rows[f] = normalized(std::move(raw[f]), 0.0);
  }
  return model;
}

AlignmentModel parse_fastalign(const std::string& path, const ParallelCorpus& corpus) {
  return parse_fastalign_lines(read_lines(path), corpus, path);
}

TranslationMatrix translation_matrix_from_alignment(const AlignmentModel& model, const Vocabulary& tgt_vocab,
                                                    const Vocabulary& src_vocab) {
  if (model.rows.size() > tgt_vocab.size())
    throw InvalidArgument("alignment model has more source rows than the foreign vocabulary");
  std::vector<TranslationMatrix::Row> rows(tgt_vocab.size());
  for (std::size_t i = 0; i < model.rows.size(); ++i) {
    std::vector<TranslationMatrix::Entry> entries;
    for (const auto& e : model.rows[i]) {
      if (e.target == AlignmentModel::kNullTarget) continue;
      if (e.target < 0 || static_cast<std::size_t>(e.target) >= src_vocab.size())
        throw InvalidArgument("alignment model target index outside the English vocabulary");
      entries.push_back({e.target, e.prob});
    }
    rows[i] = canonical_row(std::move(entries));
  }
  return TranslationMatrix(src_vocab.size(), std::move(rows));
}

ParallelCorpus subsample(const ParallelCorpus& corpus, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("subsample: n must be >= 1");
  if (n >= corpus.size()) return corpus;
  std::vector<std::size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_int(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  ParallelCorpus out;
  out.dropped = corpus.dropped;
  out.pairs.reserve(n);
  for (auto i : idx) out.pairs.push_back(corpus.pairs[i]);
  return out;
}

}  // namespace lmt
