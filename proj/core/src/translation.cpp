#include "lmt/translation.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>
#include <unordered_set>

#include "lmt/error.hpp"

namespace lmt {

TranslationMatrix::TranslationMatrix(std::size_t num_cols, std::vector<Row> rows)
    : num_cols_(num_cols), rows_(std::move(rows)) {
  validate();
}

std::size_t TranslationMatrix::num_covered() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(rows_.begin(), rows_.end(), [](const Row& r) { return !r.empty(); }));
}

void TranslationMatrix::validate(double tol) const {
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    const auto& r = rows_[i];
    if (r.empty()) continue;
    double sum = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (r[k].col < 0 || static_cast<std::size_t>(r[k].col) >= num_cols_)
        throw InvalidArgument("translation row " + std::to_string(i) + ": column out of range");
      if (k > 0 && r[k].col <= r[k - 1].col)
        throw InvalidArgument("translation row " + std::to_string(i) + ": columns not strictly increasing");
      if (!(r[k].weight > 0.0))
        throw InvalidArgument("translation row " + std::to_string(i) + ": non-positive weight");
      sum += r[k].weight;
    }
    if (std::abs(sum - 1.0) > tol)
      throw InvalidArgument("translation row " + std::to_string(i) + " sums to " + std::to_string(sum));
  }
}

void TranslationMatrix::save(const std::string& path, const Vocabulary& tgt_vocab,
                             const Vocabulary& src_vocab) const {
  if (tgt_vocab.size() != rows_.size() || src_vocab.size() != num_cols_)
    throw InvalidArgument("TranslationMatrix::save: vocabulary sizes do not match the matrix");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  char buf[32];
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    out << tgt_vocab.token(static_cast<TokenId>(i));
    for (const auto& e : rows_[i]) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, e.weight);
      out << ' ' << src_vocab.token(e.col) << ':' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
    }
    out << '\n';
  }
  if (!out) throw IoError(path, "write failed");
}

TranslationMatrix TranslationMatrix::load(const std::string& path, const Vocabulary& tgt_vocab,
                                          const Vocabulary& src_vocab) {
  const auto lines = read_lines(path);
  std::vector<Row> rows(tgt_vocab.size());
  std::vector<bool> seen(tgt_vocab.size(), false);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    auto fields = split_whitespace(lines[n]);
    if (fields.empty()) continue;
    auto tgt = tgt_vocab.find(fields[0]);
    if (!tgt) throw FormatError(path, n + 1, "unknown target token '" + fields[0] + "'");
    if (seen[static_cast<std::size_t>(*tgt)]) throw FormatError(path, n + 1, "duplicate target token");
    seen[static_cast<std::size_t>(*tgt)] = true;
    std::vector<Entry> entries;
    for (std::size_t k = 1; k < fields.size(); ++k) {
      const auto colon = fields[k].rfind(':');
      if (colon == std::string::npos) throw FormatError(path, n + 1, "expected 'token:weight'");
      auto src = src_vocab.find(std::string_view(fields[k]).substr(0, colon));
      if (!src) throw FormatError(path, n + 1, "unknown source token '" + fields[k].substr(0, colon) + "'");
      double w;
      const char* first = fields[k].data() + colon + 1;
      const char* last = fields[k].data() + fields[k].size();
      auto [ptr, ec] = std::from_chars(first, last, w);
      if (ec != std::errc() || ptr != last || !std::isfinite(w))
        throw FormatError(path, n + 1, "bad weight in '" + fields[k] + "'");
      entries.push_back({*src, w});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.col < b.col; });
    rows[static_cast<std::size_t>(*tgt)] = std::move(entries);
  }
  try {
    return TranslationMatrix(src_vocab.size(), std::move(rows));
  } catch (const InvalidArgument& e) {
    throw FormatError(path, 0, e.what());
  }
}

TranslationMatrix::Row canonical_row(std::vector<TranslationMatrix::Entry> entries) {
  std::sort(entries.begin(), entries.end(),
            [](const TranslationMatrix::Entry& a, const TranslationMatrix::Entry& b) { return a.col < b.col; });
  TranslationMatrix::Row row;
  for (const auto& e : entries) {
    if (!(e.weight > 0.0)) continue;
    if (!row.empty() && row.back().col == e.col)
      row.back().weight += e.weight;
    else
      row.push_back(e);
  }
  double sum = 0.0;
  for (const auto& e : row) sum += e.weight;
  for (auto& e : row) e.weight /= sum;
  return row;
}

// ---------------------------------------------------------------------------
// Sparsemax

double sparsemax_threshold(std::span<const double> z) {
  if (z.empty()) throw InvalidArgument("sparsemax: empty input");
  for (double v : z)
    if (!std::isfinite(v)) throw NumericError("sparsemax: non-finite input");
  // Descending by value, ties by index.
  std::vector<std::size_t> order(z.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (z[a] != z[b]) return z[a] > z[b];
    return a < b;
  });
  double cumsum = 0.0;
  double support_sum = 0.0;
  std::size_t support = 0;
  for (std::size_t k = 1; k <= order.size(); ++k) {
    const double zk = z[order[k - 1]];
    cumsum += zk;
    if (1.0 + static_cast<double>(k) * zk > cumsum) {
      support = k;
      support_sum = cumsum;
    }
  }
  return (support_sum - 1.0) / static_cast<double>(support);
}

std::vector<double> sparsemax(std::span<const double> z) {
  const double tau = sparsemax_threshold(z);
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::max(z[i] - tau, 0.0);
  return p;
}

std::vector<double> softmax(std::span<const double> z) {
  if (z.empty()) throw InvalidArgument("softmax: empty input");
  for (double v : z)
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += (p[i] = std::exp(z[i] - m));
  for (auto& v : p) v /= sum;
  return p;
}

// ---------------------------------------------------------------------------
// Translation matrices

namespace {

template <typename Fn>
void parallel_rows(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const unsigned t = std::min<unsigned>(threads, static_cast<unsigned>(n));
  for (unsigned w = 0; w < t; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += t) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace

TranslationMatrix translation_matrix_from_vectors(const EmbeddingMatrix& tgt_aligned, const EmbeddingMatrix& src,
                                                  const TranslationOptions& options,
                                                  const std::vector<bool>* tgt_rows,
                                                  const std::vector<bool>* src_cols) {
  if (tgt_aligned.dim() != src.dim())
    throw InvalidArgument("translation matrix: dimension mismatch " + std::to_string(tgt_aligned.dim()) +
                          " vs " + std::to_string(src.dim()));
  if (tgt_rows && tgt_rows->size() != tgt_aligned.rows())
    throw InvalidArgument("translation matrix: row mask size mismatch");
  if (src_cols && src_cols->size() != src.rows())
    throw InvalidArgument("translation matrix: column mask size mismatch");

  std::vector<TokenId> cols;
  for (std::size_t j = 0; j < src.rows(); ++j)
    if (!src_cols || (*src_cols)[j]) cols.push_back(static_cast<TokenId>(j));

  RowMatrixD candidates(static_cast<Eigen::Index>(cols.size()), static_cast<Eigen::Index>(src.dim()));
  for (std::size_t k = 0; k < cols.size(); ++k) candidates.row(static_cast<Eigen::Index>(k)) = src.row(cols[k]);

  std::vector<TranslationMatrix::Row> rows(tgt_aligned.rows());
  if (cols.empty()) return TranslationMatrix(src.rows(), std::move(rows));

  parallel_rows(tgt_aligned.rows(), options.threads, [&](std::size_t i) {
    if (tgt_rows && !(*tgt_rows)[i]) return;
    const Eigen::VectorXd scores = candidates * tgt_aligned.row(static_cast<TokenId>(i)).transpose();
    std::span<const double> z(scores.data(), static_cast<std::size_t>(scores.size()));
    const auto p = options.projection == Projection::kSparsemax ? sparsemax(z) : softmax(z);
    auto& row = rows[i];
    for (std::size_t k = 0; k < p.size(); ++k)
      if (p[k] > 0.0) row.push_back({cols[k], p[k]});
  });
  return TranslationMatrix(src.rows(), std::move(rows));
}

std::vector<bool> SubwordVectorTable::has_vector() const {
  std::vector<bool> out(support.size());
  for (std::size_t i = 0; i < support.size(); ++i) out[i] = support[i] > 0;
  return out;
}

SubwordVectorTable subword_vectors(const EmbeddingMatrix& word_emb, const UnigramTable& unigrams,
                                   const Vocabulary& subword_vocab, const BpeCodes& codes) {
  const auto d = static_cast<Eigen::Index>(word_emb.dim());
  const std::size_t n_words = word_emb.rows();

  std::vector<double> p(n_words);
  double total = 0.0;
  for (std::size_t w = 0; w < n_words; ++w) {
    const auto& token = word_emb.vocab().token(static_cast<TokenId>(w));
    total += (p[w] = unigrams.find(token).value_or(kUnigramFloor));
  }
  if (total > 0)
    for (auto& v : p) v /= total;

  RowMatrixD sum = RowMatrixD::Zero(static_cast<Eigen::Index>(subword_vocab.size()), d);
  std::vector<double> mass(subword_vocab.size(), 0.0);
  std::vector<std::size_t> support(subword_vocab.size(), 0);
  for (std::size_t w = 0; w < n_words; ++w) {
    const auto& word = word_emb.vocab().token(static_cast<TokenId>(w));
    if (word.empty()) continue;
    std::unordered_set<TokenId> members;
    for (const auto& piece : apply_bpe(word, codes))
      if (auto s = subword_vocab.find(piece); s && !subword_vocab.is_special(*s)) members.insert(*s);
    for (TokenId s : members) {
      sum.row(s) += p[w] * word_emb.row(static_cast<TokenId>(w));
      mass[static_cast<std::size_t>(s)] += p[w];
      ++support[static_cast<std::size_t>(s)];
    }
  }
  for (std::size_t s = 0; s < subword_vocab.size(); ++s)
    if (support[s] > 0 && mass[s] > 0) sum.row(static_cast<Eigen::Index>(s)) /= mass[s];
  return {EmbeddingMatrix(subword_vocab, std::move(sum)), std::move(support)};
}

TranslationMatrix translation_matrix_from_subwords(const SubwordVectorTable& tgt_aligned,
                                                   const SubwordVectorTable& src,
                                                   const TranslationOptions& options) {
  const auto rows = tgt_aligned.has_vector();
  const auto cols = src.has_vector();
  return translation_matrix_from_vectors(tgt_aligned.emb, src.emb, options, &rows, &cols);
}

TranslationMatrix translation_matrix_from_dictionary(const Dictionary& tgt_to_src, std::size_t num_tgt,
                                                     std::size_t num_src) {
  std::vector<std::vector<TranslationMatrix::Entry>> raw(num_tgt);
  for (const auto& [t, s] : tgt_to_src) {
    if (t < 0 || static_cast<std::size_t>(t) >= num_tgt || s < 0 || static_cast<std::size_t>(s) >= num_src)
      throw InvalidArgument("dictionary index out of range");
    raw[static_cast<std::size_t>(t)].push_back({s, 1.0});
  }
  std::vector<TranslationMatrix::Row> rows(num_tgt);
  for (std::size_t i = 0; i < num_tgt; ++i) {
    // Duplicate pairs collapse to a single candidate before weighting.
    auto& r = raw[i];
    std::sort(r.begin(), r.end(), [](const auto& a, const auto& b) { return a.col < b.col; });
    r.erase(std::unique(r.begin(), r.end(), [](const auto& a, const auto& b) { return a.col == b.col; }), r.end());
    rows[i] = canonical_row(std::move(r));
  }
  return TranslationMatrix(num_src, std::move(rows));
}

RowEntropyReport row_entropy_report(const TranslationMatrix& tm) {
  RowEntropyReport r;
  r.rows = tm.num_rows();
  r.nonzeros.resize(r.rows);
  r.entropy.resize(r.rows);
  double nz_sum = 0.0, h_sum = 0.0;
  for (std::size_t i = 0; i < r.rows; ++i) {
    const auto& row = tm.row(i);
    r.nonzeros[i] = row.size();
    double h = 0.0;
    for (const auto& e : row)
      if (e.weight > 0) h -= e.weight * std::log(e.weight);
    r.entropy[i] = row.size() <= 1 ? 0.0 : h;
    if (row.empty()) continue;
    ++r.covered;
    nz_sum += static_cast<double>(row.size());
    h_sum += r.entropy[i];
    r.max_nonzeros = std::max(r.max_nonzeros, row.size());
    const auto bucket = static_cast<std::size_t>(std::bit_width(row.size()) - 1);
    if (r.histogram.size() <= bucket) r.histogram.resize(bucket + 1, 0);
    ++r.histogram[bucket];
  }
  if (r.covered) {
    r.mean_nonzeros = nz_sum / static_cast<double>(r.covered);
    r.mean_entropy = h_sum / static_cast<double>(r.covered);
  }
  return r;
}

}  // namespace lmt
