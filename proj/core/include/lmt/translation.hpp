#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lmt/corpus.hpp"
#include "lmt/embeddings.hpp"

namespace lmt {

/// Row-sparse stochastic matrix: row i is a distribution over source-language
/// tokens for target-language token i. Empty rows are uncovered tokens.
class TranslationMatrix {
 public:
  struct Entry {
    TokenId col;
    double weight;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  using Row = std::vector<Entry>;

  TranslationMatrix() = default;
  /// Rows must already be canonical; throws otherwise (see `validate`).
  TranslationMatrix(std::size_t num_cols, std::vector<Row> rows);

  std::size_t num_rows() const noexcept { return rows_.size(); }
  std::size_t num_cols() const noexcept { return num_cols_; }
  const Row& row(std::size_t i) const { return rows_.at(i); }
  const std::vector<Row>& rows() const noexcept { return rows_; }
  bool covered(std::size_t i) const { return !rows_.at(i).empty(); }
  std::size_t num_covered() const noexcept;

  /// Throws unless every non-empty row has positive weights summing to
  /// 1 +- tol and strictly increasing column indices.
  void validate(double tol = 1e-6) const;

  /// "tgt_token src_token1:w1 src_token2:w2 ..." per target token; a bare
  /// token for uncovered rows.
  void save(const std::string& path, const Vocabulary& tgt_vocab, const Vocabulary& src_vocab) const;
  static TranslationMatrix load(const std::string& path, const Vocabulary& tgt_vocab,
                                const Vocabulary& src_vocab);

  friend bool operator==(const TranslationMatrix&, const TranslationMatrix&) = default;

 private:
  std::size_t num_cols_ = 0;
  std::vector<Row> rows_;
};

/// Sorts by column, merges duplicate columns, drops non-positive weights and
/// renormalizes. Returns an empty row when nothing positive remains.
TranslationMatrix::Row canonical_row(std::vector<TranslationMatrix::Entry> entries);

/// Euclidean projection of `z` onto the probability simplex
/// (sort-and-threshold). Throws NumericError on non-finite input.
std::vector<double> sparsemax(std::span<const double> z);

/// Threshold tau of the projection, so that sparsemax(z) = max(z - tau, 0).
double sparsemax_threshold(std::span<const double> z);

std::vector<double> softmax(std::span<const double> z);

enum class Projection { kSparsemax, kSoftmax };

struct TranslationOptions {
  Projection projection = Projection::kSparsemax;
  unsigned threads = 1;
};

/// Row i = projection(tgt[i] . src^T). Dot products are accumulated in
/// double precision. Optional masks restrict which target rows are computed
/// (others stay empty) and which source columns may receive mass.
TranslationMatrix translation_matrix_from_vectors(const EmbeddingMatrix& tgt_aligned, const EmbeddingMatrix& src,
                                                  const TranslationOptions& options = {},
                                                  const std::vector<bool>* tgt_rows = nullptr,
                                                  const std::vector<bool>* src_cols = nullptr);

/// Subword vectors averaged from word vectors, weighted by word frequency.
struct SubwordVectorTable {
  EmbeddingMatrix emb;
  /// Number of contributing words per subword; 0 means no vector.
  std::vector<std::size_t> support;

  std::vector<bool> has_vector() const;
};

/// Probability assigned to vector-file words that the unigram table lacks.
inline constexpr double kUnigramFloor = 1e-9;

/// e_s = sum over words w containing s of (p(w) / n_s) e_w, with
/// n_s = sum of p(w) over the same words.
SubwordVectorTable subword_vectors(const EmbeddingMatrix& word_emb, const UnigramTable& unigrams,
                                   const Vocabulary& subword_vocab, const BpeCodes& codes);

/// Subword-level translation matrix: uncovered target subwords get empty rows and
/// source subwords without a vector receive no mass.
TranslationMatrix translation_matrix_from_subwords(const SubwordVectorTable& tgt_aligned,
                                                   const SubwordVectorTable& src,
                                                   const TranslationOptions& options = {});

/// One-hot (or uniform over listed candidates) rows from a dictionary of
/// (tgt index, src index) pairs. Unlisted target tokens are uncovered.
TranslationMatrix translation_matrix_from_dictionary(const Dictionary& tgt_to_src, std::size_t num_tgt,
                                                     std::size_t num_src);

struct RowEntropyReport {
  std::size_t rows = 0;
  std::size_t covered = 0;
  std::vector<std::size_t> nonzeros;   // per row
  std::vector<double> entropy;         // per row, nats; 0 for empty rows
  double mean_nonzeros = 0.0;          // over covered rows
  double mean_entropy = 0.0;           // over covered rows
  std::size_t max_nonzeros = 0;
  /// histogram[k] counts covered rows with nonzeros in [2^k, 2^(k+1)).
  std::vector<std::size_t> histogram;
};

RowEntropyReport row_entropy_report(const TranslationMatrix& tm);

}  // namespace lmt
