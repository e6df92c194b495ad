#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lmt/corpus.hpp"

namespace lmt {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixD = Eigen::MatrixXd;

/// |V| x d matrix of token vectors; row i belongs to vocab token i.
/// Held in double precision; files store float32 whenever that is lossless.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(Vocabulary vocab, RowMatrixD data);

  const Vocabulary& vocab() const noexcept { return vocab_; }
  const RowMatrixD& data() const noexcept { return data_; }
  RowMatrixD& mutable_data() noexcept { return data_; }
  std::size_t rows() const noexcept { return static_cast<std::size_t>(data_.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(data_.cols()); }

  auto row(TokenId id) const { return data_.row(id); }

 private:
  Vocabulary vocab_;
  RowMatrixD data_;
};

enum class VectorFormat { kText, kBinary };

/// fastText .vec layout: "count dim" header, then "token v1 ... vd" rows.
/// Keeps the first `limit` distinct tokens in file order.
EmbeddingMatrix load_vectors(const std::string& path, std::optional<std::size_t> limit = std::nullopt);

/// Binary layout: one JSON header line, then little-endian row-major values
/// (float32, or float64 when the data is not exactly representable in float32).
EmbeddingMatrix load_vectors_binary(const std::string& path);

/// Picks the loader from the first byte of the file ('{' means binary).
EmbeddingMatrix load_vectors_any(const std::string& path, std::optional<std::size_t> limit = std::nullopt);

void save_vectors(const EmbeddingMatrix& emb, const std::string& path, VectorFormat format);

/// Raw float32 tensor with the binary header, without a vocabulary. Used for
/// checkpoint tensors.
void save_tensor(const RowMatrixF& m, const std::string& path);
RowMatrixF load_tensor(const std::string& path);

using Dictionary = std::vector<std::pair<TokenId, TokenId>>;

/// Token pairs whose strings are byte-identical in both vocabularies,
/// reserved tokens excluded. Ordered by source index.
Dictionary identical_word_dictionary(const Vocabulary& src, const Vocabulary& tgt);

/// Two-column TSV "src_token<TAB>tgt_token"; pairs with a token missing from
/// either vocabulary are skipped.
Dictionary load_dictionary(const std::string& path, const Vocabulary& src, const Vocabulary& tgt);

struct OrthogonalMap {
  MatrixD matrix;          // d x d
  double residual = 0.0;   // ||X W - Y||_F over the dictionary rows
  std::size_t rank = 0;    // numerical rank of X^T Y
  bool underdetermined = false;  // fewer dictionary pairs than dimensions
};

struct ProcrustesOptions {
  bool normalize = false;  // unit-normalize rows before fitting
};

/// argmin over orthogonal W of ||X_from W - X_to||_F, with rows selected by
/// `dict` (first = `from` index, second = `to` index). Closed form W = U V^T
/// from the SVD of X_from^T X_to.
OrthogonalMap procrustes(const EmbeddingMatrix& from, const EmbeddingMatrix& to, const Dictionary& dict,
                         const ProcrustesOptions& options = {});

/// Every row right-multiplied by W.
EmbeddingMatrix align(const EmbeddingMatrix& emb, const MatrixD& w);

/// Unit-normalizes every nonzero row.
EmbeddingMatrix normalize_rows(const EmbeddingMatrix& emb);

double orthogonality_error(const MatrixD& w);

}  // namespace lmt
