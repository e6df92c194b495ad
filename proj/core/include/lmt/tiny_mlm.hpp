#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lmt/corpus.hpp"

namespace lmt {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Language { kEnglish, kForeign };
std::string_view language_name(Language lang);

enum class NormStyle { kPreNorm, kPostNorm };

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t max_len = 64;
  NormStyle norm = NormStyle::kPreNorm;
  double ln_eps = 1e-5;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Parameter groups, the unit of freezing.
enum class ParamGroup : std::uint8_t { kEmbEn, kEmbFg, kPositions, kEncoder, kBiasEn, kBiasFg };
inline constexpr std::size_t kNumParamGroups = 6;
std::string_view param_group_name(ParamGroup g);

/// Set of frozen groups.
class FreezeMask {
 public:
  FreezeMask() = default;
  static FreezeMask none() { return {}; }
  static FreezeMask all();
  /// Everything except the foreign embedding table and foreign output bias.
  static FreezeMask all_but_foreign();
  static FreezeMask encoder_only();

  FreezeMask& freeze(ParamGroup g) {
    frozen_[static_cast<std::size_t>(g)] = true;
    return *this;
  }
  bool frozen(ParamGroup g) const { return frozen_[static_cast<std::size_t>(g)]; }
  bool trainable(ParamGroup g) const { return !frozen(g); }

 private:
  std::array<bool, kNumParamGroups> frozen_{};
};

template <typename T>
struct EncoderLayer {
  Mat<T> wq, wk, wv, wo;    // d x d
  Mat<T> w1, b1;            // d x h, 1 x h
  Mat<T> w2, b2;            // h x d, 1 x d
  Mat<T> ln1_g, ln1_b;      // 1 x d
  Mat<T> ln2_g, ln2_b;      // 1 x d
};

/// Tiny bilingual masked LM: per-language tied embedding/output tables and
/// output biases around a shared encoder and shared positional table. Every
/// tensor is a row-major matrix; vectors are 1 x n.
template <typename T>
struct ModelState {
  ModelConfig config;
  Mat<T> emb_en, emb_fg;    // |V| x d
  Mat<T> pos;               // max_len x d
  std::vector<EncoderLayer<T>> layers;
  Mat<T> lnf_g, lnf_b;      // 1 x d, final norm (pre-norm with layers > 0)
  Mat<T> bias_en, bias_fg;  // 1 x |V|

  const Mat<T>& embeddings(Language lang) const { return lang == Language::kEnglish ? emb_en : emb_fg; }
  const Mat<T>& bias(Language lang) const { return lang == Language::kEnglish ? bias_en : bias_fg; }
  std::size_t vocab_size(Language lang) const { return static_cast<std::size_t>(embeddings(lang).rows()); }
};

template <typename T>
struct TensorRef {
  std::string name;
  ParamGroup group;
  Mat<T>* tensor;
};

/// Every tensor in a fixed order (the checkpoint and optimizer order).
template <typename T>
std::vector<TensorRef<T>> tensors(ModelState<T>& state);

/// Same shapes, all zeros.
template <typename T>
ModelState<T> zeros_like(const ModelState<T>& state);

template <typename U, typename T>
ModelState<U> cast_state(const ModelState<T>& state);

/// Randomly initialized model. `vocab_fg` may be 0 for an English-only model.
ModelState<float> init_model(const ModelConfig& config, std::size_t vocab_en, std::size_t vocab_fg,
                             std::uint64_t seed);

template <typename T>
bool all_finite(const ModelState<T>& state);

// ---------------------------------------------------------------------------
// Batches

struct MaskedPosition {
  std::uint32_t row;
  std::uint32_t col;
  TokenId label;
  friend bool operator==(const MaskedPosition&, const MaskedPosition&) = default;
};

struct MaskedBatch {
  Language language = Language::kEnglish;
  std::vector<Sequence> tokens;         // corrupted inputs
  std::vector<MaskedPosition> masked;   // sorted by (row, col)

  std::size_t rows() const noexcept { return tokens.size(); }
  friend bool operator==(const MaskedBatch&, const MaskedBatch&) = default;
};

struct MaskingOptions {
  double mask_prob = 0.15;
  /// Of the selected positions: replaced by MASK / by a random token / kept.
  double mask_share = 0.8;
  double random_share = 0.1;
  /// false: every selected position becomes MASK.
  bool replacements = true;
};

/// Each non-reserved position is selected independently with `mask_prob`;
/// at least one position is forced when none is selected. Random
/// replacements are drawn uniformly from the non-reserved ids.
MaskedBatch make_masked_batch(std::span<const Sequence> sequences, Language language, std::size_t vocab_size,
                              const MaskingOptions& options, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward / backward

/// Contextual representations of one sequence (n x d).
template <typename T>
Mat<T> encode(const ModelState<T>& state, std::span<const TokenId> tokens, Language language);

template <typename T>
std::vector<Mat<T>> encode(const ModelState<T>& state, const MaskedBatch& batch);

template <typename T>
struct LossResult {
  double loss = 0.0;          // mean cross-entropy over masked positions
  Mat<T> logits;              // |masked| x |V|, rows in batch.masked order
  std::size_t correct = 0;    // argmax == label
  std::size_t count = 0;      // masked positions
};

template <typename T>
LossResult<T> mlm_loss(const ModelState<T>& state, const MaskedBatch& batch);

/// Adds scale * d(loss)/d(params) into `grads` for groups not in `freeze` and
/// returns the loss. Frozen groups are left untouched (zero if they started
/// zero). Work is split over `threads` row chunks and reduced in chunk order.
template <typename T>
double accumulate_gradients(const ModelState<T>& state, const MaskedBatch& batch, const FreezeMask& freeze,
                            ModelState<T>& grads, T scale = T(1), unsigned threads = 1);

/// Fresh gradients of mlm_loss.
template <typename T>
ModelState<T> backward(const ModelState<T>& state, const MaskedBatch& batch, const FreezeMask& freeze,
                       unsigned threads = 1);

}  // namespace lmt
