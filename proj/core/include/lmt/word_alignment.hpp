#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lmt/corpus.hpp"
#include "lmt/translation.hpp"

namespace lmt {

/// Lexical translation table p(target | source). The source side is the
/// foreign language. Target index `kNullTarget` books probability mass that
/// went to no target token (unaligned source occurrences).
struct AlignmentModel {
  static constexpr TokenId kNullTarget = -1;
  static constexpr std::string_view kNullToken = "<null>";

  struct Entry {
    TokenId target;
    double prob;
  };
  using Row = std::vector<Entry>;  // sorted by target, NULL first

  std::vector<Row> rows;  // indexed by source token id
  /// t(target | NULL source) from EM; empty for parsed alignments.
  Row null_row;
  std::size_t iterations_run = 0;
  /// Corpus log-likelihood under the parameters entering each EM iteration,
  /// followed by the value under the final parameters.
  std::vector<double> log_likelihoods;
  double final_log_likelihood = 0.0;

  double prob(TokenId source, TokenId target) const;
  /// Most probable non-NULL target, or -1 when the row has none.
  TokenId argmax(TokenId source) const;

  /// TranslationMatrix text layout; NULL mass is written as "<null>".
  void save(const std::string& path, const Vocabulary& source_vocab, const Vocabulary& target_vocab) const;
};

struct Ibm1Options {
  std::size_t iterations = 5;
  double prune = 1e-4;
};

/// IBM Model 1 EM: each target token aligns uniformly a priori to one of the
/// source tokens or to a NULL source token. Initialization is uniform over
/// co-occurring pairs. After the last iteration entries below `prune` are
/// dropped and rows renormalized.
AlignmentModel train_ibm1(const ParallelCorpus& corpus, const Ibm1Options& options = {});

/// Corpus log-likelihood under `model` (unpruned or pruned).
double ibm1_log_likelihood(const ParallelCorpus& corpus, const AlignmentModel& model);

/// Relative frequencies from fast-align/Pharaoh output ("i-j" per link,
/// 0-based, source-target). One line per corpus pair.
AlignmentModel parse_fastalign(const std::string& path, const ParallelCorpus& corpus);
AlignmentModel parse_fastalign_lines(const std::vector<std::string>& lines, const ParallelCorpus& corpus,
                                     const std::string& source_name = "<alignments>");

/// alpha_ij = p(e_j | l_i) with NULL mass removed and rows renormalized.
/// `tgt_vocab` is the foreign (row) vocabulary, `src_vocab` the English one.
TranslationMatrix translation_matrix_from_alignment(const AlignmentModel& model, const Vocabulary& tgt_vocab,
                                                    const Vocabulary& src_vocab);

/// Uniform sample without replacement, original order preserved.
ParallelCorpus subsample(const ParallelCorpus& corpus, std::size_t n, std::uint64_t seed);

}  // namespace lmt
