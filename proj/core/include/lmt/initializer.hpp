#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>

#include <Eigen/Core>

#include "lmt/corpus.hpp"
#include "lmt/embeddings.hpp"
#include "lmt/translation.hpp"

namespace lmt {

struct InitReport {
  std::size_t covered = 0;   // rows built as a combination of source rows
  std::size_t fallback = 0;  // rows drawn from the Gaussian
  std::size_t specials = 0;  // reserved rows copied from the source table

  /// covered / (covered + fallback); 0 for an empty vocabulary.
  double coverage_ratio() const noexcept;
};

/// Human-readable one-paragraph summary.
std::string init_report(const InitReport& report);
/// {"covered":..,"fallback":..,"specials":..,"coverage_ratio":..}
std::string init_report_json(const InitReport& report);

/// Foreign embeddings as sparse convex combinations of source rows:
/// E_tgt[i] = sum_j alpha_ij E_src[j] for covered tokens, N(0, 1/d^2) draws
/// (standard deviation 1/d) for the rest, reserved rows copied from the
/// source table. Each fallback row uses its own stream derived from
/// (seed, row), so the result does not depend on evaluation order.
std::pair<EmbeddingMatrix, InitReport> init_foreign_embeddings(const TranslationMatrix& tm,
                                                               const EmbeddingMatrix& src_emb,
                                                               const Vocabulary& tgt_vocab, std::uint64_t seed);

/// Every row i.i.d. N(0, 1/d^2).
EmbeddingMatrix random_init(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed);

/// Foreign output biases by the same combination; uncovered tokens get 0 and
/// reserved tokens copy the source bias.
Eigen::VectorXd init_foreign_bias(const TranslationMatrix& tm, const Eigen::VectorXd& src_bias,
                                  const Vocabulary& tgt_vocab);

}  // namespace lmt
