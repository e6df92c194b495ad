#include "lmt/initializer.hpp"

#include <cstdio>

#include <json.hpp>

#include "lmt/error.hpp"
#include "lmt/rng.hpp"

namespace lmt {

namespace {

void gaussian_row(RowMatrixD& m, Eigen::Index row, std::uint64_t seed) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(row)));
  const double stddev = 1.0 / static_cast<double>(m.cols());
  for (Eigen::Index k = 0; k < m.cols(); ++k) m(row, k) = rng.normal(0.0, stddev);
}

void check_shapes(const TranslationMatrix& tm, std::size_t src_rows, const Vocabulary& tgt_vocab) {
  if (tm.num_rows() != tgt_vocab.size())
    throw InvalidArgument("translation matrix has " + std::to_string(tm.num_rows()) +
                          " rows for a foreign vocabulary of " + std::to_string(tgt_vocab.size()));
  if (tm.num_cols() != src_rows)
    throw InvalidArgument("translation matrix has " + std::to_string(tm.num_cols()) +
                          " columns for a source table of " + std::to_string(src_rows) + " rows");
}

}  // namespace

double InitReport::coverage_ratio() const noexcept {
  const std::size_t n = covered + fallback;
  return n == 0 ? 0.0 : static_cast<double>(covered) / static_cast<double>(n);
}

std::string init_report(const InitReport& report) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "initialized %zu of %zu foreign tokens from the translation matrix (coverage %.4f); "
                "%zu drawn from the Gaussian fallback; %zu reserved tokens copied",
                report.covered, report.covered + report.fallback, report.coverage_ratio(), report.fallback,
                report.specials);
  return buf;
}

std::string init_report_json(const InitReport& report) {
  nlohmann::json j = {{"covered", report.covered},
                      {"fallback", report.fallback},
                      {"specials", report.specials},
                      {"coverage_ratio", report.coverage_ratio()}};
  return j.dump();
}

std::pair<EmbeddingMatrix, InitReport> init_foreign_embeddings(const TranslationMatrix& tm,
                                                               const EmbeddingMatrix& src_emb,
                                                               const Vocabulary& tgt_vocab, std::uint64_t seed) {
  check_shapes(tm, src_emb.rows(), tgt_vocab);
  if (src_emb.dim() == 0) throw InvalidArgument("source embeddings have dimension 0");
  if (tgt_vocab.has_specials() && !src_emb.vocab().has_specials())
    throw InvalidArgument("source table has no reserved rows to copy");

  const auto d = static_cast<Eigen::Index>(src_emb.dim());
  RowMatrixD out(static_cast<Eigen::Index>(tgt_vocab.size()), d);
  InitReport report;
  for (std::size_t i = 0; i < tgt_vocab.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (tgt_vocab.is_special(static_cast<TokenId>(i))) {
      out.row(r) = src_emb.row(static_cast<TokenId>(i));
      ++report.specials;
    } else if (tm.covered(i)) {
      out.row(r).setZero();
      for (const auto& e : tm.row(i)) out.row(r) += e.weight * src_emb.row(e.col);
      ++report.covered;
    } else {
      gaussian_row(out, r, seed);
      ++report.fallback;
    }
  }
  return {EmbeddingMatrix(tgt_vocab, std::move(out)), report};
}

EmbeddingMatrix random_init(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed) {
  if (dim < 1) throw InvalidArgument("random_init: dimension must be >= 1");
  RowMatrixD out(static_cast<Eigen::Index>(vocab.size()), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < out.rows(); ++i) gaussian_row(out, i, seed);
  return EmbeddingMatrix(vocab, std::move(out));
}

Eigen::VectorXd init_foreign_bias(const TranslationMatrix& tm, const Eigen::VectorXd& src_bias,
                                  const Vocabulary& tgt_vocab) {
  check_shapes(tm, static_cast<std::size_t>(src_bias.size()), tgt_vocab);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(tgt_vocab.size()));
  for (std::size_t i = 0; i < tgt_vocab.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (tgt_vocab.is_special(static_cast<TokenId>(i))) {
      out(r) = src_bias(r);
    } else {
      for (const auto& e : tm.row(i)) out(r) += e.weight * src_bias(e.col);
    }
  }
  return out;
}

}  // namespace lmt
