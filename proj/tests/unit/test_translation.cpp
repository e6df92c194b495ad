#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lmt/error.hpp"
#include "lmt/translation.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace lmt;
using lmt::testing::TempDir;

namespace {

EmbeddingMatrix matrix_of(const RowMatrixD& data, std::string prefix = "w") {
  std::vector<std::string> toks;
  for (Eigen::Index i = 0; i < data.rows(); ++i) toks.push_back(prefix + std::to_string(i));
  return EmbeddingMatrix(Vocabulary::plain(toks), data);
}

double row_sum(const TranslationMatrix::Row& r) {
  double s = 0.0;
  for (const auto& e : r) s += e.weight;
  return s;
}

}  // namespace

TEST_SUITE("sparsemax") {
  TEST_CASE("two coordinates") {
    const std::vector<double> z = {1.0, 0.5};
    const auto p = sparsemax(z);
    CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-15));
    const auto grid = oracle::simplex_projection_grid_2d(z);
    CHECK(std::abs(grid[0] - p[0]) <= 1e-6);
    CHECK(std::abs(grid[1] - p[1]) <= 1e-6);
  }

  TEST_CASE("threshold zeroes the smaller coordinate") {
    const std::vector<double> z = {2.0, 0.0};
    CHECK(sparsemax(z) == std::vector<double>{1.0, 0.0});
    CHECK(sparsemax_threshold(z) == 1.0);
  }

  TEST_CASE("equal entries give the uniform distribution") {
    for (std::size_t n : {1u, 3u, 7u, 100u}) {
      const std::vector<double> z(n, 0.37);
      for (double p : sparsemax(z)) CHECK(p == doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-12));
    }
  }

  TEST_CASE("non-finite input") {
    const std::vector<double> z = {1.0, NAN};
    CHECK_THROWS_AS(sparsemax(z), NumericError);
    const std::vector<double> w = {INFINITY, 0.0};
    CHECK_THROWS_AS(sparsemax(w), NumericError);
  }

  TEST_CASE("matches exhaustive face enumeration") {
    std::mt19937_64 gen(1);
    std::normal_distribution<double> n(0.0, 1.5);
    for (int t = 0; t < 300; ++t) {
      const std::size_t d = 2 + static_cast<std::size_t>(t % 4);
      std::vector<double> z(d);
      for (auto& v : z) v = n(gen);
      const auto p = sparsemax(z);
      const auto o = oracle::simplex_projection_faces(z);
      for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(p[i] - o[i]) <= 1e-9);
    }
  }

  TEST_CASE("shift invariance") {
    std::mt19937_64 gen(2);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
      std::vector<double> z(6), shifted(6);
      const double c = 10.0 * n(gen);
      for (std::size_t i = 0; i < 6; ++i) shifted[i] = (z[i] = n(gen)) + c;
      const auto a = sparsemax(z), b = sparsemax(shifted);
      for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-9);
    }
  }

  TEST_CASE("argmax is preserved and the output is on the simplex") {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
      std::vector<double> z(9);
      for (auto& v : z) v = n(gen);
      const auto p = sparsemax(z);
      CHECK(std::max_element(p.begin(), p.end()) - p.begin() == std::max_element(z.begin(), z.end()) - z.begin());
      CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
      for (double v : p) CHECK(v >= 0.0);
    }
  }

  TEST_CASE("sparser than softmax on long Gaussian inputs") {
    std::mt19937_64 gen(4);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::size_t> counts;
    for (int t = 0; t < 51; ++t) {
      std::vector<double> z(1000);
      for (auto& v : z) v = n(gen);
      const auto p = sparsemax(z);
      counts.push_back(static_cast<std::size_t>(std::count_if(p.begin(), p.end(), [](double v) { return v > 0; })));
      const auto s = softmax(z);
      CHECK(std::count_if(s.begin(), s.end(), [](double v) { return v > 0; }) == 1000);
    }
    std::nth_element(counts.begin(), counts.begin() + 25, counts.end());
    CHECK(counts[25] < 1000);
  }
}

TEST_SUITE("translation matrix") {
  TEST_CASE("dominant match gives a one-hot row") {
    RowMatrixD src = RowMatrixD::Zero(4, 4);
    src.diagonal() << 3.0, 1.0, 1.0, 1.0;
    RowMatrixD tgt(1, 4);
    tgt << 3.0, 0.1, 0.0, 0.2;
    const auto tm = translation_matrix_from_vectors(matrix_of(tgt, "t"), matrix_of(src));
    const auto scores = std::vector<double>{9.0, 0.1, 0.0, 0.2};
    const auto oracle_row = oracle::simplex_projection_faces(scores);
    CHECK(oracle_row == std::vector<double>{1.0, 0.0, 0.0, 0.0});
    REQUIRE(tm.row(0).size() == 1);
    CHECK(tm.row(0)[0] == TranslationMatrix::Entry{0, 1.0});
  }

  TEST_CASE("identity basis gives the identity matrix") {
    const RowMatrixD eye = RowMatrixD::Identity(6, 6);
    const auto tm = translation_matrix_from_vectors(matrix_of(eye, "t"), matrix_of(eye));
    for (std::size_t i = 0; i < 6; ++i) {
      REQUIRE(tm.row(i).size() == 1);
      CHECK(tm.row(i)[0] == TranslationMatrix::Entry{static_cast<TokenId>(i), 1.0});
    }
  }

  TEST_CASE("rows are distributions for any input, with threads") {
    std::mt19937_64 gen(5);
    std::normal_distribution<double> n(0.0, 1.0);
    RowMatrixD a(30, 5), b(40, 5);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(gen);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = n(gen);
    TranslationOptions opts;
    const auto tm = translation_matrix_from_vectors(matrix_of(a, "t"), matrix_of(b), opts);
    opts.threads = 3;
    CHECK(translation_matrix_from_vectors(matrix_of(a, "t"), matrix_of(b), opts) == tm);
    tm.validate();
    for (const auto& r : tm.rows()) CHECK(row_sum(r) == doctest::Approx(1.0).epsilon(1e-6));
    opts.projection = Projection::kSoftmax;
    const auto soft = translation_matrix_from_vectors(matrix_of(a, "t"), matrix_of(b), opts);
    soft.validate();
    CHECK(soft.row(0).size() == 40);
  }

  TEST_CASE("file round-trip") {
    TempDir dir;
    const auto tv = Vocabulary::with_specials({"le", "chien"});
    const auto sv = Vocabulary::with_specials({"the", "dog", "a"});
    std::vector<TranslationMatrix::Row> rows(tv.size());
    rows[5] = {{5, 0.9}, {7, 0.1}};
    rows[6] = {{6, 1.0}};
    const TranslationMatrix tm(sv.size(), rows);
    tm.save(dir.file("tm"), tv, sv);
    CHECK(TranslationMatrix::load(dir.file("tm"), tv, sv) == tm);
  }

  TEST_CASE("validation") {
    CHECK_THROWS(TranslationMatrix(3, {{{0, 0.5}}}));
    CHECK_THROWS(TranslationMatrix(3, {{{1, 0.5}, {0, 0.5}}}));
    CHECK_NOTHROW(TranslationMatrix(3, {{{0, 0.5}, {2, 0.5}}, {}}));
  }

  TEST_CASE("dictionary rows") {
    const auto tm = translation_matrix_from_dictionary({{5, 6}, {6, 5}, {6, 7}, {6, 7}}, 8, 8);
    CHECK(tm.row(5) == TranslationMatrix::Row{{6, 1.0}});
    CHECK(tm.row(6) == TranslationMatrix::Row{{5, 0.5}, {7, 0.5}});
    CHECK_FALSE(tm.covered(7));
  }
}

TEST_SUITE("subword vectors") {
  TEST_CASE("single contributor is copied") {
    RowMatrixD we(1, 2);
    we << 0.3, -0.7;
    const auto words = matrix_of(we);
    const auto vocab = Vocabulary::plain({"w0"});
    UnigramTable uni(vocab, {1.0});
    const auto sub = Vocabulary::with_specials({"w", "0</w>"});
    const auto table = subword_vectors(words, uni, sub, BpeCodes{});
    CHECK(table.support[5] == 1);
    CHECK(table.emb.row(5) == we.row(0));
    CHECK(table.emb.row(6) == we.row(0));
  }

  TEST_CASE("frequency-weighted average") {
    RowMatrixD we(2, 2);
    we << 1, 0, 0, 1;
    const auto words = EmbeddingMatrix(Vocabulary::plain({"ab", "ac"}), we);
    UnigramTable uni(Vocabulary::plain({"ab", "ac"}), {0.2, 0.6});
    const auto sub = Vocabulary::with_specials({"a", "b</w>", "c</w>", "z"});
    const auto table = subword_vectors(words, uni, sub, BpeCodes{});
    CHECK(table.emb.row(5)(0) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(table.emb.row(5)(1) == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(table.support[5] == 2);
    CHECK(table.support[8] == 0);
    CHECK(table.emb.row(8).isZero());
    CHECK_FALSE(table.has_vector()[8]);
  }

  TEST_CASE("contributor weights sum to one") {
    std::mt19937_64 gen(6);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::string> tokens = {"ab", "abc", "bca", "cab", "ca"};
    RowMatrixD we(5, 3);
    for (Eigen::Index i = 0; i < we.size(); ++i) we.data()[i] = n(gen);
    const auto words = EmbeddingMatrix(Vocabulary::plain(tokens), we);
    UnigramTable uni(Vocabulary::plain({"ab", "abc", "bca"}), {0.5, 0.3, 0.2});
    const auto sub = Vocabulary::with_specials({"a", "b", "c", "a</w>", "b</w>", "c</w>"});
    const auto table = subword_vectors(words, uni, sub, BpeCodes{});
    // With every word vector set to 1 the average must be exactly 1.
    const auto ones = EmbeddingMatrix(Vocabulary::plain(tokens), RowMatrixD::Ones(5, 1));
    const auto unit = subword_vectors(ones, uni, sub, BpeCodes{});
    for (std::size_t s = 0; s < sub.size(); ++s) {
      if (!table.support[s]) continue;
      CHECK(unit.emb.row(static_cast<TokenId>(s))(0) == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(table.support[s] <= tokens.size());
      // Convex hull: each coordinate within the contributors' range.
      for (Eigen::Index k = 0; k < 3; ++k) {
        CHECK(table.emb.data()(static_cast<Eigen::Index>(s), k) <= we.col(k).maxCoeff() + 1e-12);
        CHECK(table.emb.data()(static_cast<Eigen::Index>(s), k) >= we.col(k).minCoeff() - 1e-12);
      }
    }
  }

  TEST_CASE("masked translation between subword tables") {
    const auto sub = Vocabulary::with_specials({"x</w>", "y</w>"});
    RowMatrixD e(7, 2);
    e.setZero();
    e.row(5) << 1, 0;
    e.row(6) << 0, 1;
    SubwordVectorTable src{EmbeddingMatrix(sub, e), {0, 0, 0, 0, 0, 1, 1}};
    SubwordVectorTable tgt{EmbeddingMatrix(sub, e), {0, 0, 0, 0, 0, 1, 0}};
    const auto tm = translation_matrix_from_subwords(tgt, src);
    CHECK(tm.num_covered() == 1);
    CHECK(tm.row(5) == TranslationMatrix::Row{{5, 1.0}});
  }
}

TEST_SUITE("entropy report") {
  TEST_CASE("identity") {
    std::vector<TranslationMatrix::Row> rows;
    for (TokenId i = 0; i < 4; ++i) rows.push_back({{i, 1.0}});
    const auto r = row_entropy_report(TranslationMatrix(4, rows));
    CHECK(r.mean_nonzeros == 1.0);
    CHECK(r.mean_entropy == 0.0);
    CHECK(r.histogram.at(0) == 4);
  }

  TEST_CASE("uniform rows") {
    std::vector<TranslationMatrix::Row> rows(2);
    for (TokenId j = 0; j < 8; ++j) rows[0].push_back({j, 1.0 / 8});
    const auto r = row_entropy_report(TranslationMatrix(8, rows));
    CHECK(r.entropy[0] == doctest::Approx(std::log(8.0)).epsilon(1e-12));
    CHECK(r.covered == 1);
    CHECK(r.nonzeros[1] == 0);
    CHECK(r.histogram.at(3) == 1);
  }

  TEST_CASE("sparsemax rows never exceed the row length") {
    std::mt19937_64 gen(7);
    std::normal_distribution<double> n(0.0, 1.0);
    RowMatrixD a(10, 4), b(12, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(gen);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = n(gen);
    const auto r = row_entropy_report(translation_matrix_from_vectors(matrix_of(a, "t"), matrix_of(b)));
    for (auto nz : r.nonzeros) CHECK(nz <= 12);
  }
}
