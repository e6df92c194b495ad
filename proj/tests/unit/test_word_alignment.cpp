#include <doctest.h>

#include <cmath>

#include "lmt/error.hpp"
#include "lmt/word_alignment.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace lmt;
using lmt::testing::TempDir;

namespace {

// "le chien"/"the dog" and "le"/"the"; foreign is the source side.
ParallelCorpus le_chien() {
  ParallelCorpus c;
  c.pairs.push_back({{0, 1}, {0, 1}});
  c.pairs.push_back({{0}, {0}});
  return c;
}

double row_total(const AlignmentModel::Row& r) {
  double s = 0.0;
  for (const auto& e : r) s += e.prob;
  return s;
}

// Plain EM on the two-sentence corpus written out longhand.
double reference_p_the_le(int iterations) {
  // t[f][e], f in {le, chien, NULL}, e in {the, dog}
  double t[3][2];
  // uniform over co-occurring pairs: every source co-occurs with both targets
  // except "chien", which only co-occurs with the first sentence (both targets).
  for (auto& row : t) row[0] = row[1] = 0.5;
  for (int it = 0; it < iterations; ++it) {
    double c[3][2] = {};
    // sentence 1: sources le, chien, NULL; targets the, dog
    for (int e = 0; e < 2; ++e) {
      const double z = t[0][e] + t[1][e] + t[2][e];
      for (int f = 0; f < 3; ++f) c[f][e] += t[f][e] / z;
    }
    // sentence 2: sources le, NULL; target the
    {
      const double z = t[0][0] + t[2][0];
      c[0][0] += t[0][0] / z;
      c[2][0] += t[2][0] / z;
    }
    for (int f = 0; f < 3; ++f) {
      const double tot = c[f][0] + c[f][1];
      t[f][0] = c[f][0] / tot;
      t[f][1] = c[f][1] / tot;
    }
  }
  return t[0][0];
}

}  // namespace

TEST_SUITE("ibm1") {
  TEST_CASE("two-sentence corpus concentrates") {
    Ibm1Options opts;
    opts.iterations = 10;
    const auto m = train_ibm1(le_chien(), opts);
    CHECK(m.prob(0, 0) > 0.9);
    CHECK(m.prob(1, 1) > 0.9);
    CHECK(m.iterations_run == 10);
    // Pruning only removes mass below 1e-4, so the longhand value carries over.
    CHECK(m.prob(0, 0) == doctest::Approx(reference_p_the_le(10)).epsilon(1e-3));
  }

  TEST_CASE("single pair") {
    ParallelCorpus c;
    c.pairs.push_back({{0}, {0}});
    const auto m = train_ibm1(c, {});
    CHECK(m.prob(0, 0) >= 0.5);
    CHECK(row_total(m.rows[0]) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row_total(m.null_row) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("one iteration keeps rows normalized") {
    const auto data = lmt::testing::dictionary_corpus(40, 200, 3);
    Ibm1Options opts;
    opts.iterations = 1;
    const auto m = train_ibm1(data.corpus, opts);
    for (const auto& r : m.rows)
      if (!r.empty()) CHECK(row_total(r) == doctest::Approx(1.0).epsilon(1e-6));
  }

  TEST_CASE("empty corpus") {
    CHECK_THROWS_AS(train_ibm1(ParallelCorpus{}, {}), InvalidArgument);
    Ibm1Options opts;
    opts.iterations = 0;
    CHECK_THROWS_AS(train_ibm1(le_chien(), opts), InvalidArgument);
  }

  TEST_CASE("log-likelihood never decreases") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto data = lmt::testing::dictionary_corpus(60, 300, seed);
      Ibm1Options opts;
      opts.iterations = 8;
      const auto m = train_ibm1(data.corpus, opts);
      REQUIRE(m.log_likelihoods.size() == 9);
      for (std::size_t i = 1; i < m.log_likelihoods.size(); ++i)
        CHECK(m.log_likelihoods[i] >= m.log_likelihoods[i - 1] - 1e-9);
      CHECK(m.final_log_likelihood == m.log_likelihoods.back());
    }
  }

  TEST_CASE("pruned rows are distributions above the threshold") {
    const auto data = lmt::testing::dictionary_corpus(80, 400, 9);
    Ibm1Options opts;
    opts.iterations = 5;
    opts.prune = 1e-3;
    const auto m = train_ibm1(data.corpus, opts);
    for (const auto& r : m.rows) {
      if (r.empty()) continue;
      CHECK(row_total(r) == doctest::Approx(1.0).epsilon(1e-6));
      for (const auto& e : r) CHECK(e.prob >= 1e-3);
    }
  }

  TEST_CASE("recovers the generating dictionary") {
    const auto data = lmt::testing::dictionary_corpus(300, 5000, 42);
    Ibm1Options opts;
    opts.iterations = 10;
    const auto m = train_ibm1(data.corpus, opts);
    std::size_t frequent = 0, right = 0;
    for (std::size_t w = 0; w < data.dict.size(); ++w) {
      const TokenId f = data.dict[w];
      if (data.foreign_counts[static_cast<std::size_t>(f)] < 5) continue;
      ++frequent;
      if (m.argmax(f) == static_cast<TokenId>(w + Vocabulary::kNumSpecials)) ++right;
    }
    REQUIRE(frequent > 0);
    CHECK(static_cast<double>(right) / static_cast<double>(frequent) >= 0.95);
  }
}

TEST_SUITE("fast-align") {
  TEST_CASE("diagonal links") {
    ParallelCorpus c;
    c.pairs.push_back({{5, 6}, {5, 6}});
    const auto m = parse_fastalign_lines({"0-0 1-1"}, c);
    CHECK(m.prob(5, 5) == 1.0);
    CHECK(m.prob(6, 6) == 1.0);
  }

  TEST_CASE("relative frequencies across the corpus") {
    ParallelCorpus c;
    c.pairs.push_back({{5}, {7}});
    c.pairs.push_back({{5}, {7}});
    c.pairs.push_back({{5}, {8}});
    const auto m = parse_fastalign_lines({"0-0", "0-0", "0-0"}, c);
    CHECK(m.prob(5, 7) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(m.prob(5, 8) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("out-of-range and malformed links name the line") {
    ParallelCorpus c;
    c.pairs.push_back({{5, 6}, {5, 6}});
    c.pairs.push_back({{5}, {5}});
    for (const std::string bad : {"0-2", "0-", "x-1", "01", "-1"}) {
      try {
        parse_fastalign_lines({"0-0", bad}, c, "align.txt");
        FAIL("expected an error for " << bad);
      } catch (const FormatError& e) {
        CHECK(e.line() == 2);
      }
    }
    CHECK_THROWS_AS(parse_fastalign_lines({"0-0"}, c), FormatError);
  }

  TEST_CASE("bijective alignments give one-hot rows") {
    const auto data = lmt::testing::dictionary_corpus(30, 100, 5, 3, 6);
    std::vector<std::string> lines;
    for (const auto& p : data.corpus.pairs) {
      std::string l;
      for (std::size_t i = 0; i < p.source.size(); ++i) l += std::to_string(i) + "-" + std::to_string(i) + " ";
      lines.push_back(l);
    }
    TempDir dir;
    write_lines(dir.file("align"), lines);
    const auto m = parse_fastalign(dir.file("align"), data.corpus);
    std::vector<std::string> fw, en;
    for (std::size_t i = 0; i < 30; ++i) {
      fw.push_back("f" + std::to_string(i));
      en.push_back("e" + std::to_string(i));
    }
    const auto tm = translation_matrix_from_alignment(m, Vocabulary::with_specials(fw), Vocabulary::with_specials(en));
    for (std::size_t w = 0; w < 30; ++w) {
      const auto f = static_cast<std::size_t>(data.dict[w]);
      if (!tm.covered(f)) continue;
      CHECK(tm.row(f) == TranslationMatrix::Row{{static_cast<TokenId>(w + 5), 1.0}});
    }
  }

  TEST_CASE("unaligned words carry NULL mass") {
    ParallelCorpus c;
    c.pairs.push_back({{5, 6}, {5}});
    const auto m = parse_fastalign_lines({"0-0"}, c);
    CHECK(m.prob(6, AlignmentModel::kNullTarget) == 1.0);
  }
}

TEST_SUITE("alignment to translation matrix") {
  const auto fv = Vocabulary::with_specials({"le", "chien", "rare"});
  const auto ev = Vocabulary::with_specials({"the", "a", "dog"});

  TEST_CASE("pass-through") {
    AlignmentModel m;
    m.rows.resize(fv.size());
    m.rows[5] = {{5, 0.9}, {6, 0.1}};
    const auto tm = translation_matrix_from_alignment(m, fv, ev);
    CHECK(tm.row(5) == TranslationMatrix::Row{{5, 0.9}, {6, 0.1}});
  }

  TEST_CASE("NULL mass is dropped and the row renormalized") {
    AlignmentModel m;
    m.rows.resize(fv.size());
    m.rows[5] = {{AlignmentModel::kNullTarget, 0.4}, {5, 0.6}};
    const auto tm = translation_matrix_from_alignment(m, fv, ev);
    REQUIRE(tm.row(5).size() == 1);
    CHECK(tm.row(5)[0].col == 5);
    CHECK(tm.row(5)[0].weight == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("unseen tokens are uncovered") {
    AlignmentModel m;
    m.rows.resize(6);
    m.rows[5] = {{7, 1.0}};
    const auto tm = translation_matrix_from_alignment(m, fv, ev);
    CHECK(tm.covered(5));
    CHECK_FALSE(tm.covered(6));
    CHECK_FALSE(tm.covered(7));
  }
}

TEST_SUITE("subsample") {
  TEST_CASE("two million pairs from a larger corpus") {
    ParallelCorpus c;
    c.pairs.resize(2100000);
    for (std::size_t i = 0; i < c.pairs.size(); ++i) c.pairs[i].source.push_back(static_cast<TokenId>(i % 1000));
    const auto s = subsample(c, 2000000, 1);
    CHECK(s.size() == 2000000);
  }

  TEST_CASE("whole corpus when n is large") {
    const auto data = lmt::testing::dictionary_corpus(10, 50, 1);
    const auto s = subsample(data.corpus, 50, 3);
    REQUIRE(s.size() == 50);
    for (std::size_t i = 0; i < 50; ++i) CHECK(s.pairs[i].source == data.corpus.pairs[i].source);
  }

  TEST_CASE("deterministic and without replacement") {
    ParallelCorpus c;
    for (TokenId i = 0; i < 1000; ++i) c.pairs.push_back({{i}, {i}});
    const auto a = subsample(c, 100, 7), b = subsample(c, 100, 7), other = subsample(c, 100, 8);
    bool same = true, differs = false;
    for (std::size_t i = 0; i < 100; ++i) {
      same = same && a.pairs[i].source == b.pairs[i].source;
      differs = differs || a.pairs[i].source != other.pairs[i].source;
      if (i) CHECK(a.pairs[i].source[0] > a.pairs[i - 1].source[0]);
    }
    CHECK(same);
    CHECK(differs);
  }
}
