#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include <Eigen/QR>

#include "lmt/embeddings.hpp"
#include "lmt/error.hpp"
#include "test_util.hpp"

using namespace lmt;
using lmt::testing::TempDir;
using lmt::testing::write_file;

namespace {

RowMatrixD gaussian(std::mt19937_64& gen, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  RowMatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(gen);
  return m;
}

// Haar-random orthogonal matrix from the QR of a Gaussian matrix.
MatrixD random_orthogonal(std::mt19937_64& gen, Eigen::Index d) {
  const MatrixD a = gaussian(gen, d, d);
  Eigen::HouseholderQR<MatrixD> qr(a);
  MatrixD q = qr.householderQ();
  const MatrixD r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index k = 0; k < d; ++k)
    if (r(k, k) < 0) q.col(k) *= -1.0;
  return q;
}

EmbeddingMatrix matrix_of(const RowMatrixD& data) {
  std::vector<std::string> toks;
  for (Eigen::Index i = 0; i < data.rows(); ++i) toks.push_back("w" + std::to_string(i));
  return EmbeddingMatrix(Vocabulary::plain(toks), data);
}

Dictionary diagonal(std::size_t n) {
  Dictionary d;
  for (std::size_t i = 0; i < n; ++i) d.emplace_back(static_cast<TokenId>(i), static_cast<TokenId>(i));
  return d;
}

// Best orthogonal 2x2 map for M = X^T Y: maximize tr(W^T M) over rotations
// and reflections in closed form.
Eigen::Matrix2d procrustes_2x2(const Eigen::Matrix2d& m) {
  const double rot_angle = std::atan2(m(1, 0) - m(0, 1), m(0, 0) + m(1, 1));
  const double rot_value = std::hypot(m(1, 0) - m(0, 1), m(0, 0) + m(1, 1));
  const double ref_angle = std::atan2(m(0, 1) + m(1, 0), m(0, 0) - m(1, 1));
  const double ref_value = std::hypot(m(0, 1) + m(1, 0), m(0, 0) - m(1, 1));
  Eigen::Matrix2d w;
  if (rot_value >= ref_value) {
    const double c = std::cos(rot_angle), s = std::sin(rot_angle);
    w << c, -s, s, c;
  } else {
    const double c = std::cos(ref_angle), s = std::sin(ref_angle);
    w << c, s, s, -c;
  }
  return w;
}

}  // namespace

TEST_SUITE("vector files") {
  TEST_CASE("three rows without a limit") {
    TempDir dir;
    write_file(dir.file("v.vec"), "3 2\nthe 0.1 0.2\ndog -1 2.5e-3\ncat 3 4\n");
    const auto emb = load_vectors(dir.file("v.vec"));
    CHECK(emb.rows() == 3);
    CHECK(emb.dim() == 2);
    CHECK(emb.vocab().token(1) == "dog");
    CHECK(emb.data()(1, 1) == 2.5e-3);
  }

  TEST_CASE("limit keeps the first rows") {
    TempDir dir;
    write_file(dir.file("v.vec"), "3 2\nthe 0.1 0.2\ndog -1 2.5e-3\ncat 3 4\n");
    CHECK(load_vectors(dir.file("v.vec"), 2).rows() == 2);
  }

  TEST_CASE("limit of 50000 on a two-million-row file") {
    TempDir dir;
    {
      std::ofstream out(dir.file("big.vec"));
      out << "2000000 2\n";
      for (int i = 0; i < 2000000; ++i) out << 'w' << i << " 0.5 -1\n";
    }
    const auto emb = load_vectors(dir.file("big.vec"), 50000);
    CHECK(emb.rows() == 50000);
    CHECK(emb.vocab().token(49999) == "w49999");
  }

  TEST_CASE("duplicate tokens keep the first occurrence") {
    TempDir dir;
    write_file(dir.file("v.vec"), "3 1\na 1\na 2\nb 3\n");
    const auto emb = load_vectors(dir.file("v.vec"), 5);
    CHECK(emb.rows() == 2);
    CHECK(emb.data()(0, 0) == 1.0);
  }

  TEST_CASE("wrong dimension names the line") {
    TempDir dir;
    write_file(dir.file("v.vec"), "3 2\na 1 2\nb 1\nc 1 2\n");
    try {
      load_vectors(dir.file("v.vec"));
      FAIL("expected an error");
    } catch (const FormatError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
  }

  TEST_CASE("non-finite values are rejected") {
    TempDir dir;
    write_file(dir.file("v.vec"), "1 2\na 1 nan\n");
    CHECK_THROWS_AS(load_vectors(dir.file("v.vec")), FormatError);
    write_file(dir.file("w.vec"), "1 2\na inf 1\n");
    CHECK_THROWS_AS(load_vectors(dir.file("w.vec")), FormatError);
  }

  TEST_CASE("binary round-trip is bit-exact") {
    TempDir dir;
    std::mt19937_64 gen(1);
    const auto emb = matrix_of(gaussian(gen, 40, 7));
    save_vectors(emb, dir.file("v.bin"), VectorFormat::kBinary);
    const auto back = load_vectors_binary(dir.file("v.bin"));
    CHECK(back.vocab() == emb.vocab());
    CHECK(back.data() == emb.data());

    const RowMatrixD f = gaussian(gen, 5, 3).cast<float>().cast<double>();
    save_vectors(matrix_of(f), dir.file("f.bin"), VectorFormat::kBinary);
    CHECK(lmt::testing::read_file(dir.file("f.bin")).find("\"float32\"") != std::string::npos);
    CHECK(load_vectors_any(dir.file("f.bin")).data() == f);
  }

  TEST_CASE("text round-trip within 1e-5 relative") {
    TempDir dir;
    std::mt19937_64 gen(2);
    const auto emb = matrix_of(gaussian(gen, 30, 5) * 1e3);
    save_vectors(emb, dir.file("v.vec"), VectorFormat::kText);
    const auto back = load_vectors(dir.file("v.vec"));
    CHECK(back.vocab() == emb.vocab());
    const double rel = (back.data() - emb.data()).cwiseAbs().maxCoeff() / emb.data().cwiseAbs().maxCoeff();
    CHECK(rel <= 1e-5);
  }

  TEST_CASE("unwritable path") {
    std::mt19937_64 gen(3);
    CHECK_THROWS_AS(save_vectors(matrix_of(gaussian(gen, 2, 2)), "/nonexistent-dir/x.vec", VectorFormat::kText),
                    IoError);
  }

  TEST_CASE("truncated binary payload") {
    TempDir dir;
    std::mt19937_64 gen(4);
    save_vectors(matrix_of(gaussian(gen, 4, 4)), dir.file("v.bin"), VectorFormat::kBinary);
    auto bytes = lmt::testing::read_file(dir.file("v.bin"));
    write_file(dir.file("cut.bin"), bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(load_vectors_binary(dir.file("cut.bin")), FormatError);
  }
}

TEST_SUITE("identical words") {
  TEST_CASE("shared strings") {
    const auto a = Vocabulary::with_specials({"2020", "chat", "internet"});
    const auto b = Vocabulary::with_specials({"internet", "cat", "2020"});
    const auto d = identical_word_dictionary(a, b);
    REQUIRE(d.size() == 2);
    CHECK(d[0] == std::pair<TokenId, TokenId>{5, 7});
    CHECK(d[1] == std::pair<TokenId, TokenId>{7, 5});
  }

  TEST_CASE("disjoint vocabularies ask for a seed dictionary") {
    const auto a = Vocabulary::with_specials({"x"});
    const auto b = Vocabulary::with_specials({"y"});
    try {
      identical_word_dictionary(a, b);
      FAIL("expected an error");
    } catch (const InvalidArgument& e) {
      CHECK(std::string(e.what()).find("seed dictionary") != std::string::npos);
    }
  }

  TEST_CASE("identical vocabularies") {
    const auto a = Vocabulary::with_specials({"p", "q", "r", "s"});
    CHECK(identical_word_dictionary(a, a).size() == 4);
  }

  TEST_CASE("dictionary file") {
    TempDir dir;
    write_file(dir.file("d.tsv"), "chat\tcat\nmissing\tdog\n");
    const auto d =
        load_dictionary(dir.file("d.tsv"), Vocabulary::with_specials({"chat"}), Vocabulary::with_specials({"cat"}));
    REQUIRE(d.size() == 1);
    CHECK(d[0] == std::pair<TokenId, TokenId>{5, 5});
  }
}

TEST_SUITE("procrustes") {
  TEST_CASE("identity when both sides agree") {
    std::mt19937_64 gen(10);
    const auto x = matrix_of(gaussian(gen, 20, 6));
    const auto map = procrustes(x, x, diagonal(20));
    CHECK((map.matrix - MatrixD::Identity(6, 6)).norm() <= 1e-6);
    CHECK(map.rank == 6);
  }

  TEST_CASE("90 degree rotation matches the 2x2 closed form") {
    std::mt19937_64 gen(11);
    const RowMatrixD x = gaussian(gen, 10, 2);
    Eigen::Matrix2d rot;
    rot << 0, 1, -1, 0;
    const RowMatrixD y = x * rot;
    const auto map = procrustes(matrix_of(x), matrix_of(y), diagonal(10));
    const Eigen::Matrix2d oracle = procrustes_2x2(x.transpose() * y);
    CHECK((map.matrix - oracle).norm() <= 1e-9);
    CHECK((map.matrix - MatrixD(rot)).norm() <= 1e-9);
    CHECK(map.residual <= 1e-6);

    // Noisy data: still the closed-form optimum.
    const RowMatrixD noisy = y + 0.3 * gaussian(gen, 10, 2);
    const auto m2 = procrustes(matrix_of(x), matrix_of(noisy), diagonal(10));
    CHECK((m2.matrix - procrustes_2x2(x.transpose() * noisy)).norm() <= 1e-9);
  }

  TEST_CASE("planted map in d=8") {
    std::mt19937_64 gen(12);
    for (int trial = 0; trial < 20; ++trial) {
      const MatrixD q = random_orthogonal(gen, 8);
      const RowMatrixD x = gaussian(gen, 50, 8);
      const auto map = procrustes(matrix_of(x), matrix_of(x * q), diagonal(50));
      CHECK((map.matrix - q).norm() <= 1e-5);
      CHECK(orthogonality_error(map.matrix) <= 1e-6);
    }
  }

  TEST_CASE("rank-deficient cross-covariance still gives an orthogonal map") {
    std::mt19937_64 gen(13);
    const RowMatrixD x = gaussian(gen, 3, 8);
    const auto map = procrustes(matrix_of(x), matrix_of(x), diagonal(3));
    CHECK(map.rank == 3);
    CHECK(map.underdetermined);
    CHECK(orthogonality_error(map.matrix) <= 1e-6);
  }

  TEST_CASE("optimality spot check") {
    std::mt19937_64 gen(14);
    const RowMatrixD x = gaussian(gen, 40, 5);
    const RowMatrixD y = x * random_orthogonal(gen, 5) + 0.5 * gaussian(gen, 40, 5);
    const auto map = procrustes(matrix_of(x), matrix_of(y), diagonal(40));
    CHECK(map.residual <= (x - y).norm());
    for (int i = 0; i < 100; ++i) CHECK(map.residual <= (x * random_orthogonal(gen, 5) - y).norm());
  }
}

TEST_SUITE("align") {
  TEST_CASE("identity map") {
    std::mt19937_64 gen(20);
    const auto x = matrix_of(gaussian(gen, 5, 4));
    CHECK(align(x, MatrixD::Identity(4, 4)).data() == x.data());
  }

  TEST_CASE("isometry and inverse") {
    std::mt19937_64 gen(21);
    const auto x = matrix_of(gaussian(gen, 25, 6));
    const MatrixD w = random_orthogonal(gen, 6);
    const auto y = align(x, w);
    CHECK(y.vocab() == x.vocab());
    for (Eigen::Index i = 0; i < 25; ++i) {
      CHECK(y.data().row(i).norm() == doctest::Approx(x.data().row(i).norm()).epsilon(1e-12));
      for (Eigen::Index j = 0; j < 25; ++j) {
        const double a = x.data().row(i).dot(x.data().row(j));
        const double b = y.data().row(i).dot(y.data().row(j));
        CHECK(std::abs(a - b) <= 1e-6 * std::max(1.0, std::abs(a)));
      }
    }
    CHECK((align(y, w.transpose()).data() - x.data()).cwiseAbs().maxCoeff() <= 1e-9);
  }

  TEST_CASE("dimension mismatch") {
    std::mt19937_64 gen(22);
    CHECK_THROWS_AS(align(matrix_of(gaussian(gen, 2, 3)), MatrixD::Identity(2, 2)), InvalidArgument);
  }
}
