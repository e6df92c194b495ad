#include "lmt/embeddings.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include <Eigen/SVD>
#include <json.hpp>

#include "lmt/error.hpp"

namespace lmt {

namespace {

using json = nlohmann::json;

template <typename M>
void check_finite(const M& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError(what + ": non-finite entry");
}

bool parse_number(std::string_view s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

std::vector<std::string_view> split_spaces(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::uint32_t bswap(std::uint32_t x) { return __builtin_bswap32(x); }
inline std::uint64_t bswap(std::uint64_t x) { return __builtin_bswap64(x); }

template <typename T>
void write_block(std::ofstream& out, const T* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  } else {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (std::size_t i = 0; i < n; ++i) {
      U bits = bswap(std::bit_cast<U>(data[i]));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

template <typename T>
void read_block(std::ifstream& in, T* data, std::size_t n) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  if constexpr (std::endian::native != std::endian::little) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<T>(bswap(std::bit_cast<U>(data[i])));
  }
}

struct BinaryHeader {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::string dtype;
  std::optional<std::vector<std::string>> tokens;
};

json make_header(Eigen::Index rows, Eigen::Index cols, const char* dtype, const std::vector<std::string>* tokens) {
  json header = {{"row_count", rows}, {"dim", cols}, {"byte_order", "little"}, {"dtype", dtype}};
  if (tokens) header["tokens"] = *tokens;
  return header;
}

bool exactly_float32(const RowMatrixD& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double v = m.data()[i];
    if (static_cast<double>(static_cast<float>(v)) != v) return false;
  }
  return true;
}

std::ifstream open_binary(const std::string& path, BinaryHeader& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path, 1, "missing header");
  try {
    const json h = json::parse(line);
    header.rows = h.at("row_count").get<std::size_t>();
    header.dim = h.at("dim").get<std::size_t>();
    header.dtype = h.at("dtype").get<std::string>();
    if (h.at("byte_order").get<std::string>() != "little") throw FormatError(path, 1, "unsupported byte order");
    if (header.dtype != "float32" && header.dtype != "float64")
      throw FormatError(path, 1, "unsupported dtype '" + header.dtype + "'");
    if (h.contains("tokens")) header.tokens = h["tokens"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(path, 1, std::string("bad header: ") + e.what());
  }
  return in;
}

void finish_read(std::ifstream& in, const std::string& path) {
  if (!in) throw FormatError(path, 0, "truncated payload");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path, 0, "trailing bytes after payload");
}

template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> read_payload(std::ifstream& in,
                                                                                const BinaryHeader& header) {
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(static_cast<Eigen::Index>(header.rows),
                                                                      static_cast<Eigen::Index>(header.dim));
  read_block(in, m.data(), header.rows * header.dim);
  return m;
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(Vocabulary vocab, RowMatrixD data)
    : vocab_(std::move(vocab)), data_(std::move(data)) {
  if (static_cast<std::size_t>(data_.rows()) != vocab_.size())
    throw InvalidArgument("EmbeddingMatrix: " + std::to_string(data_.rows()) + " rows for a vocabulary of " +
                          std::to_string(vocab_.size()));
  check_finite(data_, "EmbeddingMatrix");
}

EmbeddingMatrix load_vectors(const std::string& path, std::optional<std::size_t> limit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path, 1, "missing header");
  auto head = split_spaces(line);
  std::size_t count = 0, dim = 0;
  if (head.size() != 2 || std::from_chars(head[0].data(), head[0].data() + head[0].size(), count).ec != std::errc() ||
      std::from_chars(head[1].data(), head[1].data() + head[1].size(), dim).ec != std::errc() || dim == 0)
    throw FormatError(path, 1, "expected header 'row_count dim'");

  const std::size_t want = limit ? std::min(*limit, count) : count;
  std::vector<std::string> tokens;
  std::vector<double> values;
  tokens.reserve(want);
  values.reserve(want * dim);
  std::unordered_set<std::string> seen;
  std::size_t lineno = 1;
  while (tokens.size() < want && std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_spaces(line);
    if (fields.size() != dim + 1)
      throw FormatError(path, lineno, "expected " + std::to_string(dim) + " values, found " +
                                          std::to_string(fields.empty() ? 0 : fields.size() - 1));
    std::string token(fields[0]);
    const std::size_t base = values.size();
    for (std::size_t k = 0; k < dim; ++k) {
      double v;
      if (!parse_number(fields[k + 1], v)) throw FormatError(path, lineno, "bad number '" + std::string(fields[k + 1]) + "'");
      if (!std::isfinite(v)) throw FormatError(path, lineno, "non-finite value");
      values.push_back(v);
    }
    if (!seen.insert(token).second) {
      values.resize(base);
      continue;
    }
    tokens.push_back(std::move(token));
  }
  if (tokens.size() < want && !limit)
    throw FormatError(path, 0, "header promises " + std::to_string(count) + " rows, found " +
                                   std::to_string(tokens.size()));
  RowMatrixD data = Eigen::Map<RowMatrixD>(values.data(), static_cast<Eigen::Index>(tokens.size()),
                                           static_cast<Eigen::Index>(dim));
  return EmbeddingMatrix(Vocabulary::plain(std::move(tokens)), std::move(data));
}

EmbeddingMatrix load_vectors_binary(const std::string& path) {
  BinaryHeader header;
  auto in = open_binary(path, header);
  RowMatrixD data = header.dtype == "float32" ? RowMatrixD(read_payload<float>(in, header).cast<double>())
                                              : read_payload<double>(in, header);
  finish_read(in, path);
  if (!header.tokens) throw FormatError(path, 1, "binary vectors need a 'tokens' header field");
  if (header.tokens->size() != header.rows) throw FormatError(path, 1, "token count differs from row_count");
  check_finite(data, path);
  const auto& t = *header.tokens;
  bool specials = t.size() >= Vocabulary::kNumSpecials;
  for (std::size_t i = 0; specials && i < Vocabulary::kNumSpecials; ++i)
    specials = t[i] == Vocabulary::kSpecialTokens[i];
  Vocabulary vocab = specials ? Vocabulary::with_specials({t.begin() + Vocabulary::kNumSpecials, t.end()})
                              : Vocabulary::plain(t);
  return EmbeddingMatrix(std::move(vocab), std::move(data));
}

EmbeddingMatrix load_vectors_any(const std::string& path, std::optional<std::size_t> limit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  if (in.peek() == '{') {
    in.close();
    auto emb = load_vectors_binary(path);
    if (limit && *limit < emb.rows()) {
      std::vector<std::string> toks(emb.vocab().tokens().begin(),
                                    emb.vocab().tokens().begin() + static_cast<std::ptrdiff_t>(*limit));
      RowMatrixD d = emb.data().topRows(static_cast<Eigen::Index>(*limit));
      return EmbeddingMatrix(Vocabulary::plain(std::move(toks)), std::move(d));
    }
    return emb;
  }
  in.close();
  return load_vectors(path, limit);
}

void save_vectors(const EmbeddingMatrix& emb, const std::string& path, VectorFormat format) {
  if (format == VectorFormat::kBinary) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path, "cannot open for writing");
    const auto& m = emb.data();
    if (exactly_float32(m)) {
      out << make_header(m.rows(), m.cols(), "float32", &emb.vocab().tokens()).dump() << '\n';
      const RowMatrixF f = m.cast<float>();
      write_block(out, f.data(), static_cast<std::size_t>(f.size()));
    } else {
      out << make_header(m.rows(), m.cols(), "float64", &emb.vocab().tokens()).dump() << '\n';
      write_block(out, m.data(), static_cast<std::size_t>(m.size()));
    }
    if (!out) throw IoError(path, "write failed");
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  out << emb.rows() << ' ' << emb.dim() << '\n';
  char buf[32];
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    out << emb.vocab().token(static_cast<TokenId>(i));
    for (std::size_t k = 0; k < emb.dim(); ++k) {
      // Shortest representation that round-trips exactly.
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, emb.data()(static_cast<Eigen::Index>(i),
                                                                         static_cast<Eigen::Index>(k)));
      out << ' ' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
    }
    out << '\n';
  }
  if (!out) throw IoError(path, "write failed");
}

void save_tensor(const RowMatrixF& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  out << make_header(m.rows(), m.cols(), "float32", nullptr).dump() << '\n';
  write_block(out, m.data(), static_cast<std::size_t>(m.size()));
  if (!out) throw IoError(path, "write failed");
}

RowMatrixF load_tensor(const std::string& path) {
  BinaryHeader header;
  auto in = open_binary(path, header);
  RowMatrixF m = header.dtype == "float32" ? read_payload<float>(in, header)
                                           : RowMatrixF(read_payload<double>(in, header).cast<float>());
  finish_read(in, path);
  return m;
}

Dictionary identical_word_dictionary(const Vocabulary& src, const Vocabulary& tgt) {
  Dictionary dict;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    if (src.is_special(id)) continue;
    if (auto j = tgt.find(src.token(id)); j && !tgt.is_special(*j)) dict.emplace_back(id, *j);
  }
  if (dict.empty())
    throw InvalidArgument(
        "no identical tokens between the two vocabularies; supply a seed dictionary file (src<TAB>tgt)");
  return dict;
}

Dictionary load_dictionary(const std::string& path, const Vocabulary& src, const Vocabulary& tgt) {
  const auto lines = read_lines(path);
  Dictionary dict;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto tab = lines[i].find('\t');
    if (tab == std::string::npos) throw FormatError(path, i + 1, "expected 'src_token<TAB>tgt_token'");
    auto a = src.find(std::string_view(lines[i]).substr(0, tab));
    auto b = tgt.find(std::string_view(lines[i]).substr(tab + 1));
    if (a && b) dict.emplace_back(*a, *b);
  }
  return dict;
}

double orthogonality_error(const MatrixD& w) {
  return (w.transpose() * w - MatrixD::Identity(w.cols(), w.cols())).norm();
}

EmbeddingMatrix normalize_rows(const EmbeddingMatrix& emb) {
  RowMatrixD d = emb.data();
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const double n = d.row(i).norm();
    if (n > 0) d.row(i) /= n;
  }
  return EmbeddingMatrix(emb.vocab(), std::move(d));
}

OrthogonalMap procrustes(const EmbeddingMatrix& from, const EmbeddingMatrix& to, const Dictionary& dict,
                         const ProcrustesOptions& options) {
  if (from.dim() != to.dim())
    throw InvalidArgument("procrustes: dimension mismatch " + std::to_string(from.dim()) + " vs " +
                          std::to_string(to.dim()));
  if (dict.empty()) throw InvalidArgument("procrustes: empty dictionary");
  const auto d = static_cast<Eigen::Index>(from.dim());
  const auto n = static_cast<Eigen::Index>(dict.size());
  MatrixD x(n, d), y(n, d);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto [a, b] = dict[static_cast<std::size_t>(k)];
    if (a < 0 || static_cast<std::size_t>(a) >= from.rows() || b < 0 || static_cast<std::size_t>(b) >= to.rows())
      throw InvalidArgument("procrustes: dictionary index out of range");
    x.row(k) = from.row(a);
    y.row(k) = to.row(b);
    if (options.normalize) {
      if (const double nx = x.row(k).norm(); nx > 0) x.row(k) /= nx;
      if (const double ny = y.row(k).norm(); ny > 0) y.row(k) /= ny;
    }
  }
  const MatrixD cross = x.transpose() * y;
  Eigen::JacobiSVD<MatrixD> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  OrthogonalMap map;
  map.matrix = svd.matrixU() * svd.matrixV().transpose();
  const auto& sv = svd.singularValues();
  const double tol = sv.size() ? sv(0) * static_cast<double>(d) * 1e-12 : 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++map.rank;
  map.residual = (x * map.matrix - y).norm();
  map.underdetermined = n < d;
  return map;
}

EmbeddingMatrix align(const EmbeddingMatrix& emb, const MatrixD& w) {
  if (static_cast<std::size_t>(w.rows()) != emb.dim() || w.rows() != w.cols())
    throw InvalidArgument("align: map is not " + std::to_string(emb.dim()) + "x" + std::to_string(emb.dim()));
  RowMatrixD out = emb.data() * w;
  return EmbeddingMatrix(emb.vocab(), std::move(out));
}

}  // namespace lmt
