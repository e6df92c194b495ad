#include "lmt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_set>

#include "lmt/error.hpp"

namespace lmt {

// ---------------------------------------------------------------------------
// Vocabulary

void Vocabulary::build_index() {
  index_.clear();
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw InvalidArgument("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

Vocabulary Vocabulary::with_specials(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_.reserve(tokens.size() + kNumSpecials);
  for (auto s : kSpecialTokens) v.tokens_.emplace_back(s);
  for (auto& t : tokens) {
    if (std::find(kSpecialTokens.begin(), kSpecialTokens.end(), t) != kSpecialTokens.end())
      throw InvalidArgument("token '" + t + "' is reserved");
    v.tokens_.push_back(std::move(t));
  }
  v.has_specials_ = true;
  v.build_index();
  return v;
}

Vocabulary Vocabulary::plain(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.build_index();
  return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_or_unk(std::string_view token) const {
  if (!has_specials_) throw InvalidArgument("vocabulary has no UNK token");
  return find(token).value_or(kUnk);
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError(path, "write failed");
}

Vocabulary Vocabulary::load(const std::string& path) {
  auto lines = read_lines(path);
  bool specials = lines.size() >= kNumSpecials;
  for (std::size_t i = 0; specials && i < kNumSpecials; ++i) specials = lines[i] == kSpecialTokens[i];
  if (specials) {
    lines.erase(lines.begin(), lines.begin() + kNumSpecials);
    return with_specials(std::move(lines));
  }
  return plain(std::move(lines));
}

// ---------------------------------------------------------------------------
// BPE

namespace {

std::string pair_key(std::string_view a, std::string_view b) {
  std::string key;
  key.reserve(a.size() + b.size() + 1);
  key.append(a).push_back(' ');
  key.append(b);
  return key;
}

std::vector<std::string> initial_symbols(std::string_view word) {
  auto symbols = split_utf8(word);
  if (!symbols.empty()) symbols.back().append(kEndOfWord);
  return symbols;
}

}  // namespace

BpeCodes::BpeCodes(std::vector<Merge> merges) : merges_(std::move(merges)) {
  ranks_.reserve(merges_.size());
  for (std::size_t i = 0; i < merges_.size(); ++i)
    ranks_.emplace(pair_key(merges_[i].first, merges_[i].second), i);
}

std::optional<std::size_t> BpeCodes::rank(std::string_view a, std::string_view b) const {
  auto it = ranks_.find(pair_key(a, b));
  if (it == ranks_.end()) return std::nullopt;
  return it->second;
}

void BpeCodes::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
  if (!out) throw IoError(path, "write failed");
}

BpeCodes BpeCodes::load(const std::string& path) {
  const auto lines = read_lines(path);
  std::vector<Merge> merges;
  merges.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto fields = split_whitespace(lines[i]);
    if (fields.empty()) continue;
    if (fields.size() != 2 && fields.size() != 3)
      throw FormatError(path, i + 1, "expected 'symbol1 symbol2'");
    merges.emplace_back(std::move(fields[0]), std::move(fields[1]));
  }
  return BpeCodes(std::move(merges));
}

std::vector<std::string> split_utf8(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0 && c < 0xF8) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    if (c >= 0xF8 || i + len > word.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(word[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

BpeLearnResult learn_bpe(std::span<const std::string> lines, std::size_t num_codes) {
  std::unordered_map<std::string, std::uint64_t> counts;
  for (const auto& line : lines)
    for (auto& w : split_whitespace(line)) ++counts[std::move(w)];
  return learn_bpe_from_counts(counts, num_codes);
}

BpeLearnResult learn_bpe_from_counts(const std::unordered_map<std::string, std::uint64_t>& word_counts,
                                     std::size_t num_codes) {
  if (word_counts.empty()) throw InvalidArgument("learn_bpe: empty corpus");

  BpeLearnResult result;
  result.requested = num_codes;
  if (num_codes == 0) return result;

  // Symbols are interned; words are sequences of symbol ids.
  std::vector<std::string> symbols;
  std::unordered_map<std::string, int> symbol_ids;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = symbol_ids.emplace(s, static_cast<int>(symbols.size()));
    if (inserted) symbols.push_back(s);
    return it->second;
  };

  // Sorted word order makes the run independent of hash-map iteration order.
  std::vector<std::pair<std::string, std::uint64_t>> sorted(word_counts.begin(), word_counts.end());
  std::sort(sorted.begin(), sorted.end());

  std::vector<std::vector<int>> words;
  std::vector<std::int64_t> freq;
  words.reserve(sorted.size());
  for (const auto& [w, c] : sorted) {
    std::vector<int> ids;
    for (const auto& s : initial_symbols(w)) ids.push_back(intern(s));
    words.push_back(std::move(ids));
    freq.push_back(static_cast<std::int64_t>(c));
  }

  using PairKey = std::uint64_t;
  auto key_of = [](int a, int b) {
    return (static_cast<PairKey>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  };
  auto left_of = [](PairKey k) { return static_cast<int>(k >> 32); };
  auto right_of = [](PairKey k) { return static_cast<int>(k & 0xffffffffu); };

  std::unordered_map<PairKey, std::int64_t> pair_count;
  std::unordered_map<PairKey, std::unordered_set<int>> where;

  // Max-count first, then lexicographic (left, right).
  auto before = [&](const std::pair<std::int64_t, PairKey>& x, const std::pair<std::int64_t, PairKey>& y) {
    if (x.first != y.first) return x.first > y.first;
    const auto& xl = symbols[static_cast<std::size_t>(left_of(x.second))];
    const auto& yl = symbols[static_cast<std::size_t>(left_of(y.second))];
    if (xl != yl) return xl < yl;
    return symbols[static_cast<std::size_t>(right_of(x.second))] <
           symbols[static_cast<std::size_t>(right_of(y.second))];
  };
  std::set<std::pair<std::int64_t, PairKey>, decltype(before)> queue(before);

  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto& ids = words[w];
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const PairKey k = key_of(ids[i], ids[i + 1]);
      pair_count[k] += freq[w];
      where[k].insert(static_cast<int>(w));
    }
  }
  for (const auto& [k, c] : pair_count) queue.emplace(c, k);

  std::vector<BpeCodes::Merge> merges;
  merges.reserve(num_codes);
  std::unordered_map<PairKey, std::int64_t> delta;

  while (merges.size() < num_codes) {
    if (queue.empty() || queue.begin()->first <= 0) break;
    const PairKey best = queue.begin()->second;
    const int a = left_of(best);
    const int b = right_of(best);
    const std::string merged_str = symbols[static_cast<std::size_t>(a)] + symbols[static_cast<std::size_t>(b)];
    merges.emplace_back(symbols[static_cast<std::size_t>(a)], symbols[static_cast<std::size_t>(b)]);
    const int merged = intern(merged_str);

    delta.clear();
    const auto affected = where[best];
    std::vector<int> affected_sorted(affected.begin(), affected.end());
    std::sort(affected_sorted.begin(), affected_sorted.end());
    for (int w : affected_sorted) {
      auto& ids = words[static_cast<std::size_t>(w)];
      const std::int64_t f = freq[static_cast<std::size_t>(w)];
      std::vector<int> next;
      next.reserve(ids.size());
      bool changed = false;
      for (std::size_t i = 0; i < ids.size();) {
        if (i + 1 < ids.size() && ids[i] == a && ids[i + 1] == b) {
          next.push_back(merged);
          i += 2;
          changed = true;
        } else {
          next.push_back(ids[i]);
          ++i;
        }
      }
      if (!changed) continue;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) delta[key_of(ids[i], ids[i + 1])] -= f;
      for (std::size_t i = 0; i + 1 < next.size(); ++i) {
        const PairKey k = key_of(next[i], next[i + 1]);
        delta[k] += f;
        where[k].insert(w);
      }
      ids = std::move(next);
    }
    for (const auto& [k, d] : delta) {
      if (d == 0) continue;
      auto& c = pair_count[k];
      if (c > 0) queue.erase({c, k});
      c += d;
      if (c > 0) queue.emplace(c, k);
    }
    where.erase(best);
  }

  result.exhausted = merges.size() < num_codes;
  result.codes = BpeCodes(std::move(merges));
  return result;
}

std::vector<std::string> apply_bpe(std::string_view word, const BpeCodes& codes) {
  auto symbols = initial_symbols(word);
  if (codes.empty()) return symbols;
  while (symbols.size() > 1) {
    std::optional<std::size_t> best;
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto r = codes.rank(symbols[i], symbols[i + 1]);
      if (r && (!best || *r < *best)) {
        best = r;
        best_pos = i;
      }
    }
    if (!best) break;
    const std::string a = symbols[best_pos];
    const std::string b = symbols[best_pos + 1];
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == a && symbols[i + 1] == b) {
        next.push_back(a + b);
        i += 2;
      } else {
        next.push_back(std::move(symbols[i]));
        ++i;
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

std::string detokenize(std::span<const std::string> subwords) {
  std::string out;
  bool pending_space = false;
  for (const auto& s : subwords) {
    if (pending_space) out.push_back(' ');
    pending_space = false;
    std::string_view v = s;
    if (v.ends_with(kEndOfWord)) {
      v.remove_suffix(kEndOfWord.size());
      pending_space = true;
    }
    out.append(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary construction and statistics

Vocabulary build_vocab_from_counts(const std::unordered_map<std::string, std::uint64_t>& counts,
                                   std::size_t max_size) {
  if (max_size <= Vocabulary::kNumSpecials)
    throw InvalidArgument("build_vocab: max_size must exceed the number of reserved tokens");
  std::vector<std::pair<std::string, std::uint64_t>> entries;
  entries.reserve(counts.size());
  for (const auto& [t, c] : counts) {
    if (std::find(Vocabulary::kSpecialTokens.begin(), Vocabulary::kSpecialTokens.end(), t) !=
        Vocabulary::kSpecialTokens.end())
      continue;
    entries.emplace_back(t, c);
  }
  std::sort(entries.begin(), entries.end(), [](const auto& x, const auto& y) {
    if (x.second != y.second) return x.second > y.second;
    return x.first < y.first;
  });
  const std::size_t keep = std::min(entries.size(), max_size - Vocabulary::kNumSpecials);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(std::move(entries[i].first));
  return Vocabulary::with_specials(std::move(tokens));
}

Vocabulary build_vocab(std::span<const std::string> tokens, std::size_t max_size) {
  std::unordered_map<std::string, std::uint64_t> counts;
  for (const auto& t : tokens) ++counts[t];
  return build_vocab_from_counts(counts, max_size);
}

UnigramTable::UnigramTable(Vocabulary vocab, std::vector<double> probs)
    : vocab_(std::move(vocab)), probs_(std::move(probs)) {
  if (probs_.size() != vocab_.size()) throw InvalidArgument("UnigramTable: size mismatch");
}

std::optional<double> UnigramTable::find(std::string_view token) const {
  auto id = vocab_.find(token);
  if (!id) return std::nullopt;
  return probs_[static_cast<std::size_t>(*id)];
}

UnigramTable unigram_probs(std::span<const std::string> tokens, const Vocabulary& vocab) {
  if (tokens.empty()) throw InvalidArgument("unigram_probs: empty corpus");
  std::vector<std::uint64_t> counts(vocab.size(), 0);
  std::uint64_t total = 0;
  for (const auto& t : tokens) {
    auto id = vocab.find(t);
    if (!id) {
      if (!vocab.has_specials()) continue;
      id = Vocabulary::kUnk;
    }
    ++counts[static_cast<std::size_t>(*id)];
    ++total;
  }
  if (total == 0) throw InvalidArgument("unigram_probs: no in-vocabulary tokens");
  std::vector<double> probs(vocab.size());
  for (std::size_t i = 0; i < probs.size(); ++i)
    probs[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  return UnigramTable(vocab, std::move(probs));
}

// ---------------------------------------------------------------------------
// Tokenization and corpus readers

std::vector<std::string> Tokenizer::segment(std::string_view line) const {
  auto words = split_whitespace(line);
  if (!codes_) return words;
  std::vector<std::string> out;
  for (const auto& w : words) {
    auto pieces = apply_bpe(w, *codes_);
    out.insert(out.end(), std::make_move_iterator(pieces.begin()), std::make_move_iterator(pieces.end()));
  }
  return out;
}

std::vector<TokenId> Tokenizer::encode(std::string_view line) const {
  auto pieces = segment(line);
  std::vector<TokenId> ids;
  ids.reserve(pieces.size());
  for (const auto& p : pieces) ids.push_back(vocab_.id_or_unk(p));
  return ids;
}

std::vector<std::string> segment_corpus(std::span<const std::string> lines,
                                        const std::optional<BpeCodes>& codes) {
  std::vector<std::string> out;
  std::unordered_map<std::string, std::vector<std::string>> cache;
  for (const auto& line : lines) {
    for (auto& w : split_whitespace(line)) {
      if (!codes) {
        out.push_back(std::move(w));
        continue;
      }
      auto it = cache.find(w);
      if (it == cache.end()) it = cache.emplace(w, apply_bpe(w, *codes)).first;
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
  }
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (in.bad()) throw IoError(path, "read failed");
  return lines;
}

void write_lines(const std::string& path, std::span<const std::string> lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError(path, "write failed");
}

ParallelCorpus make_parallel(std::span<const std::string> source_lines,
                             std::span<const std::string> target_lines,
                             const Tokenizer& source, const Tokenizer& target) {
  if (source_lines.size() != target_lines.size())
    throw InvalidArgument("parallel corpus line counts differ: source has " +
                          std::to_string(source_lines.size()) + ", target has " +
                          std::to_string(target_lines.size()));
  ParallelCorpus corpus;
  corpus.pairs.reserve(source_lines.size());
  for (std::size_t i = 0; i < source_lines.size(); ++i) {
    SentencePair p{source.encode(source_lines[i]), target.encode(target_lines[i])};
    if (p.source.empty() || p.target.empty()) {
      ++corpus.dropped;
      continue;
    }
    corpus.pairs.push_back(std::move(p));
  }
  return corpus;
}

ParallelCorpus read_parallel(const std::string& source_path, const std::string& target_path,
                             const Tokenizer& source, const Tokenizer& target) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size())
    throw FormatError(source_path, 0,
                      "line count " + std::to_string(src.size()) + " differs from " + target_path + " (" +
                          std::to_string(tgt.size()) + ")");
  return make_parallel(src, tgt, source, target);
}

ParallelCorpus read_parallel_tsv(const std::string& path, const Tokenizer& source,
                                 const Tokenizer& target) {
  const auto lines = read_lines(path);
  std::vector<std::string> src, tgt;
  src.reserve(lines.size());
  tgt.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto tab = lines[i].find('\t');
    if (tab == std::string::npos || lines[i].find('\t', tab + 1) != std::string::npos)
      throw FormatError(path, i + 1, "expected exactly one tab separator");
    src.push_back(lines[i].substr(0, tab));
    tgt.push_back(lines[i].substr(tab + 1));
  }
  return make_parallel(src, tgt, source, target);
}

std::vector<Sequence> pack_sequences(std::span<const std::vector<TokenId>> lines, std::size_t seq_len) {
  if (seq_len < 3) throw InvalidArgument("pack_sequences: seq_len must be at least 3");
  std::vector<Sequence> out;
  Sequence current;
  for (const auto& line : lines) {
    if (line.empty()) continue;
    Sequence framed;
    framed.reserve(line.size() + 2);
    framed.push_back(Vocabulary::kBos);
    framed.insert(framed.end(), line.begin(), line.end());
    framed.push_back(Vocabulary::kEos);
    if (framed.size() > seq_len) {
      framed.resize(seq_len);
      framed.back() = Vocabulary::kEos;
    }
    if (current.size() + framed.size() > seq_len) {
      out.push_back(std::move(current));
      current.clear();
    }
    current.insert(current.end(), framed.begin(), framed.end());
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::vector<Sequence> encode_and_pack(std::span<const std::string> lines, const Tokenizer& tokenizer,
                                      std::size_t seq_len) {
  std::vector<std::vector<TokenId>> encoded;
  encoded.reserve(lines.size());
  for (const auto& l : lines) encoded.push_back(tokenizer.encode(l));
  return pack_sequences(encoded, seq_len);
}

}  // namespace lmt
