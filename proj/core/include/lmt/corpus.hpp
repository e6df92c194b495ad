#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lmt {

using TokenId = std::int32_t;

/// Ordered token <-> index map.
///
/// Model vocabularies carry the five reserved tokens at indices 0..4
/// (PAD, UNK, MASK, BOS, EOS). Vocabularies that merely index a word-vector
/// file have no reserved block; `has_specials()` tells the two apart.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kMask = 2;
  static constexpr TokenId kBos = 3;
  static constexpr TokenId kEos = 4;
  static constexpr std::size_t kNumSpecials = 5;
  static constexpr std::array<std::string_view, kNumSpecials> kSpecialTokens = {
      "[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]"};

  Vocabulary() = default;

  /// Reserved tokens followed by `tokens`. Throws on duplicates or if
  /// `tokens` contains a reserved string.
  static Vocabulary with_specials(std::vector<std::string> tokens);

  /// Exactly `tokens`, no reserved block. Throws on duplicates.
  static Vocabulary plain(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  bool empty() const noexcept { return tokens_.empty(); }
  bool has_specials() const noexcept { return has_specials_; }
  bool is_special(TokenId id) const noexcept {
    return has_specials_ && id >= 0 && static_cast<std::size_t>(id) < kNumSpecials;
  }

  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::optional<TokenId> find(std::string_view token) const;
  /// Index of `token`, or UNK. Requires the reserved block.
  TokenId id_or_unk(std::string_view token) const;

  /// One token per line in index order.
  void save(const std::string& path) const;
  /// Detects the reserved block from the first five lines.
  static Vocabulary load(const std::string& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.has_specials_ == b.has_specials_ && a.tokens_ == b.tokens_;
  }

 private:
  struct Hash {
    using is_transparent = void;
    std::size_t operator()(std::string_view s) const noexcept {
      return std::hash<std::string_view>{}(s);
    }
  };

  void build_index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId, Hash, std::equal_to<>> index_;
  bool has_specials_ = false;
};

// ---------------------------------------------------------------------------
// Byte-pair encoding

/// Marker appended to the last symbol of every word, fastBPE style.
inline constexpr std::string_view kEndOfWord = "</w>";

/// Ordered list of merge rules. Order is significant: rule i has rank i.
class BpeCodes {
 public:
  using Merge = std::pair<std::string, std::string>;

  BpeCodes() = default;
  explicit BpeCodes(std::vector<Merge> merges);

  const std::vector<Merge>& merges() const noexcept { return merges_; }
  std::size_t size() const noexcept { return merges_.size(); }
  bool empty() const noexcept { return merges_.empty(); }

  /// Rank of the merge (a, b), if learned.
  std::optional<std::size_t> rank(std::string_view a, std::string_view b) const;

  /// One merge per line, "symbol1 symbol2". A trailing count column (as
  /// written by fastBPE) is accepted and ignored on load.
  void save(const std::string& path) const;
  static BpeCodes load(const std::string& path);

  friend bool operator==(const BpeCodes& a, const BpeCodes& b) { return a.merges_ == b.merges_; }

 private:
  std::vector<Merge> merges_;
  std::unordered_map<std::string, std::size_t> ranks_;
};

struct BpeLearnResult {
  BpeCodes codes;
  std::size_t requested = 0;
  /// Set when the corpus ran out of pairs before `requested` merges.
  bool exhausted = false;
};

/// Splits a UTF-8 string into code points. Invalid bytes become single units.
std::vector<std::string> split_utf8(std::string_view word);

/// Whitespace pretokenization.
std::vector<std::string> split_whitespace(std::string_view line);

/// Greedy BPE over whitespace-separated words. Frequency ties are broken by
/// lexicographic order of the (left, right) symbol pair.
BpeLearnResult learn_bpe(std::span<const std::string> lines, std::size_t num_codes);

/// Same, from precomputed word frequencies.
BpeLearnResult learn_bpe_from_counts(const std::unordered_map<std::string, std::uint64_t>& word_counts,
                                     std::size_t num_codes);

/// Segments one word. The final subword carries the "</w>" suffix.
std::vector<std::string> apply_bpe(std::string_view word, const BpeCodes& codes);

/// Inverse of segmentation: concatenates subwords, "</w>" closes a word.
std::string detokenize(std::span<const std::string> subwords);

// ---------------------------------------------------------------------------
// Vocabulary construction and statistics

/// Reserved tokens first, then tokens by descending count (ties
/// lexicographic), truncated to `max_size` entries in total.
Vocabulary build_vocab_from_counts(const std::unordered_map<std::string, std::uint64_t>& counts,
                                   std::size_t max_size);
Vocabulary build_vocab(std::span<const std::string> tokens, std::size_t max_size);

/// Relative token frequencies over a vocabulary.
class UnigramTable {
 public:
  UnigramTable(Vocabulary vocab, std::vector<double> probs);

  const Vocabulary& vocab() const noexcept { return vocab_; }
  const std::vector<double>& probs() const noexcept { return probs_; }
  double prob(TokenId id) const { return probs_.at(static_cast<std::size_t>(id)); }
  std::optional<double> find(std::string_view token) const;

 private:
  Vocabulary vocab_;
  std::vector<double> probs_;
};

/// OOV tokens are booked on UNK. With a vocabulary that has no reserved
/// block, OOV tokens are skipped instead.
UnigramTable unigram_probs(std::span<const std::string> tokens, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Tokenization and corpus readers

/// Whitespace split, optional BPE, then vocabulary lookup (OOV -> UNK).
/// Without codes, whitespace tokens are vocabulary entries as they are.
class Tokenizer {
 public:
  Tokenizer(Vocabulary vocab, std::optional<BpeCodes> codes = std::nullopt)
      : vocab_(std::move(vocab)), codes_(std::move(codes)) {}

  const Vocabulary& vocab() const noexcept { return vocab_; }
  const std::optional<BpeCodes>& codes() const noexcept { return codes_; }

  std::vector<std::string> segment(std::string_view line) const;
  std::vector<TokenId> encode(std::string_view line) const;

 private:
  Vocabulary vocab_;
  std::optional<BpeCodes> codes_;
};

/// Token strings of every line, after optional BPE.
std::vector<std::string> segment_corpus(std::span<const std::string> lines,
                                        const std::optional<BpeCodes>& codes);

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, std::span<const std::string> lines);

struct SentencePair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

/// Line-aligned sentence pairs. For alignment the foreign language is the
/// source side.
struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::size_t dropped = 0;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }
};

ParallelCorpus make_parallel(std::span<const std::string> source_lines,
                             std::span<const std::string> target_lines,
                             const Tokenizer& source, const Tokenizer& target);

/// Two line-aligned files.
ParallelCorpus read_parallel(const std::string& source_path, const std::string& target_path,
                             const Tokenizer& source, const Tokenizer& target);

/// One file, "source<TAB>target" per line.
ParallelCorpus read_parallel_tsv(const std::string& path, const Tokenizer& source,
                                 const Tokenizer& target);

using Sequence = std::vector<TokenId>;

/// Wraps every line in BOS/EOS and packs consecutive lines greedily into
/// sequences of at most `seq_len` tokens. A line is never split across
/// sequences; lines longer than `seq_len` are truncated (EOS kept).
std::vector<Sequence> pack_sequences(std::span<const std::vector<TokenId>> lines,
                                     std::size_t seq_len);

std::vector<Sequence> encode_and_pack(std::span<const std::string> lines, const Tokenizer& tokenizer,
                                      std::size_t seq_len);

}  // namespace lmt
