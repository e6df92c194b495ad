#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace lmt::cli {

struct CipherFixtureOptions {
  std::size_t vocab_size = 1000;  // word types
  std::size_t sentences = 20000;  // training sentences
  std::size_t heldout = 1000;     // held-out sentences
  std::uint64_t seed = 1;
  std::size_t successors = 8;     // bigram fan-out per word
  double smoothing = 0.1;         // chance of a unigram draw instead of a successor
  double zipf = 1.0;
  std::size_t min_len = 5;
  std::size_t max_len = 15;
  /// Noisy variants: share of dictionary entries removed, share of
  /// multi-syllable cipher types split into two pieces.
  double dict_dropout = 0.0;
  double split_prob = 0.0;

  void validate() const;
};

/// English-like bigram corpus, its token-level cipher and the ground truth.
struct CipherFixture {
  std::vector<std::string> english_words;  // type i
  std::vector<std::string> cipher_words;   // cipher of type i
  std::vector<std::string> en_train, en_valid, fg_train, fg_valid;
  /// (cipher word, English word) for every type, in type order.
  std::vector<std::pair<std::string, std::string>> dictionary;
  /// Dictionary after dropout; equal to `dictionary` without dropout.
  std::vector<std::pair<std::string, std::string>> noisy_dictionary;
  /// Cipher corpora with the split types replaced by two pieces; empty
  /// without splits.
  std::vector<std::string> fg_train_split, fg_valid_split;
  std::size_t split_types = 0;
};

CipherFixture make_cipher_fixture(const CipherFixtureOptions& options);

/// en.train.txt, en.valid.txt, fg.train.txt, fg.valid.txt, dictionary.tsv,
/// dictionary.noisy.tsv and, with splits, fg.split.{train,valid}.txt.
void write_cipher_fixture(const CipherFixture& fixture, const std::string& dir);

std::string syllable_word(std::size_t index, bool cipher);

}  // namespace lmt::cli
