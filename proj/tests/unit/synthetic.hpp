#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "lmt/corpus.hpp"

namespace lmt::testing {

// Parallel corpus where every foreign sentence is the token-wise translation
// of a Zipf-distributed English sentence through `dict` (English id ->
// foreign id). Ids start after the reserved block on both sides.
struct DictionaryCorpus {
  ParallelCorpus corpus;  // source = foreign, target = English
  std::vector<TokenId> dict;
  std::vector<std::size_t> foreign_counts;
};

inline DictionaryCorpus dictionary_corpus(std::size_t types, std::size_t pairs, std::uint64_t seed,
                                          std::size_t min_len = 4, std::size_t max_len = 12) {
  std::mt19937_64 gen(seed);
  const auto first = static_cast<TokenId>(Vocabulary::kNumSpecials);
  DictionaryCorpus out;
  out.dict.resize(types);
  for (std::size_t i = 0; i < types; ++i) out.dict[i] = first + static_cast<TokenId>(i);
  std::shuffle(out.dict.begin(), out.dict.end(), gen);
  std::vector<double> weights(types);
  for (std::size_t i = 0; i < types; ++i) weights[i] = 1.0 / std::pow(static_cast<double>(i + 1), 1.0);
  std::discrete_distribution<std::size_t> word(weights.begin(), weights.end());
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  out.foreign_counts.assign(types + Vocabulary::kNumSpecials, 0);
  for (std::size_t p = 0; p < pairs; ++p) {
    SentencePair sp;
    for (std::size_t k = len(gen); k > 0; --k) {
      const std::size_t w = word(gen);
      sp.target.push_back(first + static_cast<TokenId>(w));
      sp.source.push_back(out.dict[w]);
      ++out.foreign_counts[static_cast<std::size_t>(out.dict[w])];
    }
    out.corpus.pairs.push_back(std::move(sp));
  }
  return out;
}

}  // namespace lmt::testing
