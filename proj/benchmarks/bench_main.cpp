#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "lmt/corpus.hpp"
#include "lmt/rng.hpp"
#include "lmt/tiny_mlm.hpp"
#include "lmt/trainer.hpp"
#include "lmt/translation.hpp"
#include "lmt/word_alignment.hpp"

namespace {

using namespace lmt;

void BM_Sparsemax(benchmark::State& state) {
  Rng rng(1);
  std::vector<double> z(static_cast<std::size_t>(state.range(0)));
  for (auto& v : z) v = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(sparsemax(z));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Sparsemax)->Arg(8)->Arg(1000)->Arg(50000);

void BM_TranslationMatrix(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  Rng rng(2);
  std::vector<std::string> words;
  for (Eigen::Index i = 0; i < n; ++i) words.push_back("w" + std::to_string(i));
  RowMatrixD a(n, 64), b(n, 64);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
  const EmbeddingMatrix tgt(Vocabulary::plain(words), a), src(Vocabulary::plain(words), b);
  for (auto _ : state) benchmark::DoNotOptimize(translation_matrix_from_vectors(tgt, src));
}
BENCHMARK(BM_TranslationMatrix)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

ParallelCorpus synthetic_parallel(std::size_t pairs, std::size_t vocab) {
  Rng rng(3);
  ParallelCorpus c;
  for (std::size_t i = 0; i < pairs; ++i) {
    SentencePair p;
    const std::size_t len = 5 + rng.uniform_int(10);
    for (std::size_t k = 0; k < len; ++k) {
      const auto w = static_cast<TokenId>(5 + rng.uniform_int(vocab));
      p.source.push_back(w);
      p.target.push_back(w);
    }
    c.pairs.push_back(std::move(p));
  }
  return c;
}

void BM_Ibm1(benchmark::State& state) {
  const auto corpus = synthetic_parallel(static_cast<std::size_t>(state.range(0)), 500);
  for (auto _ : state) benchmark::DoNotOptimize(train_ibm1(corpus, {5, 1e-4}));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Ibm1)->Arg(1000)->Arg(5000)->Unit(benchmark::kMillisecond);

void BM_LearnBpe(benchmark::State& state) {
  Rng rng(4);
  const std::string letters = "abcdefghij";
  std::vector<std::string> lines;
  for (int i = 0; i < 2000; ++i) {
    std::string line;
    for (int w = 0; w < 10; ++w) {
      const std::size_t len = 2 + rng.uniform_int(8);
      for (std::size_t k = 0; k < len; ++k) line += letters[rng.uniform_int(letters.size())];
      line += ' ';
    }
    lines.push_back(line);
  }
  for (auto _ : state) benchmark::DoNotOptimize(learn_bpe(lines, static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_LearnBpe)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);

// One bilingual training step of the default model: forward, backward, Adam.
void BM_MlmStep(benchmark::State& state) {
  ModelConfig cfg;
  const auto seq_len = static_cast<std::size_t>(state.range(0));
  const std::size_t vocab = 1000, rows = 8;
  ModelState<float> model = init_model(cfg, vocab, vocab, 5);
  OptimizerState opt = OptimizerState::for_model(model);
  Rng rng(6);
  std::vector<Sequence> seqs(rows);
  for (auto& s : seqs) {
    s.push_back(Vocabulary::kBos);
    while (s.size() + 1 < seq_len) s.push_back(static_cast<TokenId>(5 + rng.uniform_int(vocab - 5)));
    s.push_back(Vocabulary::kEos);
  }
  const MaskedBatch en = make_masked_batch(seqs, Language::kEnglish, vocab, {}, 7);
  const MaskedBatch fg = make_masked_batch(seqs, Language::kForeign, vocab, {}, 8);
  ModelState<float> grads = zeros_like(model);
  const FreezeMask none = FreezeMask::none();
  for (auto _ : state) {
    grads = zeros_like(model);
    accumulate_gradients(model, en, none, grads, 0.5f);
    accumulate_gradients(model, fg, none, grads, 0.5f);
    adam_step(model, grads, opt, 1e-4, none);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * rows * seq_len));
}
BENCHMARK(BM_MlmStep)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
