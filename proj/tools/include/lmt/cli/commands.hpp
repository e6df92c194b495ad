#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmt/cli/fixture.hpp"
#include "lmt/config.hpp"
#include "lmt/corpus.hpp"
#include "lmt/tiny_mlm.hpp"
#include "lmt/trainer.hpp"
#include "lmt/translation.hpp"

// Each cmd_* wraps one library operation: it reads the inputs, writes the
// artifact with the owning module's writer and returns a JSON summary.
namespace lmt::cli {

using Json = nlohmann::ordered_json;

/// One side of a corpus: text file, model vocabulary, optional BPE codes.
struct CorpusSide {
  std::string text;
  std::string vocab;
  std::string codes;
};

struct BpeArgs {
  std::vector<std::string> inputs;
  std::size_t merges = 10000;
  std::string output;
};
Json cmd_bpe(const BpeArgs& args);

struct VocabArgs {
  std::vector<std::string> inputs;
  std::string codes;
  std::size_t max_size = 50000;
  std::string output;
};
Json cmd_vocab(const VocabArgs& args);

struct AlignVectorsArgs {
  std::string foreign;     // .vec to be mapped
  std::string english;     // .vec defining the target space
  std::string dictionary;  // "foreign<TAB>english"; identical strings when empty
  bool normalize = false;
  std::optional<std::size_t> limit;
  std::string output;         // aligned foreign vectors (.vec)
  std::string matrix_output;  // optional d x d map as a tensor file
};
Json cmd_align_vectors(const AlignVectorsArgs& args);

struct Ibm1Args {
  CorpusSide foreign, english;
  std::size_t iterations = 5;
  double prune = 1e-4;
  std::size_t subsample = 0;  // 0: all pairs
  std::uint64_t seed = 1;
  std::string output;  // translation matrix
  std::string table;   // optional raw p(english | foreign) table
};
Json cmd_ibm1(const Ibm1Args& args);

struct FastAlignArgs {
  CorpusSide foreign, english;
  std::string alignments;
  std::string output;
  std::string table;
};
Json cmd_parse_fastalign(const FastAlignArgs& args);

struct SubwordVectorsArgs {
  std::string vectors;  // word-level .vec
  std::string corpus;   // word frequencies
  std::string vocab;    // subword model vocabulary
  std::string codes;
  std::optional<std::size_t> limit;
  std::string output;  // .vec with the subwords that received a vector
};
Json cmd_subword_vectors(const SubwordVectorsArgs& args);

struct TranslationMatrixArgs {
  std::string fg_vocab, en_vocab;
  std::string fg_vectors, en_vectors;  // foreign vectors already aligned
  std::string dictionary;              // "foreign<TAB>english"; replaces the vectors
  std::string projection = "sparsemax";
  unsigned threads = 1;
  std::string output;
};
Json cmd_translation_matrix(const TranslationMatrixArgs& args);

struct InitEmbeddingsArgs {
  std::string matrix;
  std::string checkpoint;  // pretrained English model
  std::string fg_vocab, en_vocab;
  std::uint64_t seed = 1;
  bool random = false;  // baseline: ignore the matrix
  std::string output;       // foreign embeddings (binary vector file)
  std::string bias_output;  // foreign output bias (tensor file)
};
Json cmd_init_embeddings(const InitEmbeddingsArgs& args);

struct PretrainArgs {
  std::string config;
  std::vector<std::string> set;  // "key=value" overrides
  CorpusSide english;
  std::string output_dir;
  std::string metrics;  // default <output_dir>/metrics.csv
};
Json cmd_pretrain(const PretrainArgs& args);

struct TransferArgs {
  std::string config;
  std::vector<std::string> set;
  std::string checkpoint;
  std::string init, init_bias;
  CorpusSide english, foreign;
  std::string output_dir;
  std::string metrics;
};
Json cmd_transfer(const TransferArgs& args);

struct EvalArgs {
  std::string checkpoint;
  CorpusSide corpus;
  std::string language = "en";
  /// Replaces the foreign table of the checkpoint (step-0 evaluation).
  std::string init, init_bias;
  std::size_t seq_len = 0;  // 0: model max_len
  EvalOptions options;
};
Json cmd_eval(const EvalArgs& args);

struct CipherFixtureArgs {
  CipherFixtureOptions options;
  std::string output_dir;
};
Json cmd_cipher_fixture(const CipherFixtureArgs& args);

// Shared helpers ------------------------------------------------------------

/// Keys dim, layers, heads, ffn, max_len, norm (pre|post).
ModelConfig model_config_from(const FlatConfig& cfg, const std::string& prefix, const ModelConfig& defaults = {});
/// Config file (may be empty) with "key=value" overrides applied.
FlatConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

Tokenizer load_tokenizer(const std::string& vocab, const std::string& codes);
std::vector<Sequence> load_sequences(const CorpusSide& side, std::size_t seq_len);

/// Writes to stderr unless logging is disabled.
void log(const std::string& message);
void set_logging(bool enabled);

}  // namespace lmt::cli
