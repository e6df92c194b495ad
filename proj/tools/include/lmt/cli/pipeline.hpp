#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lmt/cli/commands.hpp"
#include "lmt/cli/fixture.hpp"
#include "lmt/error.hpp"

namespace lmt::cli {

/// Everything run-all needs. Relative data paths are resolved against the
/// directory of the config file.
struct PipelineConfig {
  std::filesystem::path output_dir = "run";
  unsigned threads = 1;

  bool use_fixture = true;
  CipherFixtureOptions fixture;

  // [data]; corpora and dictionary are taken from the fixture when enabled
  std::string en_train, en_valid, fg_train, fg_valid;
  std::string dictionary;        // "foreign<TAB>english" for init.method = dictionary
  std::string fg_vectors, en_vectors;
  std::string align_dictionary;  // seed pairs for the orthogonal map; identical strings when empty
  std::string parallel_fg, parallel_en, alignments;

  // [vocab]
  std::size_t bpe_merges_en = 0, bpe_merges_fg = 0;  // 0: word-level vocabulary
  std::size_t max_size = 50000;

  ModelConfig model;
  TrainingConfig pretrain, transfer;

  // [init]
  std::string method = "dictionary";  // dictionary | vectors | ibm1 | fastalign | random
  std::uint64_t init_seed = 1;
  std::string projection = "sparsemax";
  bool normalize = false;
  std::optional<std::size_t> vector_limit;
  std::size_t ibm1_iterations = 5;
  double ibm1_prune = 1e-4;
  std::size_t ibm1_subsample = 0;

  EvalOptions eval;
  double retention_tolerance = 0.1;

  /// Desk-scale defaults for the pipeline.
  static PipelineConfig defaults();
  static PipelineConfig from(const FlatConfig& cfg, const std::filesystem::path& base_dir);
  /// Checks knobs and that every referenced input exists.
  void validate() const;
};

struct RunAllArgs {
  std::string config;
  std::vector<std::string> set;
  std::string output_dir;  // overrides output_dir from the config
  std::string cache_dir;   // overrides LMT_CACHE_DIR and <output>/cache
};

Json run_pipeline(const PipelineConfig& config, const std::filesystem::path& cache_root);
Json cmd_run_all(const RunAllArgs& args);

/// Stage failure inside run-all; keeps the error kind of the cause.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const Error& cause)
      : Error(cause.kind(), stage + ": " + cause.what()), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace lmt::cli
