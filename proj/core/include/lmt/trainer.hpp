#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lmt/config.hpp"
#include "lmt/embeddings.hpp"
#include "lmt/tiny_mlm.hpp"

namespace lmt {

struct TrainingConfig {
  std::size_t total_updates = 5000;
  std::size_t warmup_updates = 400;
  double peak_lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t seq_len = 64;
  double mask_prob = 0.15;
  std::size_t freeze_phase_updates = 500;
  std::uint64_t seed = 1;
  /// 0: only the final checkpoint.
  std::size_t checkpoint_every = 0;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
  unsigned threads = 1;

  void validate() const;
  /// Large-scale profile: 120k updates, warmup 4000, lr 1e-4, batch 112, length 256.
  static TrainingConfig large_scale();

  /// Reads keys total_updates, warmup_updates, ... (same names as the fields).
  static TrainingConfig from_config(const FlatConfig& cfg, const std::string& prefix, const TrainingConfig& defaults);
  static TrainingConfig from_config(const FlatConfig& cfg, const std::string& prefix = "");
  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

inline constexpr double kWarmupFloorLr = 1e-7;

/// Linear warmup from 1e-7 to peak over warmup_updates, then
/// peak * sqrt(warmup / step). With warmup_updates = 0 the rate is the peak.
double lr_schedule(std::size_t step, const TrainingConfig& cfg);

/// Endless stream over packed sequences; reshuffled at every epoch with a
/// permutation derived from (seed, epoch).
class SequenceStream {
 public:
  SequenceStream(std::vector<Sequence> sequences, std::uint64_t seed);

  const Sequence& next();
  std::size_t size() const noexcept { return sequences_.size(); }
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  void reshuffle();

  std::vector<Sequence> sequences_;
  std::vector<std::size_t> order_;
  std::uint64_t seed_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
};

struct BatchPair {
  MaskedBatch en, fg;
};

/// batch_size/2 rows from each stream, truncated to seq_len (keeping EOS),
/// masked with seeds derived from (seed, step, language).
BatchPair balanced_batch(SequenceStream& en, SequenceStream& fg, const TrainingConfig& cfg, std::size_t vocab_en,
                         std::size_t vocab_fg, std::size_t step);

struct OptimizerState {
  ModelState<float> m, v;
  /// Updates applied per group (bias correction starts with the group).
  std::array<std::uint64_t, kNumParamGroups> steps{};

  static OptimizerState for_model(const ModelState<float>& state);
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Throws NumericError naming the group when a trainable gradient is not
/// finite; nothing is modified in that case.
void adam_step(ModelState<float>& state, const ModelState<float>& grads, OptimizerState& opt, double lr,
               const FreezeMask& freeze, const AdamOptions& adam = {});

/// Global L2 norm over trainable groups; scales the gradients down when it
/// exceeds max_norm. Returns the norm before clipping.
double clip_gradients(ModelState<float>& grads, const FreezeMask& freeze, double max_norm);

/// Sum of all values of each group in double; for freeze checks.
std::array<double, kNumParamGroups> group_checksums(const ModelState<float>& state);

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0.0;
  std::optional<double> loss_en, loss_fg;
};

struct RunOptions {
  /// Appends "step,lr,loss_en,loss_fg" rows when set.
  std::string metrics_path;
  /// Checkpoints go to <dir>/step-NNNNNN and <dir>/final when set.
  std::string checkpoint_dir;
  std::function<void(const MetricsRow&, const ModelState<float>&)> after_step;
};

struct RunResult {
  ModelState<float> state;
  std::vector<MetricsRow> metrics;
};

/// English-only MLM training from `init`; every batch row is English.
RunResult pretrain(const TrainingConfig& cfg, ModelState<float> init, const std::vector<Sequence>& english,
                   const RunOptions& options = {});

/// Pretrained model with its foreign table and bias replaced. `fg_bias`
/// defaults to zeros.
ModelState<float> attach_foreign(const ModelState<float>& pretrained, const EmbeddingMatrix& init_emb,
                                 const std::optional<Eigen::VectorXd>& fg_bias = std::nullopt);

/// Phase A (freeze_phase_updates steps): only the foreign table and bias
/// train. Phase B: everything trains. Objective 0.5 * (loss_en + loss_fg).
RunResult run_transfer(const TrainingConfig& cfg, ModelState<float> start, const std::vector<Sequence>& english,
                       const std::vector<Sequence>& foreign, const RunOptions& options = {});

struct EvalOptions {
  std::uint64_t seed = 0x5eed;
  std::size_t batch_size = 16;
  double mask_prob = 0.15;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t masked = 0;
};

/// Fixed-seed masking (every selected position becomes MASK); mean loss and
/// accuracy over all masked positions.
EvalResult evaluate_mlm(const ModelState<float>& state, const std::vector<Sequence>& sequences, Language language,
                        const EvalOptions& options = {});

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

}  // namespace lmt
