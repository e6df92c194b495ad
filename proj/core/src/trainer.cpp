#include "lmt/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "lmt/checkpoint.hpp"
#include "lmt/error.hpp"
#include "lmt/rng.hpp"

namespace lmt {

void TrainingConfig::validate() const {
  if (batch_size < 2 || batch_size % 2 != 0) throw InvalidArgument("batch_size must be even and >= 2");
  if (warmup_updates > total_updates) throw InvalidArgument("warmup_updates exceeds total_updates");
  if (freeze_phase_updates > total_updates) throw InvalidArgument("freeze_phase_updates exceeds total_updates");
  if (seq_len < 3) throw InvalidArgument("seq_len must be >= 3");
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw InvalidArgument("peak_lr must be positive");
  if (!(mask_prob > 0.0 && mask_prob <= 1.0)) throw InvalidArgument("mask_prob must be in (0, 1]");
  if (threads < 1) throw InvalidArgument("threads must be >= 1");
}

TrainingConfig TrainingConfig::large_scale() {
  TrainingConfig c;
  c.total_updates = 120000;
  c.warmup_updates = 4000;
  c.peak_lr = 1e-4;
  c.batch_size = 112;
  c.seq_len = 256;
  c.freeze_phase_updates = 0;
  return c;
}

TrainingConfig TrainingConfig::from_config(const FlatConfig& cfg, const std::string& prefix) {
  return from_config(cfg, prefix, TrainingConfig{});
}

TrainingConfig TrainingConfig::from_config(const FlatConfig& cfg, const std::string& prefix,
                                           const TrainingConfig& d) {
  TrainingConfig c;
  c.total_updates = cfg.get_size(prefix + "total_updates", d.total_updates);
  c.warmup_updates = cfg.get_size(prefix + "warmup_updates", d.warmup_updates);
  c.peak_lr = cfg.get_double(prefix + "peak_lr", d.peak_lr);
  c.batch_size = cfg.get_size(prefix + "batch_size", d.batch_size);
  c.seq_len = cfg.get_size(prefix + "seq_len", d.seq_len);
  c.mask_prob = cfg.get_double(prefix + "mask_prob", d.mask_prob);
  c.freeze_phase_updates = cfg.get_size(prefix + "freeze_phase_updates", d.freeze_phase_updates);
  c.seed = cfg.get_u64(prefix + "seed", d.seed);
  c.checkpoint_every = cfg.get_size(prefix + "checkpoint_every", d.checkpoint_every);
  c.clip_norm = cfg.get_double(prefix + "clip_norm", d.clip_norm);
  c.threads = static_cast<unsigned>(cfg.get_size(prefix + "threads", d.threads));
  c.validate();
  return c;
}

double lr_schedule(std::size_t step, const TrainingConfig& cfg) {
  const double peak = cfg.peak_lr;
  if (cfg.warmup_updates == 0) return peak;
  const auto w = static_cast<double>(cfg.warmup_updates);
  const auto s = static_cast<double>(step);
  if (step <= cfg.warmup_updates) return kWarmupFloorLr + (peak - kWarmupFloorLr) * (s / w);
  return peak * std::sqrt(w / s);
}

// ---------------------------------------------------------------------------

SequenceStream::SequenceStream(std::vector<Sequence> sequences, std::uint64_t seed)
    : sequences_(std::move(sequences)), seed_(seed) {
  if (sequences_.empty()) throw InvalidArgument("sequence stream is empty");
  order_.resize(sequences_.size());
  reshuffle();
}

void SequenceStream::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(seed_, epoch_));
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.uniform_int(i)]);
}

const Sequence& SequenceStream::next() {
  if (pos_ == order_.size()) {
    pos_ = 0;
    ++epoch_;
    reshuffle();
  }
  return sequences_[order_[pos_++]];
}

namespace {

Sequence truncated(const Sequence& s, std::size_t seq_len) {
  if (s.size() <= seq_len) return s;
  Sequence out(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(seq_len - 1));
  out.push_back(s.back());
  return out;
}

std::vector<Sequence> draw(SequenceStream& stream, std::size_t n, std::size_t seq_len) {
  std::vector<Sequence> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rows.push_back(truncated(stream.next(), seq_len));
  return rows;
}

MaskingOptions training_masking(const TrainingConfig& cfg) {
  MaskingOptions m;
  m.mask_prob = cfg.mask_prob;
  return m;
}

}  // namespace

BatchPair balanced_batch(SequenceStream& en, SequenceStream& fg, const TrainingConfig& cfg, std::size_t vocab_en,
                         std::size_t vocab_fg, std::size_t step) {
  const std::size_t half = cfg.batch_size / 2;
  const auto en_rows = draw(en, half, cfg.seq_len);
  const auto fg_rows = draw(fg, half, cfg.seq_len);
  const auto masking = training_masking(cfg);
  return {make_masked_batch(en_rows, Language::kEnglish, vocab_en, masking, derive_seed(cfg.seed, step, 0)),
          make_masked_batch(fg_rows, Language::kForeign, vocab_fg, masking, derive_seed(cfg.seed, step, 1))};
}

// ---------------------------------------------------------------------------

OptimizerState OptimizerState::for_model(const ModelState<float>& state) {
  return {zeros_like(state), zeros_like(state), {}};
}

void adam_step(ModelState<float>& state, const ModelState<float>& grads, OptimizerState& opt, double lr,
               const FreezeMask& freeze, const AdamOptions& adam) {
  auto params = tensors(state);
  auto gs = tensors(const_cast<ModelState<float>&>(grads));
  auto ms = tensors(opt.m);
  auto vs = tensors(opt.v);
  if (gs.size() != params.size() || ms.size() != params.size())
    throw InvalidArgument("adam_step: gradient and parameter layouts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (freeze.frozen(params[i].group)) continue;
    if (gs[i].tensor->rows() != params[i].tensor->rows() || gs[i].tensor->cols() != params[i].tensor->cols())
      throw InvalidArgument("adam_step: shape mismatch for " + params[i].name);
    if (!gs[i].tensor->allFinite())
      throw NumericError("non-finite gradient in parameter group '" +
                         std::string(param_group_name(params[i].group)) + "' (tensor " + params[i].name + ")");
  }
  std::array<bool, kNumParamGroups> touched{};
  for (const auto& p : params) touched[static_cast<std::size_t>(p.group)] = freeze.trainable(p.group);
  for (std::size_t g = 0; g < kNumParamGroups; ++g)
    if (touched[g]) ++opt.steps[g];

  const auto b1 = static_cast<float>(adam.beta1);
  const auto b2 = static_cast<float>(adam.beta2);
  const auto c1 = static_cast<float>(1.0 - adam.beta1);
  const auto c2 = static_cast<float>(1.0 - adam.beta2);
  const auto eps = static_cast<float>(adam.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto group = params[i].group;
    if (freeze.frozen(group)) continue;
    const auto t = static_cast<double>(opt.steps[static_cast<std::size_t>(group)]);
    const auto bc1 = static_cast<float>(1.0 - std::pow(adam.beta1, t));
    const auto bc2 = static_cast<float>(1.0 - std::pow(adam.beta2, t));
    auto p = params[i].tensor->array();
    auto m = ms[i].tensor->array();
    auto v = vs[i].tensor->array();
    const auto g = gs[i].tensor->array();
    m = b1 * m + c1 * g;
    v = b2 * v + c2 * g * g;
    p -= static_cast<float>(lr) * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

double clip_gradients(ModelState<float>& grads, const FreezeMask& freeze, double max_norm) {
  double sq = 0.0;
  auto gs = tensors(grads);
  for (const auto& t : gs)
    if (freeze.trainable(t.group)) sq += t.tensor->cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto& t : gs)
      if (freeze.trainable(t.group)) *t.tensor *= s;
  }
  return norm;
}

std::array<double, kNumParamGroups> group_checksums(const ModelState<float>& state) {
  std::array<double, kNumParamGroups> out{};
  for (const auto& t : tensors(const_cast<ModelState<float>&>(state)))
    out[static_cast<std::size_t>(t.group)] += t.tensor->cast<double>().sum();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void zero(ModelState<float>& s) {
  for (auto& t : tensors(s)) t.tensor->setZero();
}

bool english_reachable(const FreezeMask& f) {
  return f.trainable(ParamGroup::kEmbEn) || f.trainable(ParamGroup::kBiasEn) ||
         f.trainable(ParamGroup::kPositions) || f.trainable(ParamGroup::kEncoder);
}

class MetricsSink {
 public:
  explicit MetricsSink(const std::string& path) {
    if (path.empty()) return;
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError(path, "cannot open metrics file");
    out_ << metrics_csv_header() << '\n';
  }
  void write(const MetricsRow& row) {
    if (out_.is_open()) out_ << metrics_csv_row(row) << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

std::string checkpoint_path(const std::string& dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step-%06zu", step);
  return (std::filesystem::path(dir) / name).string();
}

void check_state(const ModelState<float>& state, std::size_t step) {
  if (!all_finite(state)) throw NumericError("non-finite parameters after update " + std::to_string(step));
}

void check_lengths(const std::vector<Sequence>& seqs, const TrainingConfig& cfg, const ModelConfig& model) {
  if (cfg.seq_len > model.max_len)
    throw InvalidArgument("seq_len " + std::to_string(cfg.seq_len) + " exceeds the model's max_len " +
                          std::to_string(model.max_len));
  if (seqs.empty()) throw InvalidArgument("training corpus is empty");
}

template <typename StepFn>
RunResult train_loop(const TrainingConfig& cfg, ModelState<float> state, const RunOptions& options, StepFn&& fn) {
  RunResult result;
  MetricsSink sink(options.metrics_path);
  OptimizerState opt = OptimizerState::for_model(state);
  ModelState<float> grads = zeros_like(state);
  result.metrics.reserve(cfg.total_updates);
  for (std::size_t step = 1; step <= cfg.total_updates; ++step) {
    zero(grads);
    MetricsRow row;
    row.step = step;
    row.lr = lr_schedule(step, cfg);
    const FreezeMask freeze = fn(step, state, grads, row);
    if (cfg.clip_norm > 0.0) clip_gradients(grads, freeze, cfg.clip_norm);
    adam_step(state, grads, opt, row.lr, freeze);
    check_state(state, step);
    sink.write(row);
    result.metrics.push_back(row);
    if (!options.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save_checkpoint(state, checkpoint_path(options.checkpoint_dir, step), step, cfg.seed);
    if (options.after_step) options.after_step(row, state);
  }
  if (!options.checkpoint_dir.empty())
    save_checkpoint(state, (std::filesystem::path(options.checkpoint_dir) / "final").string(), cfg.total_updates,
                    cfg.seed);
  result.state = std::move(state);
  return result;
}

}  // namespace

RunResult pretrain(const TrainingConfig& cfg, ModelState<float> init, const std::vector<Sequence>& english,
                   const RunOptions& options) {
  cfg.validate();
  check_lengths(english, cfg, init.config);
  SequenceStream stream(english, derive_seed(cfg.seed, 0x656e));
  const auto masking = training_masking(cfg);
  const FreezeMask freeze = FreezeMask().freeze(ParamGroup::kEmbFg).freeze(ParamGroup::kBiasFg);
  const std::size_t vocab = init.vocab_size(Language::kEnglish);
  return train_loop(cfg, std::move(init), options,
                    [&](std::size_t step, const ModelState<float>& state, ModelState<float>& grads, MetricsRow& row) {
                      const auto rows = draw(stream, cfg.batch_size, cfg.seq_len);
                      const auto batch =
                          make_masked_batch(rows, Language::kEnglish, vocab, masking, derive_seed(cfg.seed, step, 0));
                      row.loss_en = accumulate_gradients(state, batch, freeze, grads, 1.0f, cfg.threads);
                      return freeze;
                    });
}

ModelState<float> attach_foreign(const ModelState<float>& pretrained, const EmbeddingMatrix& init_emb,
                                 const std::optional<Eigen::VectorXd>& fg_bias) {
  if (init_emb.dim() != pretrained.config.dim)
    throw InvalidArgument("foreign embeddings have dimension " + std::to_string(init_emb.dim()) +
                          ", the pretrained model has " + std::to_string(pretrained.config.dim));
  if (fg_bias && static_cast<std::size_t>(fg_bias->size()) != init_emb.rows())
    throw InvalidArgument("foreign bias has " + std::to_string(fg_bias->size()) + " entries for " +
                          std::to_string(init_emb.rows()) + " foreign tokens");
  ModelState<float> s = pretrained;
  s.emb_fg = init_emb.data().cast<float>();
  if (fg_bias)
    s.bias_fg = fg_bias->transpose().cast<float>();
  else
    s.bias_fg = Mat<float>::Zero(1, s.emb_fg.rows());
  if (!all_finite(s)) throw NumericError("initial model holds non-finite values");
  return s;
}

RunResult run_transfer(const TrainingConfig& cfg, ModelState<float> start, const std::vector<Sequence>& english,
                       const std::vector<Sequence>& foreign, const RunOptions& options) {
  cfg.validate();
  check_lengths(english, cfg, start.config);
  check_lengths(foreign, cfg, start.config);
  if (start.emb_fg.rows() <= static_cast<Eigen::Index>(Vocabulary::kNumSpecials) ||
      start.emb_fg.cols() != static_cast<Eigen::Index>(start.config.dim) ||
      start.bias_fg.cols() != start.emb_fg.rows())
    throw InvalidArgument("model has no usable foreign embedding table");
  SequenceStream en(english, derive_seed(cfg.seed, 0x656e));
  SequenceStream fg(foreign, derive_seed(cfg.seed, 0x6667));
  const std::size_t ven = start.vocab_size(Language::kEnglish);
  const std::size_t vfg = start.vocab_size(Language::kForeign);
  return train_loop(cfg, std::move(start), options,
                    [&](std::size_t step, const ModelState<float>& state, ModelState<float>& grads, MetricsRow& row) {
                      const FreezeMask freeze =
                          step <= cfg.freeze_phase_updates ? FreezeMask::all_but_foreign() : FreezeMask::none();
                      const auto batch = balanced_batch(en, fg, cfg, ven, vfg, step);
                      if (english_reachable(freeze))
                        row.loss_en = accumulate_gradients(state, batch.en, freeze, grads, 0.5f, cfg.threads);
                      else
                        row.loss_en = mlm_loss(state, batch.en).loss;
                      row.loss_fg = accumulate_gradients(state, batch.fg, freeze, grads, 0.5f, cfg.threads);
                      return freeze;
                    });
}

EvalResult evaluate_mlm(const ModelState<float>& state, const std::vector<Sequence>& sequences, Language language,
                        const EvalOptions& options) {
  if (sequences.empty()) throw InvalidArgument("evaluate_mlm: empty corpus");
  if (options.batch_size < 1) throw InvalidArgument("evaluate_mlm: batch_size must be >= 1");
  MaskingOptions masking;
  masking.mask_prob = options.mask_prob;
  masking.replacements = false;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  EvalResult result;
  const std::size_t vocab = state.vocab_size(language);
  for (std::size_t b = 0, index = 0; b < sequences.size(); b += options.batch_size, ++index) {
    const std::size_t e = std::min(sequences.size(), b + options.batch_size);
    const std::span<const Sequence> rows(sequences.data() + b, e - b);
    const auto batch = make_masked_batch(rows, language, vocab, masking, derive_seed(options.seed, index));
    const auto r = mlm_loss(state, batch);
    loss_sum += r.loss * static_cast<double>(r.count);
    correct += r.correct;
    result.masked += r.count;
  }
  result.loss = loss_sum / static_cast<double>(result.masked);
  result.accuracy = static_cast<double>(correct) / static_cast<double>(result.masked);
  return result;
}

std::string metrics_csv_header() { return "step,lr,loss_en,loss_fg"; }

std::string metrics_csv_row(const MetricsRow& row) {
  std::string s = std::to_string(row.step) + "," + format_double(row.lr) + ",";
  if (row.loss_en) s += format_double(*row.loss_en);
  s += ",";
  if (row.loss_fg) s += format_double(*row.loss_fg);
  return s;
}

}  // namespace lmt
