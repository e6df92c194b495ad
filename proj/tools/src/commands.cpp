#include "lmt/cli/commands.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>

#include "lmt/checkpoint.hpp"
#include "lmt/embeddings.hpp"
#include "lmt/error.hpp"
#include "lmt/initializer.hpp"
#include "lmt/word_alignment.hpp"

namespace fs = std::filesystem;

namespace lmt::cli {

namespace {

bool g_logging = true;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

void require_path(const std::string& path, const std::string& flag) {
  require(!path.empty(), "missing required " + flag);
}

void ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// Text layout for *.vec and *.txt, binary otherwise.
void save_vectors_auto(const EmbeddingMatrix& emb, const std::string& path) {
  ensure_parent(path);
  const auto ext = fs::path(path).extension().string();
  save_vectors(emb, path, ext == ".vec" || ext == ".txt" ? VectorFormat::kText : VectorFormat::kBinary);
}

std::vector<std::string> read_all_lines(const std::vector<std::string>& paths) {
  std::vector<std::string> lines;
  for (const auto& p : paths) {
    auto l = read_lines(p);
    lines.insert(lines.end(), std::make_move_iterator(l.begin()), std::make_move_iterator(l.end()));
  }
  return lines;
}

std::optional<BpeCodes> load_codes(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return BpeCodes::load(path);
}

// Model vocabulary rows looked up in a vector file; support 1 when found.
SubwordVectorTable lookup_table(const EmbeddingMatrix& vectors, const Vocabulary& vocab) {
  RowMatrixD data = RowMatrixD::Zero(static_cast<Eigen::Index>(vocab.size()),
                                     static_cast<Eigen::Index>(vectors.dim()));
  std::vector<std::size_t> support(vocab.size(), 0);
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    if (vocab.is_special(id)) continue;
    if (const auto j = vectors.vocab().find(vocab.token(id))) {
      data.row(static_cast<Eigen::Index>(i)) = vectors.row(*j);
      support[i] = 1;
    }
  }
  return {EmbeddingMatrix(vocab, std::move(data)), std::move(support)};
}

Json matrix_summary(const TranslationMatrix& tm) {
  const auto r = row_entropy_report(tm);
  return Json{{"rows", r.rows},
              {"covered", r.covered},
              {"mean_nonzeros", r.mean_nonzeros},
              {"max_nonzeros", r.max_nonzeros},
              {"mean_entropy", r.mean_entropy},
              {"nonzero_histogram", r.histogram}};
}

Json losses(const std::vector<MetricsRow>& rows) {
  Json j = Json::object();
  if (rows.empty()) return j;
  const auto& last = rows.back();
  j["step"] = last.step;
  j["lr"] = last.lr;
  if (last.loss_en) j["loss_en"] = *last.loss_en;
  if (last.loss_fg) j["loss_fg"] = *last.loss_fg;
  return j;
}

ModelState<float> load_state(const std::string& path) { return load_checkpoint(path).state; }

Eigen::VectorXd load_bias(const std::string& path) {
  const RowMatrixF t = load_tensor(path);
  if (t.rows() != 1) throw FormatError(path, 0, "bias tensor must have one row");
  return t.row(0).cast<double>().transpose();
}

ModelState<float> with_foreign(const ModelState<float>& base, const std::string& init, const std::string& bias,
                               const Vocabulary& fg_vocab) {
  const EmbeddingMatrix emb = load_vectors_any(init);
  if (!(emb.vocab() == fg_vocab))
    throw InvalidArgument(init + ": embedding vocabulary differs from the foreign vocabulary");
  std::optional<Eigen::VectorXd> b;
  if (!bias.empty()) b = load_bias(bias);
  return attach_foreign(base, emb, b);
}

std::string default_metrics(const std::string& metrics, const std::string& dir) {
  return metrics.empty() ? (fs::path(dir) / "metrics.csv").string() : metrics;
}

}  // namespace

void log(const std::string& message) {
  if (g_logging) std::cerr << "[lmt] " << message << '\n';
}

void set_logging(bool enabled) { g_logging = enabled; }

FlatConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  FlatConfig cfg = path.empty() ? FlatConfig{} : FlatConfig::load(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("override must be key=value: " + o);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    cfg.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  return cfg;
}

ModelConfig model_config_from(const FlatConfig& cfg, const std::string& prefix, const ModelConfig& d) {
  ModelConfig m;
  m.dim = cfg.get_size(prefix + "dim", d.dim);
  m.layers = cfg.get_size(prefix + "layers", d.layers);
  m.heads = cfg.get_size(prefix + "heads", d.heads);
  m.ffn = cfg.get_size(prefix + "ffn", d.ffn);
  m.max_len = cfg.get_size(prefix + "max_len", d.max_len);
  m.ln_eps = cfg.get_double(prefix + "ln_eps", d.ln_eps);
  const std::string norm = cfg.get(prefix + "norm", d.norm == NormStyle::kPreNorm ? "pre" : "post");
  if (norm == "pre")
    m.norm = NormStyle::kPreNorm;
  else if (norm == "post")
    m.norm = NormStyle::kPostNorm;
  else
    throw InvalidArgument(prefix + "norm must be pre or post, got " + norm);
  m.validate();
  return m;
}

Tokenizer load_tokenizer(const std::string& vocab, const std::string& codes) {
  require_path(vocab, "vocabulary");
  return Tokenizer(Vocabulary::load(vocab), load_codes(codes));
}

std::vector<Sequence> load_sequences(const CorpusSide& side, std::size_t seq_len) {
  require_path(side.text, "corpus");
  const Tokenizer tok = load_tokenizer(side.vocab, side.codes);
  const auto seqs = encode_and_pack(read_lines(side.text), tok, seq_len);
  if (seqs.empty()) throw InvalidArgument(side.text + ": corpus has no sequences");
  return seqs;
}

// ---------------------------------------------------------------------------

Json cmd_bpe(const BpeArgs& a) {
  require(!a.inputs.empty(), "missing --input");
  require_path(a.output, "--output");
  const auto lines = read_all_lines(a.inputs);
  const auto r = learn_bpe(lines, a.merges);
  ensure_parent(a.output);
  r.codes.save(a.output);
  if (r.exhausted) log("bpe: corpus exhausted after " + std::to_string(r.codes.size()) + " merges");
  return Json{{"merges", r.codes.size()}, {"requested", r.requested}, {"exhausted", r.exhausted},
              {"output", a.output}};
}

Json cmd_vocab(const VocabArgs& a) {
  require(!a.inputs.empty(), "missing --input");
  require_path(a.output, "--output");
  const auto tokens = segment_corpus(read_all_lines(a.inputs), load_codes(a.codes));
  const Vocabulary v = build_vocab(tokens, a.max_size);
  ensure_parent(a.output);
  v.save(a.output);
  return Json{{"size", v.size()}, {"tokens_seen", tokens.size()}, {"output", a.output}};
}

Json cmd_align_vectors(const AlignVectorsArgs& a) {
  require_path(a.foreign, "--foreign");
  require_path(a.english, "--english");
  require_path(a.output, "--output");
  const EmbeddingMatrix fg = load_vectors_any(a.foreign, a.limit);
  const EmbeddingMatrix en = load_vectors_any(a.english, a.limit);
  if (fg.dim() != en.dim())
    throw InvalidArgument("vector dimensions differ: " + std::to_string(fg.dim()) + " vs " +
                          std::to_string(en.dim()));
  const Dictionary dict = a.dictionary.empty() ? identical_word_dictionary(fg.vocab(), en.vocab())
                                               : load_dictionary(a.dictionary, fg.vocab(), en.vocab());
  const auto map = procrustes(fg, en, dict, {a.normalize});
  if (map.underdetermined) log("align-vectors: fewer dictionary pairs than dimensions");
  const EmbeddingMatrix aligned = align(a.normalize ? normalize_rows(fg) : fg, map.matrix);
  save_vectors_auto(aligned, a.output);
  if (!a.matrix_output.empty()) {
    ensure_parent(a.matrix_output);
    save_tensor(map.matrix.cast<float>(), a.matrix_output);
  }
  return Json{{"pairs", dict.size()},
              {"residual", map.residual},
              {"rank", map.rank},
              {"underdetermined", map.underdetermined},
              {"orthogonality_error", orthogonality_error(map.matrix)},
              {"output", a.output}};
}

Json cmd_ibm1(const Ibm1Args& a) {
  require_path(a.output, "--output");
  const Tokenizer fg = load_tokenizer(a.foreign.vocab, a.foreign.codes);
  const Tokenizer en = load_tokenizer(a.english.vocab, a.english.codes);
  require_path(a.foreign.text, "--foreign");
  require_path(a.english.text, "--english");
  ParallelCorpus corpus = read_parallel(a.foreign.text, a.english.text, fg, en);
  if (a.subsample > 0 && a.subsample < corpus.size()) corpus = subsample(corpus, a.subsample, a.seed);
  const auto model = train_ibm1(corpus, {a.iterations, a.prune});
  const auto tm = translation_matrix_from_alignment(model, fg.vocab(), en.vocab());
  ensure_parent(a.output);
  tm.save(a.output, fg.vocab(), en.vocab());
  if (!a.table.empty()) {
    ensure_parent(a.table);
    model.save(a.table, fg.vocab(), en.vocab());
  }
  Json j{{"pairs", corpus.size()},
         {"dropped", corpus.dropped},
         {"iterations", model.iterations_run},
         {"log_likelihoods", model.log_likelihoods},
         {"final_log_likelihood", model.final_log_likelihood}};
  j["matrix"] = matrix_summary(tm);
  j["output"] = a.output;
  return j;
}

Json cmd_parse_fastalign(const FastAlignArgs& a) {
  require_path(a.output, "--output");
  require_path(a.alignments, "--alignments");
  const Tokenizer fg = load_tokenizer(a.foreign.vocab, a.foreign.codes);
  const Tokenizer en = load_tokenizer(a.english.vocab, a.english.codes);
  require_path(a.foreign.text, "--foreign");
  require_path(a.english.text, "--english");
  const ParallelCorpus corpus = read_parallel(a.foreign.text, a.english.text, fg, en);
  const auto model = parse_fastalign(a.alignments, corpus);
  const auto tm = translation_matrix_from_alignment(model, fg.vocab(), en.vocab());
  ensure_parent(a.output);
  tm.save(a.output, fg.vocab(), en.vocab());
  if (!a.table.empty()) {
    ensure_parent(a.table);
    model.save(a.table, fg.vocab(), en.vocab());
  }
  Json j{{"pairs", corpus.size()}, {"dropped", corpus.dropped}};
  j["matrix"] = matrix_summary(tm);
  j["output"] = a.output;
  return j;
}

Json cmd_subword_vectors(const SubwordVectorsArgs& a) {
  require_path(a.vectors, "--vectors");
  require_path(a.corpus, "--corpus");
  require_path(a.output, "--output");
  const EmbeddingMatrix words = load_vectors_any(a.vectors, a.limit);
  const Vocabulary vocab = Vocabulary::load(a.vocab);
  const BpeCodes codes = a.codes.empty() ? BpeCodes{} : BpeCodes::load(a.codes);
  const auto tokens = segment_corpus(read_lines(a.corpus), std::nullopt);
  const UnigramTable unigrams = unigram_probs(tokens, words.vocab());
  const SubwordVectorTable table = subword_vectors(words, unigrams, vocab, codes);

  std::vector<std::string> kept;
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < table.support.size(); ++i)
    if (table.support[i] > 0) {
      kept.push_back(vocab.token(static_cast<TokenId>(i)));
      rows.push_back(static_cast<Eigen::Index>(i));
    }
  RowMatrixD data(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(words.dim()));
  for (std::size_t k = 0; k < rows.size(); ++k) data.row(static_cast<Eigen::Index>(k)) = table.emb.data().row(rows[k]);
  save_vectors_auto(EmbeddingMatrix(Vocabulary::plain(std::move(kept)), std::move(data)), a.output);
  return Json{{"vocab", vocab.size()}, {"with_vector", rows.size()}, {"words", words.rows()}, {"output", a.output}};
}

Json cmd_translation_matrix(const TranslationMatrixArgs& a) {
  require_path(a.output, "--output");
  require_path(a.fg_vocab, "--fg-vocab");
  require_path(a.en_vocab, "--en-vocab");
  const Vocabulary fg = Vocabulary::load(a.fg_vocab);
  const Vocabulary en = Vocabulary::load(a.en_vocab);
  TranslationMatrix tm;
  std::string source;
  if (!a.dictionary.empty()) {
    const Dictionary dict = load_dictionary(a.dictionary, fg, en);
    tm = translation_matrix_from_dictionary(dict, fg.size(), en.size());
    source = "dictionary";
  } else {
    require_path(a.fg_vectors, "--fg-vectors or --dictionary");
    require_path(a.en_vectors, "--en-vectors");
    TranslationOptions opt;
    if (a.projection == "sparsemax")
      opt.projection = Projection::kSparsemax;
    else if (a.projection == "softmax")
      opt.projection = Projection::kSoftmax;
    else
      throw InvalidArgument("projection must be sparsemax or softmax, got " + a.projection);
    opt.threads = a.threads;
    const auto fg_table = lookup_table(load_vectors_any(a.fg_vectors), fg);
    const auto en_table = lookup_table(load_vectors_any(a.en_vectors), en);
    if (fg_table.emb.dim() != en_table.emb.dim()) throw InvalidArgument("vector dimensions differ");
    tm = translation_matrix_from_subwords(fg_table, en_table, opt);
    source = a.projection;
  }
  ensure_parent(a.output);
  tm.save(a.output, fg, en);
  Json j{{"source", source}};
  j["matrix"] = matrix_summary(tm);
  j["output"] = a.output;
  return j;
}

Json cmd_init_embeddings(const InitEmbeddingsArgs& a) {
  require_path(a.checkpoint, "--checkpoint");
  require_path(a.output, "--output");
  const Vocabulary fg = Vocabulary::load(a.fg_vocab);
  const ModelState<float> base = load_state(a.checkpoint);
  const std::size_t d = base.config.dim;

  EmbeddingMatrix emb;
  Eigen::VectorXd bias;
  Json j;
  if (a.random) {
    emb = random_init(fg, d, a.seed);
    bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fg.size()));
    j["method"] = "random";
  } else {
    require_path(a.matrix, "--matrix");
    const Vocabulary en = Vocabulary::load(a.en_vocab);
    if (en.size() != base.vocab_size(Language::kEnglish))
      throw InvalidArgument("English vocabulary has " + std::to_string(en.size()) + " tokens, checkpoint has " +
                            std::to_string(base.vocab_size(Language::kEnglish)));
    const TranslationMatrix tm = TranslationMatrix::load(a.matrix, fg, en);
    const EmbeddingMatrix src(en, base.emb_en.cast<double>());
    auto [e, report] = init_foreign_embeddings(tm, src, fg, a.seed);
    emb = std::move(e);
    bias = init_foreign_bias(tm, base.bias_en.row(0).cast<double>().transpose(), fg);
    j["method"] = "matrix";
    j["report"] = Json::parse(init_report_json(report));
    log(init_report(report));
  }
  ensure_parent(a.output);
  save_vectors(emb, a.output, VectorFormat::kBinary);
  if (!a.bias_output.empty()) {
    ensure_parent(a.bias_output);
    save_tensor(bias.transpose().cast<float>(), a.bias_output);
  }
  j["rows"] = emb.rows();
  j["dim"] = emb.dim();
  j["output"] = a.output;
  return j;
}

Json cmd_pretrain(const PretrainArgs& a) {
  require_path(a.output_dir, "--output");
  const FlatConfig cfg = load_config(a.config, a.set);
  const ModelConfig mc = model_config_from(cfg, "model.");
  TrainingConfig defaults;
  defaults.freeze_phase_updates = 0;  // no foreign table to train alone
  const TrainingConfig tc = TrainingConfig::from_config(cfg, "train.", defaults);
  for (const auto& k : cfg.unused()) log("pretrain: unused config key " + k);
  if (tc.seq_len > mc.max_len) throw InvalidArgument("train.seq_len exceeds model.max_len");

  const auto seqs = load_sequences(a.english, tc.seq_len);
  const std::size_t vocab = Vocabulary::load(a.english.vocab).size();
  fs::create_directories(a.output_dir);
  RunOptions opt;
  opt.metrics_path = default_metrics(a.metrics, a.output_dir);
  opt.checkpoint_dir = a.output_dir;
  const auto t0 = std::chrono::steady_clock::now();
  log("pretrain: " + std::to_string(seqs.size()) + " sequences, " + std::to_string(tc.total_updates) + " updates");
  const RunResult r = pretrain(tc, init_model(mc, vocab, 0, tc.seed), seqs, opt);
  Json j{{"updates", tc.total_updates}, {"sequences", seqs.size()}, {"seconds", seconds_since(t0)}};
  j["final"] = losses(r.metrics);
  j["checkpoint"] = (fs::path(a.output_dir) / "final").string();
  j["metrics"] = opt.metrics_path;
  return j;
}

Json cmd_transfer(const TransferArgs& a) {
  require_path(a.output_dir, "--output");
  require_path(a.checkpoint, "--checkpoint");
  require_path(a.init, "--init");
  const FlatConfig cfg = load_config(a.config, a.set);
  const TrainingConfig tc = TrainingConfig::from_config(cfg, "train.");
  for (const auto& k : cfg.unused()) log("transfer: unused config key " + k);

  const ModelState<float> base = load_state(a.checkpoint);
  if (tc.seq_len > base.config.max_len) throw InvalidArgument("train.seq_len exceeds the model max_len");
  const Vocabulary fg_vocab = Vocabulary::load(a.foreign.vocab);
  if (Vocabulary::load(a.english.vocab).size() != base.vocab_size(Language::kEnglish))
    throw InvalidArgument("English vocabulary size differs from the checkpoint");
  ModelState<float> start = with_foreign(base, a.init, a.init_bias, fg_vocab);
  const auto en = load_sequences(a.english, tc.seq_len);
  const auto fg = load_sequences(a.foreign, tc.seq_len);

  fs::create_directories(a.output_dir);
  RunOptions opt;
  opt.metrics_path = default_metrics(a.metrics, a.output_dir);
  opt.checkpoint_dir = a.output_dir;
  const auto t0 = std::chrono::steady_clock::now();
  log("transfer: " + std::to_string(en.size()) + " English / " + std::to_string(fg.size()) +
      " foreign sequences, " + std::to_string(tc.total_updates) + " updates");
  const RunResult r = run_transfer(tc, std::move(start), en, fg, opt);
  Json j{{"updates", tc.total_updates},
         {"freeze_phase_updates", tc.freeze_phase_updates},
         {"seconds", seconds_since(t0)}};
  j["final"] = losses(r.metrics);
  j["checkpoint"] = (fs::path(a.output_dir) / "final").string();
  j["metrics"] = opt.metrics_path;
  return j;
}

Json cmd_eval(const EvalArgs& a) {
  require_path(a.checkpoint, "--checkpoint");
  Language lang;
  if (a.language == "en")
    lang = Language::kEnglish;
  else if (a.language == "fg")
    lang = Language::kForeign;
  else
    throw InvalidArgument("language must be en or fg, got " + a.language);
  ModelState<float> state = load_state(a.checkpoint);
  if (!a.init.empty()) {
    require(lang == Language::kForeign, "--init applies to foreign evaluation only");
    state = with_foreign(state, a.init, a.init_bias, Vocabulary::load(a.corpus.vocab));
  }
  const std::size_t seq_len = a.seq_len == 0 ? state.config.max_len : a.seq_len;
  if (seq_len > state.config.max_len) throw InvalidArgument("seq_len exceeds the model max_len");
  const auto seqs = load_sequences(a.corpus, seq_len);
  if (Vocabulary::load(a.corpus.vocab).size() != state.vocab_size(lang))
    throw InvalidArgument("vocabulary size differs from the checkpoint table");
  const EvalResult r = evaluate_mlm(state, seqs, lang, a.options);
  return Json{{"language", a.language}, {"loss", r.loss}, {"accuracy", r.accuracy}, {"masked", r.masked},
              {"sequences", seqs.size()}};
}

Json cmd_cipher_fixture(const CipherFixtureArgs& a) {
  require_path(a.output_dir, "--output");
  const CipherFixture f = make_cipher_fixture(a.options);
  write_cipher_fixture(f, a.output_dir);
  std::size_t tokens = 0;
  for (const auto& l : f.en_train) tokens += split_whitespace(l).size();
  return Json{{"vocab_size", a.options.vocab_size},
              {"sentences", f.en_train.size()},
              {"heldout", f.en_valid.size()},
              {"train_tokens", tokens},
              {"dictionary", f.dictionary.size()},
              {"noisy_dictionary", f.noisy_dictionary.size()},
              {"split_types", f.split_types},
              {"output", a.output_dir}};
}

}  // namespace lmt::cli
