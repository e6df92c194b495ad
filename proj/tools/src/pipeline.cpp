#include "lmt/cli/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "lmt/checkpoint.hpp"
#include "lmt/cli/cache.hpp"

namespace fs = std::filesystem;

namespace lmt::cli {

namespace {

std::string resolve(const FlatConfig& cfg, const std::string& key, const fs::path& base) {
  const std::string v = cfg.get(key, "");
  if (v.empty()) return v;
  const fs::path p(v);
  return (p.is_absolute() ? p : base / p).lexically_normal().string();
}

Json training_json(const TrainingConfig& c) {
  return Json{{"total_updates", c.total_updates},   {"warmup_updates", c.warmup_updates},
              {"peak_lr", c.peak_lr},               {"batch_size", c.batch_size},
              {"seq_len", c.seq_len},               {"mask_prob", c.mask_prob},
              {"freeze_phase_updates", c.freeze_phase_updates}, {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every}, {"clip_norm", c.clip_norm},
              {"threads", c.threads}};
}

// Full-precision rendering so the written config reproduces the values.
std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string config_text(const ModelConfig* m, const TrainingConfig& t) {
  std::ostringstream os;
  if (m)
    os << "[model]\n"
       << "dim = " << m->dim << "\nlayers = " << m->layers << "\nheads = " << m->heads << "\nffn = " << m->ffn
       << "\nmax_len = " << m->max_len << "\nnorm = " << (m->norm == NormStyle::kPreNorm ? "pre" : "post")
       << "\nln_eps = " << num(m->ln_eps) << "\n\n";
  os << "[train]\n"
     << "total_updates = " << t.total_updates << "\nwarmup_updates = " << t.warmup_updates
     << "\npeak_lr = " << num(t.peak_lr) << "\nbatch_size = " << t.batch_size << "\nseq_len = " << t.seq_len
     << "\nmask_prob = " << num(t.mask_prob) << "\nfreeze_phase_updates = " << t.freeze_phase_updates
     << "\nseed = " << t.seed << "\ncheckpoint_every = " << t.checkpoint_every
     << "\nclip_norm = " << num(t.clip_norm) << "\nthreads = " << t.threads << "\n";
  return os.str();
}

std::string write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw IoError(p.string(), "write failed");
  return p.string();
}

// Summaries are stored in the cache; paths inside them would point at the
// temporary build directory.
Json strip_paths(Json j) {
  for (const char* k : {"output", "checkpoint", "metrics"}) j.erase(k);
  return j;
}

void copy_into(const fs::path& from, const fs::path& to) {
  if (fs::is_directory(from)) {
    fs::remove_all(to);
    fs::create_directories(to);
    fs::copy(from, to, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  } else {
    fs::create_directories(to.parent_path());
    fs::copy_file(from, to, fs::copy_options::overwrite_existing);
  }
}

void require_file(const std::string& path, const std::string& key) {
  if (path.empty()) throw InvalidArgument("config key " + key + " is required");
  if (!fs::exists(path)) throw IoError(path, "no such file (config key " + key + ")");
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig c;
  c.pretrain.total_updates = 6000;
  c.pretrain.warmup_updates = 400;
  c.pretrain.seq_len = 32;
  c.pretrain.freeze_phase_updates = 0;
  c.transfer.seq_len = 32;
  return c;
}

PipelineConfig PipelineConfig::from(const FlatConfig& cfg, const fs::path& base) {
  PipelineConfig c = defaults();
  if (cfg.has("output_dir")) c.output_dir = resolve(cfg, "output_dir", base);
  c.threads = static_cast<unsigned>(cfg.get_size("threads", c.threads));

  auto& f = c.fixture;
  c.use_fixture = cfg.get_bool("fixture.enabled", c.use_fixture);
  f.vocab_size = cfg.get_size("fixture.vocab_size", f.vocab_size);
  f.sentences = cfg.get_size("fixture.sentences", f.sentences);
  f.heldout = cfg.get_size("fixture.heldout", f.heldout);
  f.seed = cfg.get_u64("fixture.seed", f.seed);
  f.successors = cfg.get_size("fixture.successors", f.successors);
  f.smoothing = cfg.get_double("fixture.smoothing", f.smoothing);
  f.zipf = cfg.get_double("fixture.zipf", f.zipf);
  f.min_len = cfg.get_size("fixture.min_len", f.min_len);
  f.max_len = cfg.get_size("fixture.max_len", f.max_len);
  f.dict_dropout = cfg.get_double("fixture.dict_dropout", f.dict_dropout);
  f.split_prob = cfg.get_double("fixture.split_prob", f.split_prob);

  c.en_train = resolve(cfg, "data.en_train", base);
  c.en_valid = resolve(cfg, "data.en_valid", base);
  c.fg_train = resolve(cfg, "data.fg_train", base);
  c.fg_valid = resolve(cfg, "data.fg_valid", base);
  c.dictionary = resolve(cfg, "data.dictionary", base);
  c.fg_vectors = resolve(cfg, "data.fg_vectors", base);
  c.en_vectors = resolve(cfg, "data.en_vectors", base);
  c.align_dictionary = resolve(cfg, "data.align_dictionary", base);
  c.parallel_fg = resolve(cfg, "data.parallel_fg", base);
  c.parallel_en = resolve(cfg, "data.parallel_en", base);
  c.alignments = resolve(cfg, "data.alignments", base);

  c.bpe_merges_en = cfg.get_size("vocab.bpe_merges_en", cfg.get_size("vocab.bpe_merges", c.bpe_merges_en));
  c.bpe_merges_fg = cfg.get_size("vocab.bpe_merges_fg", cfg.get_size("vocab.bpe_merges", c.bpe_merges_fg));
  c.max_size = cfg.get_size("vocab.max_size", c.max_size);

  c.model = model_config_from(cfg, "model.", c.model);
  c.pretrain.threads = c.transfer.threads = c.threads;
  c.pretrain = TrainingConfig::from_config(cfg, "pretrain.", c.pretrain);
  c.transfer = TrainingConfig::from_config(cfg, "transfer.", c.transfer);

  c.method = cfg.get("init.method", c.method);
  c.init_seed = cfg.get_u64("init.seed", c.init_seed);
  c.projection = cfg.get("init.projection", c.projection);
  c.normalize = cfg.get_bool("init.normalize", c.normalize);
  if (cfg.has("init.vector_limit")) c.vector_limit = cfg.get_size("init.vector_limit", 0);
  c.ibm1_iterations = cfg.get_size("init.ibm1_iterations", c.ibm1_iterations);
  c.ibm1_prune = cfg.get_double("init.ibm1_prune", c.ibm1_prune);
  c.ibm1_subsample = cfg.get_size("init.ibm1_subsample", c.ibm1_subsample);

  c.eval.batch_size = cfg.get_size("eval.batch_size", c.eval.batch_size);
  c.eval.mask_prob = cfg.get_double("eval.mask_prob", c.eval.mask_prob);
  c.eval.seed = cfg.get_u64("eval.seed", c.eval.seed);
  c.retention_tolerance = cfg.get_double("check.retention_tolerance", c.retention_tolerance);

  for (const auto& k : cfg.unused()) log("run-all: unused config key " + k);
  return c;
}

void PipelineConfig::validate() const {
  model.validate();
  pretrain.validate();
  transfer.validate();
  if (pretrain.seq_len > model.max_len || transfer.seq_len > model.max_len)
    throw InvalidArgument("seq_len exceeds model.max_len");
  if (use_fixture) {
    fixture.validate();
  } else {
    require_file(en_train, "data.en_train");
    require_file(en_valid, "data.en_valid");
    require_file(fg_train, "data.fg_train");
    require_file(fg_valid, "data.fg_valid");
  }
  if (method == "dictionary") {
    if (!use_fixture) require_file(dictionary, "data.dictionary");
  } else if (method == "vectors") {
    require_file(fg_vectors, "data.fg_vectors");
    require_file(en_vectors, "data.en_vectors");
    if (!align_dictionary.empty()) require_file(align_dictionary, "data.align_dictionary");
    if (projection != "sparsemax" && projection != "softmax")
      throw InvalidArgument("init.projection must be sparsemax or softmax");
  } else if (method == "ibm1" || method == "fastalign") {
    if (!use_fixture) {
      require_file(parallel_fg, "data.parallel_fg");
      require_file(parallel_en, "data.parallel_en");
    }
    if (method == "fastalign") require_file(alignments, "data.alignments");
  } else if (method != "random") {
    throw InvalidArgument("init.method must be dictionary, vectors, ibm1, fastalign or random; got " + method);
  }
  if (eval.batch_size == 0) throw InvalidArgument("eval.batch_size must be positive");
  if (!(eval.mask_prob > 0.0 && eval.mask_prob <= 1.0)) throw InvalidArgument("eval.mask_prob must be in (0, 1]");
  if (!(retention_tolerance >= 0.0)) throw InvalidArgument("check.retention_tolerance must be >= 0");
}

Json run_pipeline(const PipelineConfig& pc, const fs::path& cache_root) {
  pc.validate();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(pc.output_dir);
  StageCache cache(cache_root);
  Json stages = Json::array();

  auto stage = [&](const std::string& name, const Json& params, const std::vector<fs::path>& inputs,
                   const StageCache::Body& body) {
    StageCache::Result r;
    try {
      r = cache.run(name, params, inputs, [&](const fs::path& out) { return strip_paths(body(out)); });
    } catch (const Error& e) {
      throw StageError(name, e);
    }
    char took[32];
    std::snprintf(took, sizeof took, ": done in %.1f s", r.seconds);
    log("stage " + name + (r.hit ? std::string(": cache hit") : std::string(took)));
    stages.push_back(Json{{"name", name}, {"cache", r.hit ? "hit" : "miss"}, {"seconds", r.seconds},
                          {"key", r.key.substr(0, 16)}});
    return r;
  };

  // Corpora --------------------------------------------------------------
  std::string en_train = pc.en_train, en_valid = pc.en_valid, fg_train = pc.fg_train, fg_valid = pc.fg_valid;
  std::string dictionary = pc.dictionary, par_fg = pc.parallel_fg, par_en = pc.parallel_en;
  if (pc.use_fixture) {
    const auto& f = pc.fixture;
    const Json params{{"vocab_size", f.vocab_size}, {"sentences", f.sentences}, {"heldout", f.heldout},
                      {"seed", f.seed},             {"successors", f.successors}, {"smoothing", f.smoothing},
                      {"zipf", f.zipf},             {"min_len", f.min_len},       {"max_len", f.max_len},
                      {"dict_dropout", f.dict_dropout}, {"split_prob", f.split_prob}};
    const auto r = stage("fixture", params, {}, [&](const fs::path& out) {
      return cmd_cipher_fixture({f, out.string()});
    });
    const bool split = f.split_prob > 0.0;
    en_train = (r.dir / "en.train.txt").string();
    en_valid = (r.dir / "en.valid.txt").string();
    fg_train = (r.dir / (split ? "fg.split.train.txt" : "fg.train.txt")).string();
    fg_valid = (r.dir / (split ? "fg.split.valid.txt" : "fg.valid.txt")).string();
    if (dictionary.empty()) dictionary = (r.dir / "dictionary.noisy.tsv").string();
    if (par_fg.empty()) par_fg = fg_train;
    if (par_en.empty()) par_en = en_train;
  }

  // Vocabularies ---------------------------------------------------------
  auto side = [&](const std::string& lang, const std::string& train, std::size_t merges) {
    CorpusSide s{train, "", ""};
    std::vector<fs::path> inputs{train};
    if (merges > 0) {
      const auto r = stage("bpe-" + lang, Json{{"merges", merges}}, {train}, [&](const fs::path& out) {
        return cmd_bpe({{train}, merges, (out / "codes.txt").string()});
      });
      s.codes = (r.dir / "codes.txt").string();
      inputs.emplace_back(s.codes);
    }
    const auto r = stage("vocab-" + lang, Json{{"max_size", pc.max_size}}, inputs, [&](const fs::path& out) {
      return cmd_vocab({{train}, s.codes, pc.max_size, (out / "vocab.txt").string()});
    });
    s.vocab = (r.dir / "vocab.txt").string();
    return s;
  };
  const CorpusSide en = side("en", en_train, pc.bpe_merges_en);
  const CorpusSide fg = side("fg", fg_train, pc.bpe_merges_fg);
  auto side_inputs = [](const CorpusSide& s) {
    std::vector<fs::path> v{s.text, s.vocab};
    if (!s.codes.empty()) v.emplace_back(s.codes);
    return v;
  };
  auto concat = [](std::vector<fs::path> a, const std::vector<fs::path>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };

  // Step 1: English model --------------------------------------------------
  const auto pre = stage("pretrain", Json{{"model", Json::parse(model_config_json(pc.model))},
                                          {"train", training_json(pc.pretrain)}},
                         side_inputs(en), [&](const fs::path& out) {
                           PretrainArgs a;
                           a.config = write_text(out / "pretrain.cfg", config_text(&pc.model, pc.pretrain));
                           a.english = en;
                           a.output_dir = out.string();
                           return cmd_pretrain(a);
                         });
  const fs::path pre_ckpt = pre.dir / "final";

  // Translation matrix -----------------------------------------------------
  std::optional<fs::path> matrix;
  const std::vector<fs::path> vocabs{fg.vocab, en.vocab};
  if (pc.method == "dictionary") {
    const auto r = stage("matrix", Json{{"method", "dictionary"}}, concat({dictionary}, vocabs),
                         [&](const fs::path& out) {
                           TranslationMatrixArgs a;
                           a.fg_vocab = fg.vocab;
                           a.en_vocab = en.vocab;
                           a.dictionary = dictionary;
                           a.output = (out / "matrix.txt").string();
                           return cmd_translation_matrix(a);
                         });
    matrix = r.dir / "matrix.txt";
  } else if (pc.method == "vectors") {
    std::vector<fs::path> align_inputs{pc.fg_vectors, pc.en_vectors};
    if (!pc.align_dictionary.empty()) align_inputs.emplace_back(pc.align_dictionary);
    const auto al = stage("align", Json{{"normalize", pc.normalize}, {"limit", pc.vector_limit.value_or(0)}},
                          align_inputs, [&](const fs::path& out) {
                            AlignVectorsArgs a;
                            a.foreign = pc.fg_vectors;
                            a.english = pc.en_vectors;
                            a.dictionary = pc.align_dictionary;
                            a.normalize = pc.normalize;
                            a.limit = pc.vector_limit;
                            a.output = (out / "aligned.bin").string();
                            a.matrix_output = (out / "map.bin").string();
                            return cmd_align_vectors(a);
                          });
    auto subwords = [&](const std::string& lang, const CorpusSide& s, const fs::path& vectors) -> fs::path {
      if (s.codes.empty()) return vectors;
      const auto r = stage("subwords-" + lang, Json{{"limit", pc.vector_limit.value_or(0)}},
                           concat({vectors}, side_inputs(s)), [&](const fs::path& out) {
                             SubwordVectorsArgs a;
                             a.vectors = vectors.string();
                             a.corpus = s.text;
                             a.vocab = s.vocab;
                             a.codes = s.codes;
                             a.limit = pc.vector_limit;
                             a.output = (out / "subwords.bin").string();
                             return cmd_subword_vectors(a);
                           });
      return r.dir / "subwords.bin";
    };
    const fs::path fg_vec = subwords("fg", fg, al.dir / "aligned.bin");
    const fs::path en_vec = subwords("en", en, pc.en_vectors);
    const auto r = stage("matrix", Json{{"method", "vectors"}, {"projection", pc.projection}},
                         concat({fg_vec, en_vec}, vocabs), [&](const fs::path& out) {
                           TranslationMatrixArgs a;
                           a.fg_vocab = fg.vocab;
                           a.en_vocab = en.vocab;
                           a.fg_vectors = fg_vec.string();
                           a.en_vectors = en_vec.string();
                           a.projection = pc.projection;
                           a.threads = pc.threads;
                           a.output = (out / "matrix.txt").string();
                           return cmd_translation_matrix(a);
                         });
    matrix = r.dir / "matrix.txt";
  } else if (pc.method == "ibm1" || pc.method == "fastalign") {
    const CorpusSide pfg{par_fg, fg.vocab, fg.codes}, pen{par_en, en.vocab, en.codes};
    auto inputs = concat(side_inputs(pfg), side_inputs(pen));
    Json params{{"method", pc.method}};
    if (pc.method == "ibm1") {
      params["iterations"] = pc.ibm1_iterations;
      params["prune"] = pc.ibm1_prune;
      params["subsample"] = pc.ibm1_subsample;
      params["seed"] = pc.init_seed;
    } else {
      inputs.emplace_back(pc.alignments);
    }
    const auto r = stage("matrix", params, inputs, [&](const fs::path& out) {
      const std::string o = (out / "matrix.txt").string();
      if (pc.method == "fastalign") return cmd_parse_fastalign({pfg, pen, pc.alignments, o, ""});
      return cmd_ibm1({pfg, pen, pc.ibm1_iterations, pc.ibm1_prune, pc.ibm1_subsample, pc.init_seed, o, ""});
    });
    matrix = r.dir / "matrix.txt";
  }

  // Foreign table ----------------------------------------------------------
  std::vector<fs::path> init_inputs{pre_ckpt, fg.vocab, en.vocab};
  if (matrix) init_inputs.push_back(*matrix);
  const auto init = stage("init", Json{{"seed", pc.init_seed}, {"random", !matrix}}, init_inputs,
                          [&](const fs::path& out) {
                            InitEmbeddingsArgs a;
                            if (matrix) a.matrix = matrix->string();
                            a.checkpoint = pre_ckpt.string();
                            a.fg_vocab = fg.vocab;
                            a.en_vocab = en.vocab;
                            a.seed = pc.init_seed;
                            a.random = !matrix;
                            a.output = (out / "fg_embeddings.bin").string();
                            a.bias_output = (out / "fg_bias.bin").string();
                            return cmd_init_embeddings(a);
                          });
  const fs::path fg_emb = init.dir / "fg_embeddings.bin", fg_bias = init.dir / "fg_bias.bin";

  // Step 2: transfer -------------------------------------------------------
  const auto tr = stage("transfer", Json{{"train", training_json(pc.transfer)}},
                        concat(concat({pre_ckpt, fg_emb, fg_bias}, side_inputs(en)), side_inputs(fg)),
                        [&](const fs::path& out) {
                          TransferArgs a;
                          a.config = write_text(out / "transfer.cfg", config_text(nullptr, pc.transfer));
                          a.checkpoint = pre_ckpt.string();
                          a.init = fg_emb.string();
                          a.init_bias = fg_bias.string();
                          a.english = en;
                          a.foreign = fg;
                          a.output_dir = out.string();
                          return cmd_transfer(a);
                        });
  const fs::path tr_ckpt = tr.dir / "final";

  // Held-out evaluation ----------------------------------------------------
  const CorpusSide en_held{en_valid, en.vocab, en.codes}, fg_held{fg_valid, fg.vocab, fg.codes};
  const auto ev = stage(
      "eval",
      Json{{"seed", pc.eval.seed}, {"batch_size", pc.eval.batch_size}, {"mask_prob", pc.eval.mask_prob},
           {"seq_len", pc.transfer.seq_len}},
      concat(concat({pre_ckpt, fg_emb, fg_bias, tr_ckpt}, side_inputs(en_held)), side_inputs(fg_held)),
      [&](const fs::path& out) {
        auto run = [&](const fs::path& ckpt, const CorpusSide& c, const char* lang, bool step0) {
          EvalArgs a;
          a.checkpoint = ckpt.string();
          a.corpus = c;
          a.language = lang;
          if (step0) {
            a.init = fg_emb.string();
            a.init_bias = fg_bias.string();
          }
          a.seq_len = pc.transfer.seq_len;
          a.options = pc.eval;
          return cmd_eval(a);
        };
        Json j{{"en_pretrained", run(pre_ckpt, en_held, "en", false)},
               {"fg_step0", run(pre_ckpt, fg_held, "fg", true)},
               {"en_final", run(tr_ckpt, en_held, "en", false)},
               {"fg_final", run(tr_ckpt, fg_held, "fg", false)}};
        write_text(out / "eval.json", j.dump(2) + "\n");
        return j;
      });

  // Artifacts and summary --------------------------------------------------
  const fs::path o = pc.output_dir;
  copy_into(pre.dir / "metrics.csv", o / "pretrain_metrics.csv");
  copy_into(tr.dir / "metrics.csv", o / "transfer_metrics.csv");
  copy_into(pre_ckpt, o / "pretrained");
  copy_into(tr_ckpt, o / "checkpoint");
  copy_into(fg_emb, o / "fg_embeddings.bin");
  copy_into(fg_bias, o / "fg_bias.bin");
  if (matrix) copy_into(*matrix, o / "translation_matrix.txt");
  copy_into(ev.dir / "eval.json", o / "eval.json");

  const Json& e = ev.summary;
  const double en_pre = e["en_pretrained"]["loss"], en_fin = e["en_final"]["loss"];
  Json checks = Json::array();
  checks.push_back(Json{{"name", "english_retention"},
                        {"pass", en_fin - en_pre <= pc.retention_tolerance},
                        {"delta", en_fin - en_pre},
                        {"tolerance", pc.retention_tolerance}});
  const bool exact_case = pc.use_fixture && pc.method == "dictionary" && pc.fixture.dict_dropout == 0.0 &&
                          pc.fixture.split_prob == 0.0 && pc.dictionary.empty() && pc.bpe_merges_en == 0 &&
                          pc.bpe_merges_fg == 0;
  if (exact_case) {
    const double fg0 = e["fg_step0"]["loss"];
    checks.push_back(Json{{"name", "cipher_step0_equals_english"},
                          {"pass", std::abs(fg0 - en_pre) <= 1e-6},
                          {"difference", fg0 - en_pre},
                          {"tolerance", 1e-6}});
  }
  bool pass = true;
  for (const auto& c : checks) pass = pass && c["pass"].get<bool>();

  Json summary{{"status", "ok"}, {"output", o.string()}, {"cache", cache_root.string()}, {"stages", stages}};
  summary["init"] = init.summary;
  summary["losses"] = Json{{"en_pretrained", en_pre},
                           {"fg_step0", e["fg_step0"]["loss"]},
                           {"en_final", en_fin},
                           {"fg_final", e["fg_final"]["loss"]},
                           {"fg_final_accuracy", e["fg_final"]["accuracy"]}};
  summary["checks"] = checks;
  summary["pass"] = pass;
  summary["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(o / "summary.json", summary.dump(2) + "\n");
  return summary;
}

Json cmd_run_all(const RunAllArgs& a) {
  const FlatConfig cfg = load_config(a.config, a.set);
  const fs::path base = a.config.empty() ? fs::current_path() : fs::absolute(a.config).parent_path();
  PipelineConfig pc = PipelineConfig::from(cfg, base);
  if (!a.output_dir.empty()) pc.output_dir = a.output_dir;
  fs::path cache_root = pc.output_dir / "cache";
  if (const char* env = std::getenv("LMT_CACHE_DIR"); env && *env) cache_root = env;
  if (!a.cache_dir.empty()) cache_root = a.cache_dir;
  return run_pipeline(pc, cache_root);
}

}  // namespace lmt::cli
