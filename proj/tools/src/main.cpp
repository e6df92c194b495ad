// lmt: command-line front end. JSON summaries go to stdout, logs to stderr.
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "lmt/cli/commands.hpp"
#include "lmt/cli/pipeline.hpp"
#include "lmt/error.hpp"

namespace {

using lmt::cli::Json;

enum ExitCode { kOk = 0, kOther = 1, kUsage = 2, kIo = 3, kFormat = 4, kNumeric = 5 };

struct Outcome {
  int code;
  const char* name;
};

Outcome classify(const lmt::Error& e) {
  switch (e.kind()) {
    case lmt::Error::Kind::kInvalidArgument: return {kUsage, "invalid_argument"};
    case lmt::Error::Kind::kIo: return {kIo, "io"};
    case lmt::Error::Kind::kFormat: return {kFormat, "format"};
    case lmt::Error::Kind::kNumeric: return {kNumeric, "numeric"};
  }
  return {kOther, "internal"};
}

int fail(const std::string& stage, int code, const char* name, const std::string& message) {
  const std::string full = message.rfind(stage + ":", 0) == 0 ? message : stage + ": " + message;
  std::cout << Json{{"status", "error"}, {"stage", stage}, {"code", name}, {"exit", code}, {"message", full}}.dump()
            << std::endl;
  std::cerr << "lmt: " << full << '\n';
  return code;
}

void add_side(CLI::App* app, lmt::cli::CorpusSide& s, const std::string& lang, bool text = true) {
  if (text) app->add_option("--" + lang, s.text, lang + " text, one sentence per line");
  app->add_option("--" + lang + "-vocab", s.vocab, lang + " model vocabulary")->required();
  app->add_option("--" + lang + "-codes", s.codes, lang + " BPE codes");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Foreign-language transfer of a tiny masked LM through embedding initialization"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "no logs on stderr");

  namespace c = lmt::cli;
  std::string stage;
  std::function<Json()> action;
  auto sub = [&](const char* name, const char* help, std::function<Json()> fn) {
    CLI::App* s = app.add_subcommand(name, help);
    s->callback([&stage, &action, name, fn] {
      stage = name;
      action = fn;
    });
    return s;
  };

  c::BpeArgs bpe;
  auto* s_bpe = sub("bpe", "learn BPE merges", [&] { return c::cmd_bpe(bpe); });
  s_bpe->add_option("--input", bpe.inputs, "training text")->required();
  s_bpe->add_option("--merges", bpe.merges, "number of merges")->capture_default_str();
  s_bpe->add_option("--output", bpe.output, "codes file")->required();

  c::VocabArgs vocab;
  auto* s_vocab = sub("vocab", "build a model vocabulary", [&] { return c::cmd_vocab(vocab); });
  s_vocab->add_option("--input", vocab.inputs, "training text")->required();
  s_vocab->add_option("--codes", vocab.codes, "BPE codes");
  s_vocab->add_option("--max-size", vocab.max_size, "size cap including reserved tokens")->capture_default_str();
  s_vocab->add_option("--output", vocab.output, "vocabulary file")->required();

  c::AlignVectorsArgs av;
  auto* s_av = sub("align-vectors", "map foreign vectors into the English space (orthogonal Procrustes)",
                   [&] { return c::cmd_align_vectors(av); });
  s_av->add_option("--foreign", av.foreign, "foreign vectors (.vec or binary)")->required();
  s_av->add_option("--english", av.english, "English vectors")->required();
  s_av->add_option("--dictionary", av.dictionary, "seed pairs foreign<TAB>english; identical strings if absent");
  s_av->add_flag("--normalize", av.normalize, "unit-normalize rows first");
  s_av->add_option("--limit", av.limit, "read only the first N vectors");
  s_av->add_option("--output", av.output, "aligned foreign vectors")->required();
  s_av->add_option("--matrix-output", av.matrix_output, "the d x d map");

  c::Ibm1Args ibm;
  auto* s_ibm = sub("ibm1",
                    "IBM Model 1 p(english | foreign) on a line-aligned corpus; foreign is the source side",
                    [&] { return c::cmd_ibm1(ibm); });
  add_side(s_ibm, ibm.foreign, "foreign");
  add_side(s_ibm, ibm.english, "english");
  s_ibm->add_option("--iterations", ibm.iterations)->capture_default_str();
  s_ibm->add_option("--prune", ibm.prune)->capture_default_str();
  s_ibm->add_option("--subsample", ibm.subsample, "use N random pairs (0: all)")->capture_default_str();
  s_ibm->add_option("--seed", ibm.seed)->capture_default_str();
  s_ibm->add_option("--output", ibm.output, "translation matrix")->required();
  s_ibm->add_option("--table", ibm.table, "raw lexical table with NULL mass");

  c::FastAlignArgs fa;
  auto* s_fa = sub("parse-fastalign",
                   "translation matrix from fast-align output; run fast-align with foreign as the source side",
                   [&] { return c::cmd_parse_fastalign(fa); });
  add_side(s_fa, fa.foreign, "foreign");
  add_side(s_fa, fa.english, "english");
  s_fa->add_option("--alignments", fa.alignments, "\"i-j\" links, one line per sentence pair")->required();
  s_fa->add_option("--output", fa.output, "translation matrix")->required();
  s_fa->add_option("--table", fa.table, "raw relative-frequency table");

  c::SubwordVectorsArgs sv;
  auto* s_sv = sub("subword-vectors", "frequency-weighted subword vectors from word vectors",
                   [&] { return c::cmd_subword_vectors(sv); });
  s_sv->add_option("--vectors", sv.vectors, "word vectors")->required();
  s_sv->add_option("--corpus", sv.corpus, "text for word frequencies")->required();
  s_sv->add_option("--vocab", sv.vocab, "subword model vocabulary")->required();
  s_sv->add_option("--codes", sv.codes, "BPE codes");
  s_sv->add_option("--limit", sv.limit, "read only the first N vectors");
  s_sv->add_option("--output", sv.output, "subword vectors (.vec text, otherwise binary)")->required();

  c::TranslationMatrixArgs tm;
  auto* s_tm = sub("translation-matrix", "foreign-to-English translation matrix from vectors or a dictionary",
                   [&] { return c::cmd_translation_matrix(tm); });
  s_tm->add_option("--fg-vocab", tm.fg_vocab, "foreign model vocabulary")->required();
  s_tm->add_option("--en-vocab", tm.en_vocab, "English model vocabulary")->required();
  s_tm->add_option("--fg-vectors", tm.fg_vectors, "aligned foreign vectors");
  s_tm->add_option("--en-vectors", tm.en_vectors, "English vectors");
  s_tm->add_option("--dictionary", tm.dictionary, "foreign<TAB>english pairs instead of vectors");
  s_tm->add_option("--projection", tm.projection, "sparsemax or softmax")->capture_default_str();
  s_tm->add_option("--threads", tm.threads)->capture_default_str();
  s_tm->add_option("--output", tm.output, "matrix file")->required();

  c::InitEmbeddingsArgs ie;
  auto* s_ie = sub("init-embeddings", "foreign embeddings and output bias from a translation matrix",
                   [&] { return c::cmd_init_embeddings(ie); });
  s_ie->add_option("--matrix", ie.matrix, "translation matrix");
  s_ie->add_option("--checkpoint", ie.checkpoint, "pretrained English checkpoint directory")->required();
  s_ie->add_option("--fg-vocab", ie.fg_vocab)->required();
  s_ie->add_option("--en-vocab", ie.en_vocab);
  s_ie->add_option("--seed", ie.seed)->capture_default_str();
  s_ie->add_flag("--random", ie.random, "Gaussian baseline, ignores --matrix");
  s_ie->add_option("--output", ie.output, "foreign embeddings (binary vector file)")->required();
  s_ie->add_option("--bias-output", ie.bias_output, "foreign output bias (tensor file)");

  c::PretrainArgs pt;
  auto* s_pt = sub("pretrain", "train the English masked LM", [&] { return c::cmd_pretrain(pt); });
  s_pt->add_option("--config", pt.config, "flat config with [model] and [train] sections");
  s_pt->add_option("--set", pt.set, "key=value override, e.g. train.total_updates=100");
  s_pt->add_option("--corpus", pt.english.text, "English text")->required();
  s_pt->add_option("--vocab", pt.english.vocab)->required();
  s_pt->add_option("--codes", pt.english.codes);
  s_pt->add_option("--output", pt.output_dir, "checkpoint directory")->required();
  s_pt->add_option("--metrics", pt.metrics, "metrics CSV (default <output>/metrics.csv)");

  c::TransferArgs tr;
  auto* s_tr = sub("transfer", "attach the foreign table and fine-tune on both languages",
                   [&] { return c::cmd_transfer(tr); });
  s_tr->add_option("--config", tr.config, "flat config with a [train] section");
  s_tr->add_option("--set", tr.set, "key=value override");
  s_tr->add_option("--checkpoint", tr.checkpoint, "pretrained English checkpoint")->required();
  s_tr->add_option("--init", tr.init, "foreign embeddings from init-embeddings")->required();
  s_tr->add_option("--init-bias", tr.init_bias, "foreign output bias");
  add_side(s_tr, tr.english, "english");
  add_side(s_tr, tr.foreign, "foreign");
  s_tr->add_option("--output", tr.output_dir, "checkpoint directory")->required();
  s_tr->add_option("--metrics", tr.metrics, "metrics CSV (default <output>/metrics.csv)");

  c::EvalArgs ev;
  auto* s_ev = sub("eval", "held-out masked-LM loss and accuracy", [&] { return c::cmd_eval(ev); });
  s_ev->add_option("--checkpoint", ev.checkpoint)->required();
  s_ev->add_option("--corpus", ev.corpus.text)->required();
  s_ev->add_option("--vocab", ev.corpus.vocab)->required();
  s_ev->add_option("--codes", ev.corpus.codes);
  s_ev->add_option("--language", ev.language, "en or fg")->capture_default_str();
  s_ev->add_option("--init", ev.init, "foreign embeddings replacing the checkpoint table");
  s_ev->add_option("--init-bias", ev.init_bias);
  s_ev->add_option("--seq-len", ev.seq_len, "0: model max_len")->capture_default_str();
  s_ev->add_option("--batch-size", ev.options.batch_size)->capture_default_str();
  s_ev->add_option("--mask-prob", ev.options.mask_prob)->capture_default_str();
  s_ev->add_option("--seed", ev.options.seed)->capture_default_str();

  c::CipherFixtureArgs cf;
  auto* s_cf = sub("cipher-fixture", "synthetic English-like corpus, its token cipher and the dictionary",
                   [&] { return c::cmd_cipher_fixture(cf); });
  s_cf->add_option("--vocab-size", cf.options.vocab_size)->capture_default_str();
  s_cf->add_option("--sentences", cf.options.sentences)->capture_default_str();
  s_cf->add_option("--heldout", cf.options.heldout)->capture_default_str();
  s_cf->add_option("--seed", cf.options.seed)->capture_default_str();
  s_cf->add_option("--successors", cf.options.successors)->capture_default_str();
  s_cf->add_option("--dict-dropout", cf.options.dict_dropout)->capture_default_str();
  s_cf->add_option("--split-prob", cf.options.split_prob)->capture_default_str();
  s_cf->add_option("--output", cf.output_dir)->required();

  c::RunAllArgs ra;
  auto* s_ra = sub("run-all", "every stage in order with a content-addressed cache",
                   [&] { return c::cmd_run_all(ra); });
  s_ra->add_option("--config", ra.config, "pipeline config");
  s_ra->add_option("--set", ra.set, "key=value override");
  s_ra->add_option("--output", ra.output_dir, "output directory");
  s_ra->add_option("--cache-dir", ra.cache_dir, "cache root (default $LMT_CACHE_DIR, then <output>/cache)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(stage.empty() ? "usage" : stage, kUsage, "usage", e.what());
  }
  c::set_logging(!quiet);

  try {
    std::cout << [&] {
      Json out{{"status", "ok"}, {"command", stage}};
      out.update(action());
      return out;
    }().dump(2) << std::endl;
    return kOk;
  } catch (const c::StageError& e) {
    const auto o = classify(e);
    return fail(e.stage(), o.code, o.name, e.what());
  } catch (const lmt::Error& e) {
    const auto o = classify(e);
    return fail(stage, o.code, o.name, e.what());
  } catch (const std::exception& e) {
    return fail(stage, kOther, "internal", e.what());
  }
}
