#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unistd.h>

#include <Eigen/QR>

#include "lmt/checkpoint.hpp"
#include "lmt/cli/cache.hpp"
#include "lmt/cli/commands.hpp"
#include "lmt/cli/fixture.hpp"
#include "lmt/cli/pipeline.hpp"
#include "lmt/embeddings.hpp"
#include "lmt/error.hpp"
#include "lmt/rng.hpp"

namespace fs = std::filesystem;
using namespace lmt;
using namespace lmt::cli;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("lmt-cli-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::map<std::string, std::uint64_t> token_counts(const std::vector<std::string>& lines) {
  std::map<std::string, std::uint64_t> c;
  for (const auto& l : lines)
    for (const auto& t : split_whitespace(l)) ++c[t];
  return c;
}

std::multiset<std::uint64_t> count_multiset(const std::map<std::string, std::uint64_t>& c) {
  std::multiset<std::uint64_t> s;
  for (const auto& [_, n] : c) s.insert(n);
  return s;
}

struct Proc {
  int exit = -1;
  std::string out, err;
};

Proc run_lmt(const std::string& args, const TempDir& dir) {
  const std::string out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(LMT_BINARY) + " " + args + " > " + out + " 2> " + err;
  const int status = std::system(cmd.c_str());
  Proc p;
  p.exit = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  p.out = slurp(out);
  p.err = slurp(err);
  return p;
}

CipherFixtureOptions small_fixture() {
  CipherFixtureOptions o;
  o.vocab_size = 60;
  o.sentences = 400;
  o.heldout = 40;
  o.seed = 3;
  return o;
}

void write_vec(const std::string& path, const std::vector<std::string>& words, const RowMatrixD& m) {
  save_vectors(EmbeddingMatrix(Vocabulary::plain(words), m), path, VectorFormat::kText);
}

// Small pipeline config: tiny model, few updates.
std::string tiny_pipeline(const std::string& extra = "") {
  return "[fixture]\nvocab_size = 40\nsentences = 300\nheldout = 30\nseed = 5\n"
         "[model]\ndim = 8\nlayers = 1\nheads = 2\nffn = 16\nmax_len = 16\n"
         "[pretrain]\ntotal_updates = 20\nwarmup_updates = 5\nbatch_size = 4\nseq_len = 16\n"
         "[transfer]\ntotal_updates = 20\nwarmup_updates = 5\nbatch_size = 4\nseq_len = 16\n"
         "freeze_phase_updates = 5\n" +
         extra;
}

std::map<std::string, std::string> cache_status(const Json& summary) {
  std::map<std::string, std::string> m;
  for (const auto& s : summary["stages"]) m[s["name"].get<std::string>()] = s["cache"].get<std::string>();
  return m;
}

}  // namespace

TEST_CASE("cipher fixture: noise-free cipher permutes the token counts") {
  const auto f = make_cipher_fixture(small_fixture());
  REQUIRE(f.en_train.size() == 400);
  REQUIRE(f.fg_valid.size() == 40);
  const auto en = token_counts(f.en_train), fg = token_counts(f.fg_train);
  CHECK(en.size() == fg.size());
  CHECK(count_multiset(en) == count_multiset(fg));
  // the dictionary maps each cipher word onto the English word with the same count
  for (const auto& [c, e] : f.dictionary) {
    const auto ie = en.find(e);
    const auto ic = fg.find(c);
    CHECK((ie == en.end()) == (ic == fg.end()));
    if (ie != en.end() && ic != fg.end()) CHECK(ie->second == ic->second);
  }
  // token-level cipher: lines align word for word
  for (std::size_t i = 0; i < f.en_train.size(); ++i)
    CHECK(split_whitespace(f.en_train[i]).size() == split_whitespace(f.fg_train[i]).size());
}

TEST_CASE("cipher fixture: dictionary size, determinism, noisy variants") {
  auto o = small_fixture();
  const auto a = make_cipher_fixture(o);
  CHECK(a.dictionary.size() == o.vocab_size);
  CHECK(a.noisy_dictionary == a.dictionary);
  CHECK(a.fg_train_split.empty());
  const auto b = make_cipher_fixture(o);
  CHECK(a.en_train == b.en_train);
  CHECK(a.fg_train == b.fg_train);
  CHECK(a.dictionary == b.dictionary);

  std::set<std::string> en_words(a.english_words.begin(), a.english_words.end());
  std::set<std::string> fg_words(a.cipher_words.begin(), a.cipher_words.end());
  CHECK(en_words.size() == o.vocab_size);
  CHECK(fg_words.size() == o.vocab_size);
  for (const auto& w : fg_words) CHECK(en_words.count(w) == 0);

  o.seed = 4;
  CHECK(make_cipher_fixture(o).en_train != a.en_train);

  o.vocab_size = 1000;
  o.dict_dropout = 0.2;
  o.split_prob = 0.5;
  const auto n = make_cipher_fixture(o);
  CHECK(n.dictionary.size() == 1000);
  const double kept = static_cast<double>(n.noisy_dictionary.size()) / 1000.0;
  CHECK(kept == doctest::Approx(0.8).epsilon(0.05));
  CHECK(n.split_types > 300);
  REQUIRE(n.fg_train_split.size() == n.fg_train.size());
  bool saw_piece = false;
  for (std::size_t i = 0; i < n.fg_train.size(); ++i) {
    const auto whole = split_whitespace(n.fg_train[i]);
    const auto split = split_whitespace(n.fg_train_split[i]);
    CHECK(split.size() >= whole.size());
    std::string joined;
    for (const auto& p : split) {
      if (p.size() > 2 && p.substr(p.size() - 2) == "@@") {
        joined += p.substr(0, p.size() - 2);
        saw_piece = true;
      } else {
        joined += p + " ";
      }
    }
    std::string expect;
    for (const auto& w : whole) expect += w + " ";
    CHECK(joined == expect);
  }
  CHECK(saw_piece);
}

TEST_CASE("cipher fixture: invalid options") {
  auto o = small_fixture();
  o.vocab_size = 9;
  CHECK_THROWS_AS(make_cipher_fixture(o), InvalidArgument);
  o = small_fixture();
  o.dict_dropout = 1.0;
  CHECK_THROWS_AS(make_cipher_fixture(o), InvalidArgument);
  o = small_fixture();
  o.min_len = 8;
  o.max_len = 4;
  CHECK_THROWS_AS(make_cipher_fixture(o), InvalidArgument);
}

TEST_CASE("sha256 of known strings") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("subcommands write exactly what the library writes") {
  TempDir d("wrap");
  const auto f = make_cipher_fixture(small_fixture());
  write_cipher_fixture(f, d.path.string());
  const std::string corpus = d / "en.train.txt";

  cmd_bpe({{corpus}, 30, d / "codes.cli"});
  learn_bpe(read_lines(corpus), 30).codes.save(d / "codes.lib");
  CHECK(slurp(d / "codes.cli") == slurp(d / "codes.lib"));

  cmd_vocab({{corpus}, d / "codes.cli", 100, d / "vocab.cli"});
  build_vocab(segment_corpus(read_lines(corpus), BpeCodes::load(d / "codes.lib")), 100).save(d / "vocab.lib");
  CHECK(slurp(d / "vocab.cli") == slurp(d / "vocab.lib"));

  // process output equals in-process output
  const auto p = run_lmt("-q vocab --input " + corpus + " --codes " + (d / "codes.cli") + " --max-size 100 --output " +
                             (d / "vocab.proc"),
                         d);
  CHECK(p.exit == 0);
  CHECK(slurp(d / "vocab.proc") == slurp(d / "vocab.lib"));
  const Json j = Json::parse(p.out);
  CHECK(j["status"] == "ok");
  CHECK(j["command"] == "vocab");
}

TEST_CASE("translation-matrix with identity toy vectors gives the identity matrix") {
  TempDir d("ident");
  const std::vector<std::string> words = {"a", "b", "c", "d"};
  write_lines(d / "vocab.txt", std::vector<std::string>{"[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]", "a", "b", "c",
                                                        "d"});
  write_vec(d / "id.vec", words, RowMatrixD::Identity(4, 4));
  const auto p = run_lmt("-q translation-matrix --fg-vocab " + (d / "vocab.txt") + " --en-vocab " + (d / "vocab.txt") +
                             " --fg-vectors " + (d / "id.vec") + " --en-vectors " + (d / "id.vec") + " --output " +
                             (d / "m.txt"),
                         d);
  REQUIRE(p.exit == 0);
  const Vocabulary v = Vocabulary::load(d / "vocab.txt");
  const TranslationMatrix tm = TranslationMatrix::load(d / "m.txt", v, v);
  REQUIRE(tm.num_rows() == 9);
  for (std::size_t i = 0; i < 5; ++i) CHECK_FALSE(tm.covered(i));
  for (std::size_t i = 5; i < 9; ++i) {
    REQUIRE(tm.row(i).size() == 1);
    CHECK(tm.row(i)[0].col == static_cast<TokenId>(i));
    CHECK(tm.row(i)[0].weight == 1.0);
  }
  const Json j = Json::parse(p.out);
  CHECK(j["matrix"]["covered"] == 4);
}

TEST_CASE("errors: missing file names the path, exit codes follow the error kind") {
  TempDir d("err");
  const std::string missing = d / "no-such-corpus.txt";
  auto p = run_lmt("-q vocab --input " + missing + " --output " + (d / "v.txt"), d);
  CHECK(p.exit == 3);
  CHECK(p.out.find(missing) != std::string::npos);
  CHECK(p.err.find(missing) != std::string::npos);
  const Json j = Json::parse(p.out);
  CHECK(j["status"] == "error");
  CHECK(j["code"] == "io");
  CHECK(j["stage"] == "vocab");

  p = run_lmt("vocab --output x", d);  // --input missing
  CHECK(p.exit == 2);
  CHECK(Json::parse(p.out)["code"] == "usage");

  write_lines(d / "bad.vec", std::vector<std::string>{"2 3", "a 1 2 3", "b 1 2"});
  p = run_lmt("-q align-vectors --foreign " + (d / "bad.vec") + " --english " + (d / "bad.vec") + " --output " +
                  (d / "o.vec"),
              d);
  CHECK(p.exit == 4);
  CHECK(Json::parse(p.out)["code"] == "format");

  p = run_lmt("-q cipher-fixture --vocab-size 5 --output " + (d / "fx"), d);
  CHECK(p.exit == 2);
}

TEST_CASE("align-vectors recovers a planted rotation through the command") {
  TempDir d("align");
  const std::size_t n = 30, dim = 5;
  Rng rng(11);
  RowMatrixD en(n, dim);
  for (Eigen::Index i = 0; i < en.size(); ++i) en.data()[i] = rng.normal();
  Eigen::MatrixXd g(dim, dim);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  const RowMatrixD fg = en * q.transpose();  // fg * q = en
  std::vector<std::string> words;
  for (std::size_t i = 0; i < n; ++i) words.push_back("w" + std::to_string(i));
  save_vectors(EmbeddingMatrix(Vocabulary::plain(words), fg), d / "fg.bin", VectorFormat::kBinary);
  save_vectors(EmbeddingMatrix(Vocabulary::plain(words), en), d / "en.bin", VectorFormat::kBinary);
  const Json j = cmd_align_vectors({d / "fg.bin", d / "en.bin", "", false, std::nullopt, d / "out.bin", ""});
  CHECK(j["pairs"] == n);
  CHECK(j["residual"].get<double>() < 1e-9);
  const auto out = load_vectors_any(d / "out.bin");
  CHECK((out.data() - en).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("pretrain, init, transfer and eval commands on the cipher fixture") {
  TempDir d("train");
  const auto f = make_cipher_fixture(small_fixture());
  write_cipher_fixture(f, d.path.string());
  cmd_vocab({{d / "en.train.txt"}, "", 1000, d / "en.vocab"});
  cmd_vocab({{d / "fg.train.txt"}, "", 1000, d / "fg.vocab"});
  std::ofstream(d / "model.cfg") << "[model]\ndim = 8\nlayers = 1\nheads = 2\nffn = 16\nmax_len = 16\n"
                                    "[train]\nbatch_size = 4\nseq_len = 16\nwarmup_updates = 10\n";

  PretrainArgs pa;
  pa.config = d / "model.cfg";
  pa.set = {"train.total_updates = 50"};
  pa.english = {d / "en.train.txt", d / "en.vocab", ""};
  pa.output_dir = d / "pre";
  const Json pj = cmd_pretrain(pa);
  CHECK(pj["updates"] == 50);
  const std::string ckpt = d / "pre/final";
  CHECK(load_checkpoint(ckpt).step == 50);

  TranslationMatrixArgs ta;
  ta.fg_vocab = d / "fg.vocab";
  ta.en_vocab = d / "en.vocab";
  ta.dictionary = d / "dictionary.tsv";
  ta.output = d / "m.txt";
  CHECK(cmd_translation_matrix(ta)["matrix"]["covered"] == Vocabulary::load(d / "fg.vocab").size() - 5);

  InitEmbeddingsArgs ia;
  ia.matrix = d / "m.txt";
  ia.checkpoint = ckpt;
  ia.fg_vocab = d / "fg.vocab";
  ia.en_vocab = d / "en.vocab";
  ia.output = d / "fg.bin";
  ia.bias_output = d / "fg_bias.bin";
  const Json ij = cmd_init_embeddings(ia);
  CHECK(ij["report"]["coverage_ratio"] == 1.0);

  // step-0 foreign loss equals the English loss through the eval command
  EvalArgs ea;
  ea.checkpoint = ckpt;
  ea.corpus = {d / "en.valid.txt", d / "en.vocab", ""};
  const double en0 = cmd_eval(ea)["loss"];
  ea.corpus = {d / "fg.valid.txt", d / "fg.vocab", ""};
  ea.language = "fg";
  ea.init = d / "fg.bin";
  ea.init_bias = d / "fg_bias.bin";
  const double fg0 = cmd_eval(ea)["loss"];
  CHECK(fg0 == doctest::Approx(en0).epsilon(1e-12));

  TransferArgs ra;
  ra.config = d / "model.cfg";
  ra.set = {"train.total_updates=5000", "train.freeze_phase_updates=500", "train.warmup_updates=400"};
  ra.checkpoint = ckpt;
  ra.init = d / "fg.bin";
  ra.init_bias = d / "fg_bias.bin";
  ra.english = {d / "en.train.txt", d / "en.vocab", ""};
  ra.foreign = {d / "fg.train.txt", d / "fg.vocab", ""};
  ra.output_dir = d / "tr";
  const Json tj = cmd_transfer(ra);
  CHECK(tj["updates"] == 5000);
  const auto rows = read_lines(d / "tr/metrics.csv");
  REQUIRE(rows.size() == 5001);
  CHECK(rows[0] == metrics_csv_header());
  CHECK(rows.back().rfind("5000,", 0) == 0);
  CHECK(load_checkpoint(d / "tr/final").step == 5000);

  // wrong vocabulary for the init table
  ra.foreign.vocab = d / "en.vocab";
  ra.output_dir = d / "tr2";
  CHECK_THROWS_AS(cmd_transfer(ra), InvalidArgument);
}

TEST_CASE("run-all: cache hits on rerun, cache override, stage failure keeps prior entries") {
  TempDir d("runall");
  std::ofstream(d / "p.cfg") << tiny_pipeline();
  RunAllArgs a;
  a.config = d / "p.cfg";
  a.output_dir = d / "out";
  const Json first = cmd_run_all(a);
  for (const auto& [name, status] : cache_status(first)) CHECK_MESSAGE(status == "miss", name);
  CHECK(first["losses"]["fg_step0"] == first["losses"]["en_pretrained"]);
  bool saw_exact = false;
  for (const auto& c : first["checks"])
    if (c["name"] == "cipher_step0_equals_english") {
      saw_exact = true;
      CHECK(c["pass"] == true);
    }
  CHECK(saw_exact);
  CHECK(read_lines(d / "out/transfer_metrics.csv").size() == 21);
  CHECK(fs::exists(d / "out/checkpoint/manifest.json"));
  CHECK(fs::exists(d / "out/summary.json"));
  const std::string first_metrics = slurp(d / "out/transfer_metrics.csv");

  const Json again = cmd_run_all(a);
  for (const auto& [name, status] : cache_status(again)) CHECK_MESSAGE(status == "hit", name);
  CHECK(again["losses"] == first["losses"]);

  // a tampered entry fails verification and is rebuilt
  for (const auto& e : fs::directory_iterator(fs::path(d / "out") / "cache"))
    if (e.path().filename().string().rfind("transfer-", 0) == 0) std::ofstream(e.path() / "out/metrics.csv") << "x";
  const Json rebuilt = cmd_run_all(a);
  CHECK(cache_status(rebuilt)["transfer"] == "miss");
  CHECK(cache_status(rebuilt)["pretrain"] == "hit");
  CHECK(slurp(d / "out/transfer_metrics.csv") == first_metrics);

  // LMT_CACHE_DIR moves the cache; a fresh cache reproduces the artifacts
  ::setenv("LMT_CACHE_DIR", (d / "other-cache").c_str(), 1);
  a.output_dir = d / "out2";
  const Json fresh = cmd_run_all(a);
  ::unsetenv("LMT_CACHE_DIR");
  CHECK(fs::exists(d / "other-cache"));
  CHECK_FALSE(fs::exists(d / "out2/cache"));
  for (const auto& [name, status] : cache_status(fresh)) CHECK_MESSAGE(status == "miss", name);
  CHECK(hash_path(d / "out/checkpoint") == hash_path(d / "out2/checkpoint"));
  CHECK(slurp(d / "out/transfer_metrics.csv") == slurp(d / "out2/transfer_metrics.csv"));

  // failing stage: prior entries stay, error carries the stage name and kind
  write_lines(d / "bad-align.txt", std::vector<std::string>{"0-0 oops"});
  std::ofstream(d / "bad.cfg") << tiny_pipeline("[init]\nmethod = fastalign\n[data]\nalignments = bad-align.txt\n");
  RunAllArgs b;
  b.config = d / "bad.cfg";
  b.output_dir = d / "out";
  try {
    cmd_run_all(b);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "matrix");
    CHECK(e.kind() == Error::Kind::kFormat);
  }
  const Json after = cmd_run_all(a = RunAllArgs{d / "p.cfg", {}, d / "out", ""});
  for (const auto& [name, status] : cache_status(after)) CHECK_MESSAGE(status == "hit", name);
}

TEST_CASE("run-all: changing the vectors file reruns only downstream stages") {
  TempDir d("vectors");
  auto o = CipherFixtureOptions{};
  o.vocab_size = 40;
  o.sentences = 300;
  o.heldout = 30;
  o.seed = 5;
  const auto f = make_cipher_fixture(o);
  const std::size_t dim = 6;
  Rng rng(21);
  RowMatrixD en(o.vocab_size, dim);
  for (Eigen::Index i = 0; i < en.size(); ++i) en.data()[i] = rng.normal();
  write_vec(d / "en.vec", f.english_words, en);
  write_vec(d / "fg.vec", f.cipher_words, en);  // same vector for a word and its cipher
  write_lines(d / "seed.tsv", std::vector<std::string>{f.dictionary[0].first + "\t" + f.dictionary[0].second,
                                                       f.dictionary[1].first + "\t" + f.dictionary[1].second,
                                                       f.dictionary[2].first + "\t" + f.dictionary[2].second,
                                                       f.dictionary[3].first + "\t" + f.dictionary[3].second,
                                                       f.dictionary[4].first + "\t" + f.dictionary[4].second,
                                                       f.dictionary[5].first + "\t" + f.dictionary[5].second,
                                                       f.dictionary[6].first + "\t" + f.dictionary[6].second});
  std::ofstream(d / "p.cfg") << tiny_pipeline(
      "[init]\nmethod = vectors\n[data]\nfg_vectors = fg.vec\nen_vectors = en.vec\nalign_dictionary = seed.tsv\n");
  const RunAllArgs a{d / "p.cfg", {}, d / "out", ""};
  const Json first = cmd_run_all(a);
  CHECK(first["init"]["report"]["coverage_ratio"].get<double>() > 0.9);
  for (const auto& [name, status] : cache_status(first)) CHECK_MESSAGE(status == "miss", name);

  // same bytes rewritten: everything hits
  write_vec(d / "fg.vec", f.cipher_words, en);
  for (const auto& [name, status] : cache_status(cmd_run_all(a))) CHECK_MESSAGE(status == "hit", name);

  RowMatrixD changed = en;
  changed(0, 0) += 0.5;
  write_vec(d / "fg.vec", f.cipher_words, changed);
  const auto st = cache_status(cmd_run_all(a));
  for (const char* up : {"fixture", "vocab-en", "vocab-fg", "pretrain"}) CHECK_MESSAGE(st.at(up) == "hit", up);
  for (const char* down : {"align", "matrix", "init", "transfer", "eval"}) CHECK_MESSAGE(st.at(down) == "miss", down);
}

TEST_CASE("run-all: config validation") {
  TempDir d("validate");
  std::ofstream(d / "p.cfg") << tiny_pipeline("[init]\nmethod = vectors\n[data]\nfg_vectors = gone.vec\n"
                                              "en_vectors = gone.vec\n");
  try {
    cmd_run_all({d / "p.cfg", {}, d / "out", ""});
    FAIL("expected an io error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("gone.vec") != std::string::npos);
  }
  std::ofstream(d / "q.cfg") << tiny_pipeline("[init]\nmethod = magic\n");
  CHECK_THROWS_AS(cmd_run_all({d / "q.cfg", {}, d / "out", ""}), InvalidArgument);
  CHECK_THROWS_AS(cmd_run_all({d / "p.cfg", {"model.dim=7"}, d / "out", ""}), InvalidArgument);
}
