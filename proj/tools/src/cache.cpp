#include "lmt/cli/cache.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <fstream>
#include <memory>

#include "lmt/error.hpp"

namespace fs = std::filesystem;

namespace lmt::cli {

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256: init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw std::runtime_error("sha256: update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw std::runtime_error("sha256: final failed");
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out += kDigits[md[i] >> 4];
      out += kDigits[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

std::string hash_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError(p.string(), "cannot open for hashing");
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

Json hash_outputs(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Json out = Json::object();
  for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = hash_file(f);
  return out;
}

void write_json(const fs::path& p, const Json& j) {
  std::ofstream out(p, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw IoError(p.string(), "write failed");
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex();
}

std::string hash_path(const fs::path& path) {
  if (!fs::exists(path)) throw IoError(path.string(), "no such file or directory");
  if (!fs::is_directory(path)) return hash_file(path);
  return sha256_hex(hash_outputs(path).dump());
}

StageCache::StageCache(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

StageCache::Result StageCache::run(const std::string& stage, const Json& params, const std::vector<fs::path>& inputs,
                                   const Body& body) {
  Json input_hashes = Json::array();
  for (const auto& p : inputs) input_hashes.push_back(hash_path(p));
  const Json key_material{{"stage", stage}, {"params", params}, {"inputs", input_hashes}};
  Result r;
  r.key = sha256_hex(key_material.dump());
  const fs::path entry = root_ / (stage + "-" + r.key.substr(0, 16));
  const fs::path record = entry / "stage.json";
  r.dir = entry / "out";

  if (fs::exists(record)) {
    std::ifstream in(record, std::ios::binary);
    const Json rec = Json::parse(in, nullptr, false);
    if (!rec.is_discarded() && rec.value("key", "") == r.key && fs::is_directory(r.dir) &&
        rec["outputs"] == hash_outputs(r.dir)) {
      r.hit = true;
      r.summary = rec["summary"];
      r.seconds = 0.0;
      return r;
    }
    log("cache: entry for " + stage + " failed verification, rebuilding");
  }

  const fs::path tmp = root_ / (stage + "-" + r.key.substr(0, 16) + ".partial");
  fs::remove_all(tmp);
  fs::create_directories(tmp / "out");
  const auto t0 = std::chrono::steady_clock::now();
  r.summary = body(tmp / "out");
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const Json rec{{"stage", stage}, {"key", r.key}, {"params", params}, {"inputs", input_hashes},
                 {"outputs", hash_outputs(tmp / "out")}, {"summary", r.summary}};
  write_json(tmp / "stage.json", rec);
  fs::remove_all(entry);
  fs::rename(tmp, entry);
  return r;
}

}  // namespace lmt::cli
