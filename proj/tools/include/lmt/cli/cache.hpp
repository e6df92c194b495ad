#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "lmt/cli/commands.hpp"

namespace lmt::cli {

std::string sha256_hex(std::string_view data);
/// Hash of a file's bytes, or of a directory's sorted (relative path, file
/// hash) listing.
std::string hash_path(const std::filesystem::path& path);

/// Content-addressed stage cache. An entry lives in
/// <root>/<stage>-<key prefix>/ and is keyed on the stage name, the
/// parameters and the content hashes of the inputs. An entry counts only
/// once its record (stage.json) is written, and its outputs are re-hashed
/// against the record before reuse.
class StageCache {
 public:
  explicit StageCache(std::filesystem::path root);

  struct Result {
    std::filesystem::path dir;  // stage outputs
    bool hit = false;
    std::string key;
    Json summary;
    double seconds = 0.0;
  };

  using Body = std::function<Json(const std::filesystem::path& out_dir)>;

  Result run(const std::string& stage, const Json& params, const std::vector<std::filesystem::path>& inputs,
             const Body& body);

  const std::filesystem::path& root() const noexcept { return root_; }

 private:
  std::filesystem::path root_;
};

}  // namespace lmt::cli
