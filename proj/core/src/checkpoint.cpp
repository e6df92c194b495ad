#include "lmt/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lmt/embeddings.hpp"
#include "lmt/error.hpp"

namespace lmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& c) {
  return {{"dim", c.dim},         {"layers", c.layers},
          {"heads", c.heads},     {"ffn", c.ffn},
          {"max_len", c.max_len}, {"norm", c.norm == NormStyle::kPreNorm ? "pre" : "post"},
          {"ln_eps", c.ln_eps}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.dim = j.at("dim").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn = j.at("ffn").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  const auto norm = j.at("norm").get<std::string>();
  if (norm != "pre" && norm != "post") throw InvalidArgument("unknown norm style '" + norm + "'");
  c.norm = norm == "pre" ? NormStyle::kPreNorm : NormStyle::kPostNorm;
  c.ln_eps = j.at("ln_eps").get<double>();
  c.validate();
  return c;
}

}  // namespace

std::string model_config_json(const ModelConfig& config) { return config_to_json(config).dump(); }

void save_checkpoint(const ModelState<float>& state, const std::string& dir, std::uint64_t step,
                     std::uint64_t seed) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir, "cannot create checkpoint directory: " + ec.message());
  auto& s = const_cast<ModelState<float>&>(state);
  json list = json::array();
  for (const auto& t : tensors(s)) {
    const std::string file = t.name + ".bin";
    save_tensor(*t.tensor, (fs::path(dir) / file).string());
    list.push_back({{"name", t.name},
                    {"file", file},
                    {"group", std::string(param_group_name(t.group))},
                    {"shape", {t.tensor->rows(), t.tensor->cols()}}});
  }
  json manifest = {{"format", "lmt-checkpoint"},
                   {"version", 1},
                   {"config", config_to_json(state.config)},
                   {"vocab_en", state.emb_en.rows()},
                   {"vocab_fg", state.emb_fg.rows()},
                   {"step", step},
                   {"rng", {{"seed", seed}, {"step", step}}},
                   {"tensors", list}};
  const auto path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError(path, "write failed");
}

Checkpoint load_checkpoint(const std::string& dir) {
  const auto path = (fs::path(dir) / "manifest.json").string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open checkpoint manifest");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path, 0, e.what());
  }
  Checkpoint ck;
  try {
    if (manifest.at("format") != "lmt-checkpoint") throw FormatError(path, 0, "not a checkpoint manifest");
    ck.state.config = config_from_json(manifest.at("config"));
    ck.step = manifest.at("step").get<std::uint64_t>();
    ck.seed = manifest.at("rng").at("seed").get<std::uint64_t>();
    ck.state.layers.resize(ck.state.config.layers);
    const auto& list = manifest.at("tensors");
    auto refs = tensors(ck.state);
    if (list.size() != refs.size())
      throw FormatError(path, 0, "manifest lists " + std::to_string(list.size()) + " tensors, expected " +
                                     std::to_string(refs.size()));
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto& entry = list[i];
      if (entry.at("name").get<std::string>() != refs[i].name)
        throw FormatError(path, 0, "tensor " + std::to_string(i) + " is '" + entry.at("name").get<std::string>() +
                                       "', expected '" + refs[i].name + "'");
      const auto file = (fs::path(dir) / entry.at("file").get<std::string>()).string();
      *refs[i].tensor = load_tensor(file);
      const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
      if (shape.size() != 2 || shape[0] != refs[i].tensor->rows() || shape[1] != refs[i].tensor->cols())
        throw FormatError(file, 0, "tensor shape disagrees with the manifest");
    }
  } catch (const json::exception& e) {
    throw FormatError(path, 0, e.what());
  }
  if (!all_finite(ck.state)) throw NumericError(dir + ": checkpoint holds non-finite values");
  return ck;
}

}  // namespace lmt
