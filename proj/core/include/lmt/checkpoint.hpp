#pragma once

#include <cstdint>
#include <string>

#include "lmt/tiny_mlm.hpp"

namespace lmt {

struct Checkpoint {
  ModelState<float> state;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

/// Directory layout: manifest.json plus one float32 tensor file per
/// parameter (`<name>.bin`, binary vector format without tokens). The
/// manifest holds the model config, tensor names and shapes, the step count
/// and the RNG state. Training RNG is stateless, so (seed, step) is the
/// whole state.
void save_checkpoint(const ModelState<float>& state, const std::string& dir, std::uint64_t step,
                     std::uint64_t seed);
Checkpoint load_checkpoint(const std::string& dir);

std::string model_config_json(const ModelConfig& config);

}  // namespace lmt
