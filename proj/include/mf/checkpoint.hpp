#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mf/network.hpp"
#include "mf/optim.hpp"

namespace mf {

// Self-describing binary container: magic "MFCK", version u32 LE, a
// length-prefixed UTF-8 config blob (JSON: model, optimizer, RNG state, Adam
// presence), tensor count u32, then per tensor: name (u16 length + UTF-8),
// rank u8, dims u32 each, payload as little-endian float32.
struct Checkpoint {
  std::uint32_t version = 1;
  ModelConfig model;
  OptimConfig optim;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_draws = 0;
  bool has_adam = false;
  long long adam_step_count = 0;

  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Entry> tensors;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

// Validates magic, version, config blob, the tensor table, and the name
// schema implied by the stored ModelConfig (unknown or missing names are
// FormatErrors) before returning.
Checkpoint load_checkpoint(const std::string& path);

// Bridges between the container and live training state.
Checkpoint make_checkpoint(const ModelConfig& model, const OptimConfig& optim,
                           const Parameters<float>& params,
                           const AdamState<float>* adam, std::uint64_t rng_seed,
                           std::uint64_t rng_draws);
Parameters<float> parameters_from_checkpoint(const Checkpoint& ckpt);
AdamState<float> adam_from_checkpoint(const Checkpoint& ckpt);

// Config JSON helpers (also used by the CLI --config file).
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace mf
