#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>

#include "sarjepa/model.hpp"

namespace sarjepa {

struct CheckpointMeta {
  std::int64_t global_step = 0;
  /// Randomness is derived from (seed, step), so this fully describes it.
  std::uint64_t seed = 0;
  /// Free-form extras (feature kind, kernel bank, epoch).
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes `dir/manifest.json` and `dir/tensors.bin` (little-endian float32 in
/// manifest order). The directory is replaced atomically.
void save_checkpoint(const std::filesystem::path& dir, const ModelState<float>& state, const CheckpointMeta& meta);

struct Checkpoint {
  ModelState<float> state;
  CheckpointMeta meta;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// FNV-1a over the raw float bits of every tensor, in canonical order.
std::uint64_t state_hash(const ModelState<float>& state);

}  // namespace sarjepa
