#pragma once

// Checkpoint file: a plain-text header
//
//   vfm-checkpoint
//   version 1
//   seed <u64>
//   config_hash <hex>
//   step <u64>
//   rng <engine state>
//   config <single-line json>
//   tensors <count>
//   tensor <name> <rows> <cols>      (one line per tensor)
//   end
//
// followed by each tensor's values as little-endian float64, in header
// order. Adam moments are stored as extra tensors "adam_m/<name>" and
// "adam_v/<name>".

#include <cstdint>
#include <filesystem>
#include <string>

#include "vfm/ad/param_store.hpp"

namespace vfm::ad {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::uint64_t step = 0;
  std::string rng_state;
  std::string config_json = "{}";
};

struct Checkpoint {
  CheckpointHeader header;
  ParamStore params;
};

std::string serialize_checkpoint(const CheckpointHeader& header, const ParamStore& params);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const ParamStore& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vfm::ad
