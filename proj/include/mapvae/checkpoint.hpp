// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "mapvae/diffcore.hpp"

namespace mapvae::diffcore {

// Versioned binary map of all parameter blocks plus optimizer state. Doubles
// are stored raw, so a save/load cycle is bit-exact on the same platform.
struct Checkpoint {
  ParamSet params;
  std::string config_text;  // flat key=value snapshot
  std::string rng_state;    // serialized engine state, empty if not saved
  std::uint64_t step = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mapvae::diffcore
