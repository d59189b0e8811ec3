// SPDX-License-Identifier: Apache-2.0
// Checkpoint container: run config snapshot, named parameter tensors,
// optimizer moments, RNG state, and the global step. Little-endian binary;
// save -> load -> save is byte-identical.

#pragma once

#include <cstdint>
#include <string>

#include "diffpoint/config.hpp"
#include "diffpoint/optim.hpp"
#include "diffpoint/params.hpp"
#include "diffpoint/rng.hpp"

namespace diffpoint {

struct TrainState {
  RunConfig config;
  ParamStore params;
  AdamW opt;
  SeededRng rng{0};
  std::uint64_t step = 0;
};

void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path);

}  // namespace diffpoint
