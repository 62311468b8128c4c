#pragma once

#include <filesystem>

#include "mdepth/config.hpp"
#include "mdepth/model.hpp"
#include "mdepth/optim.hpp"

namespace mdepth {

// On-disk checkpoint: params/<name>.wtns for every model tensor (frozen
// included, so a checkpoint is self-contained), opt/<name>.{m,v}.wtns for the
// trainable set, and manifest.json holding names, shapes, the step counter,
// the resolved config, its hash, and the frozen-enhancer checksum.
void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                     const OptimizerState<float>* opt_state, std::int64_t step,
                     const RunConfig& config);

// The config embedded in a checkpoint manifest (used to rebuild the model).
RunConfig checkpoint_config(const std::filesystem::path& dir);
std::int64_t checkpoint_step(const std::filesystem::path& dir);

// Restores parameter values (and optimizer state when requested) into a
// model built from the same config. Every manifest entry must match an
// existing tensor by name and shape.
void load_checkpoint(const std::filesystem::path& dir, Model<float>& model,
                     OptimizerState<float>* opt_state);

}  // namespace mdepth
