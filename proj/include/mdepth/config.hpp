#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mdepth/model.hpp"
#include "mdepth/optim.hpp"

namespace mdepth {

// The complete, explicit run description. Whatever a user config omits is
// resolved against these defaults; serialized configs (and the copies
// embedded in checkpoint manifests) always carry every field.
struct RunConfig {
    std::uint64_t seed = 1;
    std::int64_t height = 224;
    std::int64_t width = 224;
    std::vector<std::int64_t> encoder_channels = {32, 64, 128, 256};

    std::int64_t enhancer_patch = 14;
    std::int64_t enhancer_width = 64;
    std::int64_t enhancer_heads = 4;
    std::int64_t enhancer_layers = 8;
    // Optional WTNS1 weight directory replacing the random frozen surrogate.
    std::string enhancer_weights_dir;

    std::int64_t n_patterns = 8;
    PeiToggles toggles;
    std::int64_t decoder_mid = 32;

    AdamWOptions optimizer;  // lr 2e-3, betas 0.9/0.999, wd 0.01

    std::int64_t epochs = 20;
    std::int64_t warmup_epochs = 3;
    std::int64_t batch_size = 4;
    // Step-count overrides; <= 0 derives them from the epoch schedule.
    std::int64_t total_steps_override = 0;
    std::int64_t warmup_steps_override = -1;

    double loss_lambda = 0.5;
    double d_min = 0.1;
    double d_max = 10.0;
    double eval_cap = 10.0;
    double clip_norm = 1.0;

    std::string dataset_dir;
    std::string output_dir = "runs/default";
    std::int64_t checkpoint_every_steps = 0;  // 0 = final checkpoint only
    std::int64_t log_every_steps = 10;
    bool deterministic = true;

    ModelConfig model_config() const {
        ModelConfig m;
        m.height = height;
        m.width = width;
        m.encoder_channels = encoder_channels;
        m.enhancer.patch = enhancer_patch;
        m.enhancer.width = enhancer_width;
        m.enhancer.heads = enhancer_heads;
        m.enhancer.layers = enhancer_layers;
        m.n_patterns = n_patterns;
        m.toggles = toggles;
        m.decoder_mid = decoder_mid;
        m.d_min = d_min;
        m.d_max = d_max;
        return m;
    }

    void validate() const {
        model_config().validate();
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (warmup_epochs < 0 || warmup_epochs >= epochs) {
            throw ConfigError("warmup_epochs must satisfy 0 <= warmup < epochs");
        }
        if (!(loss_lambda >= 0.0 && loss_lambda <= 1.0)) {
            throw ConfigError("loss lambda must lie in [0,1]");
        }
        if (!(eval_cap > 0.0)) throw ConfigError("eval cap must be positive");
        if (total_steps_override < 0) throw ConfigError("total_steps_override must be >= 0");
    }
};

// JSON round trip: parsing accepts partial documents resolved against the
// defaults; serialization always emits the complete record with sorted keys,
// so re-serializing a parsed config reproduces the bytes.
std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);

// Digest of the canonical serialization; embedded in checkpoint manifests.
std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace mdepth
