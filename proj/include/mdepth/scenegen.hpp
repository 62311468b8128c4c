#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mdepth/tensor.hpp"

namespace mdepth {

// Procedural scene parameters. Resolutions follow the encoder rule (divisible
// by 32); depth range is the metric range the renderer clamps into.
struct SceneConfig {
    std::int64_t height = 224;
    std::int64_t width = 224;
    double d_min = 0.1;
    double d_max = 10.0;
    std::int64_t n_objects = 6;

    bool operator==(const SceneConfig&) const = default;
};

// One RGB-D training record: shaded image, metric depth, sensor-style
// validity mask, and the seed that reproduces all three bit-exactly.
struct DepthSample {
    Tensor<float> rgb;    // 3 x H x W in [0,1]
    Tensor<float> depth;  // 1 x H x W meters
    Mask valid;           // H x W
    std::uint64_t seed = 0;
    SceneConfig config;
};

// Renders a tilted ground plane plus spheres and boxes under a fixed pinhole
// camera (focal = W, centered principal point). Shading is a deterministic
// function of depth, surface normal, and albedo. Identical seed + config
// yields bitwise identical output.
DepthSample generate_sample(std::uint64_t seed, const SceneConfig& config);

// Directory layout: rgb.wtns, depth.wtns, valid.wtns, meta.json. Round trips
// are bit-exact; meta.json records seed, config, and a content checksum so a
// tampered or mismatched sample is detectable by regeneration.
void write_sample(const DepthSample& sample, const std::filesystem::path& dir);
DepthSample read_sample(const std::filesystem::path& dir);

std::uint64_t sample_checksum(const DepthSample& sample);

}  // namespace mdepth
