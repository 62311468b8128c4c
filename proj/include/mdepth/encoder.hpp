#pragma once

#include <array>
#include <string>
#include <vector>

#include "mdepth/nn.hpp"
#include "mdepth/ops.hpp"

namespace mdepth {

// The four predictor feature maps at 1/4, 1/8, 1/16, 1/32 of the input with
// strictly increasing channel widths.
template <class T>
struct PyramidFeatures {
    std::array<Tensor<T>, 4> levels;

    const Tensor<T>& level(int l) const { return levels[static_cast<std::size_t>(l - 1)]; }
    Tensor<T>& level(int l) { return levels[static_cast<std::size_t>(l - 1)]; }
};

// Generic four-stage convolutional encoder. Every stage is a stack of
// stride-2 patchify convolutions (kernel = stride = 2) followed by
// per-channel normalization and GELU; stage 1 applies two of them to reach
// 1/4 resolution, later stages one each.
template <class T>
class Encoder {
public:
    Encoder() = default;

    Encoder(ParamStore<T>& store, const std::string& prefix, std::vector<std::int64_t> channels)
        : channels_(std::move(channels)) {
        if (channels_.size() != 4) {
            throw ConfigError("encoder needs exactly 4 channel widths, got " +
                              std::to_string(channels_.size()));
        }
        for (std::size_t i = 1; i < 4; ++i) {
            if (channels_[i] <= channels_[i - 1]) {
                throw ConfigError("encoder channel widths must be strictly increasing");
            }
        }
        auto make_conv = [&](const std::string& name, std::int64_t c_in, std::int64_t c_out) {
            const double std = std::sqrt(2.0 / static_cast<double>(c_in * 4));
            return store.create(prefix + "." + name + ".weight", {c_out, c_in, 2, 2}, std, true);
        };
        stem0_ = make_conv("stem0", 3, channels_[0]);
        stem0_norm_ = NormParams<T>(store, prefix + ".stem0.norm", channels_[0], true);
        stem1_ = make_conv("stem1", channels_[0], channels_[0]);
        stem1_norm_ = NormParams<T>(store, prefix + ".stem1.norm", channels_[0], true);
        for (int s = 0; s < 3; ++s) {
            const std::string name = "down" + std::to_string(s + 2);
            down_[s] = make_conv(name, channels_[s], channels_[s + 1]);
            down_norm_[s] = NormParams<T>(store, prefix + "." + name + ".norm", channels_[s + 1], true);
        }
    }

    const std::vector<std::int64_t>& channels() const { return channels_; }

    PyramidFeatures<T> encode(const Tensor<T>& image) const {
        if (image.rank() != 3 || image.extent(0) != 3) {
            throw ConfigError("encoder input must be 3xHxW, got " + shape_str(image.shape()));
        }
        const std::int64_t h = image.extent(1), w = image.extent(2);
        if (h % 32 != 0 || w % 32 != 0) {
            throw ConfigError("encoder input extents must be divisible by 32, got " +
                              std::to_string(h) + "x" + std::to_string(w));
        }
        for (std::int64_t i = 0; i < image.numel(); ++i) {
            const T v = image.data()[i];
            if (v < T(0) || v > T(1)) {
                throw ConfigError("encoder input pixels must lie in [0,1]");
            }
        }
        auto block = [](const Tensor<T>& x, const Tensor<T>& k, const NormParams<T>& n) {
            return ops::gelu(ops::channel_norm(ops::conv2d(x, k, 2, 0), n.gamma, n.beta));
        };
        PyramidFeatures<T> pyr;
        Tensor<T> x = block(image, stem0_, stem0_norm_);
        x = block(x, stem1_, stem1_norm_);
        pyr.levels[0] = x;
        for (int s = 0; s < 3; ++s) {
            x = block(x, down_[s], down_norm_[s]);
            pyr.levels[static_cast<std::size_t>(s + 1)] = x;
        }
        return pyr;
    }

private:
    std::vector<std::int64_t> channels_;
    Tensor<T> stem0_, stem1_;
    NormParams<T> stem0_norm_, stem1_norm_;
    std::array<Tensor<T>, 3> down_;
    std::array<NormParams<T>, 3> down_norm_;
};

}  // namespace mdepth
