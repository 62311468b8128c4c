#pragma once

#include <array>
#include <string>
#include <vector>

#include "mdepth/encoder.hpp"
#include "mdepth/nn.hpp"
#include "mdepth/ops.hpp"

namespace mdepth {

// Metric depth values in meters, squashed into [d_min, d_max] by design.
template <class T>
struct DepthMap {
    Tensor<T> values;  // 1 x H x W
    T d_min = T(0.1);
    T d_max = T(10);
};

// Per-scale convolutional heads (two 3x3 convs down to one channel), each
// resized to full resolution and squashed into the depth range; the final
// prediction is the arithmetic mean of the four per-scale maps in depth
// space.
template <class T>
class Decoder {
public:
    Decoder() = default;

    Decoder(ParamStore<T>& store, const std::string& prefix, const std::vector<std::int64_t>& channels,
            std::int64_t mid, T d_min, T d_max)
        : d_min_(d_min), d_max_(d_max) {
        if (channels.size() != 4) throw ConfigError("decoder needs 4 channel widths");
        if (!(d_min > T(0)) || !(d_max > d_min)) {
            throw ConfigError("depth range requires 0 < d_min < d_max");
        }
        for (int l = 0; l < 4; ++l) {
            const std::string lp = prefix + ".l" + std::to_string(l + 1);
            const std::int64_t c = channels[static_cast<std::size_t>(l)];
            conv1_[l] = store.create(lp + ".conv1.weight", {mid, c, 3, 3},
                                     std::sqrt(2.0 / static_cast<double>(c * 9)), true);
            bias1_[l] = store.create(lp + ".conv1.bias", {mid}, 0.0, true);
            conv2_[l] = store.create(lp + ".conv2.weight", {1, mid, 3, 3},
                                     std::sqrt(2.0 / static_cast<double>(mid * 9)), true);
            bias2_[l] = store.create(lp + ".conv2.bias", {1}, 0.0, true);
        }
    }

    T d_min() const { return d_min_; }
    T d_max() const { return d_max_; }

    DepthMap<T> decode(const PyramidFeatures<T>& pyramid) const {
        const std::int64_t h = pyramid.level(1).extent(1) * 4;
        const std::int64_t w = pyramid.level(1).extent(2) * 4;
        Tensor<T> acc;
        for (int l = 1; l <= 4; ++l) {
            const Tensor<T>& f = pyramid.level(l);
            if (f.rank() != 3) throw UsageError("decoder expects CxHxW feature maps");
            Tensor<T> x = ops::gelu(ops::add_channel_bias(
                ops::conv2d(f, conv1_[l - 1], 1, 1), bias1_[l - 1]));
            Tensor<T> logits = ops::add_channel_bias(ops::conv2d(x, conv2_[l - 1], 1, 1),
                                                     bias2_[l - 1]);
            Tensor<T> full = ops::bilinear_resize(logits, h, w);
            Tensor<T> squashed =
                ops::add_const(ops::scale(ops::sigmoid(full), d_max_ - d_min_), d_min_);
            acc = (l == 1) ? squashed : ops::add(acc, squashed);
        }
        DepthMap<T> out;
        out.values = ops::scale(acc, T(0.25));
        out.d_min = d_min_;
        out.d_max = d_max_;
        return out;
    }

private:
    T d_min_ = T(0.1), d_max_ = T(10);
    std::array<Tensor<T>, 4> conv1_, bias1_, conv2_, bias2_;
};

}  // namespace mdepth
