#pragma once

#include <filesystem>
#include <string>

#include "mdepth/tensor.hpp"

namespace mdepth {

// "WTNS1" container: magic bytes, 1-byte dtype code (0=f32, 1=f64), 4-byte
// little-endian rank, rank x 8-byte little-endian extents, then the row-major
// little-endian payload. Used by checkpoints, weight loading, and datasets.

struct AnyTensor {
    Dtype dtype = Dtype::f32;
    Shape shape;
    std::vector<float> f32;
    std::vector<double> f64;

    std::int64_t numel() const { return shape_numel(shape); }

    template <class T>
    Tensor<T> to() const {
        std::vector<T> data(static_cast<std::size_t>(numel()));
        if (dtype == Dtype::f32) {
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(f32[i]);
        } else {
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(f64[i]);
        }
        return Tensor<T>(shape, std::move(data), false);
    }
};

void save_wtns(const std::filesystem::path& path, const Tensor<float>& t);
void save_wtns(const std::filesystem::path& path, const Tensor<double>& t);
AnyTensor load_wtns(const std::filesystem::path& path);

template <class T>
Tensor<T> load_wtns_as(const std::filesystem::path& path) {
    return load_wtns(path).to<T>();
}

// Digest of a tensor's identity and payload bytes; same pattern is used for
// the frozen-enhancer checksum and dataset content checksums.
std::uint64_t wtns_digest(const Tensor<float>& t, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t wtns_digest(const Tensor<double>& t, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace mdepth
