#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mdepth/ops.hpp"
#include "mdepth/rng.hpp"
#include "mdepth/tensor.hpp"

namespace mdepth {

// Flat registry of named parameters. Every parameter draws its init from a
// seed derived from (global seed, name), so initialization is independent of
// construction order and stable across runs.
template <class T>
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

    Tensor<T> create(const std::string& name, const Shape& shape, double stddev, bool trainable) {
        CounterRng rng(derive_seed(seed_, name));
        Tensor<T> t = stddev == 0.0 ? Tensor<T>::zeros(shape)
                                    : Tensor<T>::randn(shape, rng, static_cast<T>(stddev));
        t.set_requires_grad(trainable);
        items_.emplace_back(name, t);
        return t;
    }

    Tensor<T> create_const(const std::string& name, const Shape& shape, T value, bool trainable) {
        Tensor<T> t = Tensor<T>::full(shape, value);
        t.set_requires_grad(trainable);
        items_.emplace_back(name, t);
        return t;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& named() const { return items_; }

    std::vector<Tensor<T>> trainable() const {
        std::vector<Tensor<T>> out;
        for (const auto& [name, t] : items_)
            if (t.requires_grad()) out.push_back(t);
        return out;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_trainable() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (const auto& item : items_)
            if (item.second.requires_grad()) out.push_back(item);
        return out;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_frozen() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (const auto& item : items_)
            if (!item.second.requires_grad()) out.push_back(item);
        return out;
    }

    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }

    void zero_grads() {
        for (auto& [n, t] : items_) t.zero_grad();
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<std::pair<std::string, Tensor<T>>> items_;
};

// y = x W + b with W stored input x output.
template <class T>
class Linear {
public:
    Linear() = default;

    Linear(ParamStore<T>& store, const std::string& prefix, std::int64_t in, std::int64_t out,
           bool trainable, double stddev = -1.0) {
        const double s = stddev >= 0.0 ? stddev : 1.0 / std::sqrt(static_cast<double>(in));
        weight_ = store.create(prefix + ".weight", {in, out}, s, trainable);
        bias_ = store.create(prefix + ".bias", {out}, 0.0, trainable);
    }

    Tensor<T> apply(const Tensor<T>& x) const {
        return ops::add_row_bias(ops::matmul(x, weight_), bias_);
    }

    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }

private:
    Tensor<T> weight_, bias_;
};

// Multi-head attention with learned q/k/v/output projections. Queries may
// live in a different input width than keys/values; attention itself runs in
// `inner`, which must be divisible by the head count.
template <class T>
class MultiheadAttention {
public:
    MultiheadAttention() = default;

    MultiheadAttention(ParamStore<T>& store, const std::string& prefix, std::int64_t query_dim,
                       std::int64_t kv_dim, std::int64_t inner, std::int64_t heads, bool trainable,
                       double stddev = -1.0)
        : heads_(heads) {
        if (inner % heads != 0) {
            throw ConfigError("attention width " + std::to_string(inner) +
                              " not divisible by heads " + std::to_string(heads) + " (" + prefix +
                              ")");
        }
        wq_ = Linear<T>(store, prefix + ".q", query_dim, inner, trainable, stddev);
        wk_ = Linear<T>(store, prefix + ".k", kv_dim, inner, trainable, stddev);
        wv_ = Linear<T>(store, prefix + ".v", kv_dim, inner, trainable, stddev);
        out_w_ = store.create(prefix + ".o.weight", {inner, inner},
                              stddev >= 0.0 ? stddev : 1.0 / std::sqrt(static_cast<double>(inner)),
                              trainable);
        out_b_ = store.create(prefix + ".o.bias", {inner}, 0.0, trainable);
    }

    // queries: Mq x query_dim, keys/values source: Mk x kv_dim.
    Tensor<T> apply(const Tensor<T>& queries, const Tensor<T>& kv, const Mask* mask = nullptr) const {
        Tensor<T> q = wq_.apply(queries);
        Tensor<T> k = wk_.apply(kv);
        Tensor<T> v = wv_.apply(kv);
        return ops::masked_attention(q, k, v, mask, heads_, out_w_, out_b_);
    }

    std::int64_t heads() const { return heads_; }

private:
    std::int64_t heads_ = 1;
    Linear<T> wq_, wk_, wv_;
    Tensor<T> out_w_, out_b_;
};

// Affine normalization parameter pair.
template <class T>
struct NormParams {
    Tensor<T> gamma, beta;

    NormParams() = default;
    NormParams(ParamStore<T>& store, const std::string& prefix, std::int64_t width, bool trainable) {
        gamma = store.create_const(prefix + ".gamma", {width}, T(1), trainable);
        beta = store.create(prefix + ".beta", {width}, 0.0, trainable);
    }
};

}  // namespace mdepth
