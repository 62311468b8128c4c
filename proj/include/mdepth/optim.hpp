#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mdepth/tensor.hpp"

namespace mdepth {

// Per-parameter AdamW moments. Buffers are created for exactly the parameter
// set handed to the optimizer and stay aligned with it by index.
template <class T>
struct OptimizerState {
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
    std::int64_t step = 0;
};

struct AdamWOptions {
    double lr = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double eps = 1e-8;
};

template <class T>
OptimizerState<T> make_optimizer_state(const std::vector<Tensor<T>>& params) {
    OptimizerState<T> state;
    state.first_moment.reserve(params.size());
    state.second_moment.reserve(params.size());
    for (const auto& p : params) {
        state.first_moment.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
        state.second_moment.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }
    return state;
}

// One decoupled-weight-decay Adam update: bias-corrected moments drive the
// gradient step, decay is applied directly to the weights as w *= 1 - lr*wd.
template <class T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state,
                const AdamWOptions& opt) {
    if (state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw UsageError("adamw_step: optimizer state covers " +
                         std::to_string(state.first_moment.size()) + " parameters, model has " +
                         std::to_string(params.size()));
    }
    state.step += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(opt.beta1, static_cast<double>(state.step)));
    const T bc2 = T(1) - static_cast<T>(std::pow(opt.beta2, static_cast<double>(state.step)));
    const T lr = static_cast<T>(opt.lr);
    const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
    const T wd = static_cast<T>(opt.weight_decay), eps = static_cast<T>(opt.eps);

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& p = params[pi];
        auto& m = state.first_moment[pi];
        auto& v = state.second_moment[pi];
        if (static_cast<std::int64_t>(m.size()) != p.numel()) {
            throw UsageError("adamw_step: state/parameter shape mismatch at index " +
                             std::to_string(pi));
        }
        const std::vector<T>& g = p.grad();
        T* w = p.mut_data();
        const std::int64_t n = p.numel();
        if (g.empty()) {
            // No gradient reached this parameter this step; moments decay and
            // weight decay still applies.
            for (std::int64_t i = 0; i < n; ++i) {
                m[i] *= b1;
                v[i] *= b2;
                const T mhat = m[i] / bc1;
                const T vhat = v[i] / bc2;
                w[i] = w[i] * (T(1) - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
            }
            continue;
        }
        for (std::int64_t i = 0; i < n; ++i) {
            const T gi = g[i];
            m[i] = b1 * m[i] + (T(1) - b1) * gi;
            v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            w[i] = w[i] * (T(1) - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// Global-norm gradient clipping across the whole parameter set; returns the
// pre-clip norm.
template <class T>
double clip_global_norm(std::vector<Tensor<T>>& params, double max_norm) {
    double sum_sq = 0.0;
    for (auto& p : params) {
        const auto& g = p.grad();
        for (const T v : g) sum_sq += static_cast<double>(v) * static_cast<double>(v);
    }
    const double norm = std::sqrt(sum_sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (auto& v : p.mut_grad()) v *= scale;
        }
    }
    return norm;
}

}  // namespace mdepth
