#pragma once

#include <cstdint>

#include "mdepth/ops.hpp"
#include "mdepth/tensor.hpp"

namespace mdepth {

// Scale-invariant log-depth loss over the valid pixels:
//   d_i = ln(pred_i) - ln(gt_i),  L = mean(d^2) - lambda * (mean d)^2.
// lambda = 1 makes the loss exactly invariant to uniform positive rescaling
// of the prediction. Differentiable w.r.t. pred; gt is treated as constant.
template <class T>
Tensor<T> si_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Mask& valid, T lambda) {
    if (pred.shape() != gt.shape()) {
        throw DimensionError("si_loss: pred " + shape_str(pred.shape()) + " vs gt " +
                             shape_str(gt.shape()));
    }
    const std::int64_t n = pred.numel();
    if (valid.rows * valid.cols != n) {
        throw DimensionError("si_loss: valid mask covers " +
                             std::to_string(valid.rows * valid.cols) + " pixels, maps have " +
                             std::to_string(n));
    }

    std::int64_t count = 0;
    std::vector<T> keep(static_cast<std::size_t>(n), T(0));
    std::vector<T> fill(static_cast<std::size_t>(n), T(1));
    std::vector<T> log_gt(static_cast<std::size_t>(n), T(0));
    for (std::int64_t i = 0; i < n; ++i) {
        if (!valid.data[static_cast<std::size_t>(i)]) continue;
        const T p = pred.data()[i];
        const T g = gt.data()[i];
        if (!(p > T(0)) || !(g > T(0))) {
            throw NumericError("si_loss: non-positive depth on valid pixel " + std::to_string(i));
        }
        keep[static_cast<std::size_t>(i)] = T(1);
        fill[static_cast<std::size_t>(i)] = T(0);
        log_gt[static_cast<std::size_t>(i)] = std::log(g);
        ++count;
    }
    if (count == 0) throw EvalError("si_loss: zero valid pixels");

    Tensor<T> keep_t(pred.shape(), std::move(keep));
    Tensor<T> fill_t(pred.shape(), std::move(fill));
    Tensor<T> log_gt_t(pred.shape(), std::move(log_gt));

    // Invalid pixels are rewritten to 1 before the log so they contribute an
    // exact zero to d; their gradient path is cut by the same rewrite.
    Tensor<T> safe_pred = ops::add(ops::mul(pred, keep_t), fill_t);
    Tensor<T> d = ops::sub(ops::log(safe_pred), log_gt_t);
    const T inv_count = T(1) / static_cast<T>(count);
    Tensor<T> mean_sq = ops::scale(ops::sum_all(ops::mul(d, d)), inv_count);
    Tensor<T> mean_d = ops::scale(ops::sum_all(d), inv_count);
    return ops::sub(mean_sq, ops::scale(ops::mul(mean_d, mean_d), lambda));
}

}  // namespace mdepth
