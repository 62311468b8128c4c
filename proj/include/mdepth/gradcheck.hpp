#pragma once

#include <cmath>
#include <cstdint>
#include <functional>

#include "mdepth/tensor.hpp"

namespace mdepth {

// Worst-element comparison between an analytic gradient and central
// differences. rel uses |a - n| / max(1, |a|, |n|) so near-zero entries are
// judged on the absolute scale where finite differencing bottoms out.
struct GradReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    std::int64_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;

    void fold(double a, double n, std::int64_t index) {
        const double abs_err = std::abs(a - n);
        const double rel = abs_err / std::max({1.0, std::abs(a), std::abs(n)});
        if (rel > max_rel_err) {
            max_rel_err = rel;
            worst_index = index;
            analytic = a;
            numeric = n;
        }
        max_abs_err = std::max(max_abs_err, abs_err);
    }

    void merge(const GradReport& other) {
        max_abs_err = std::max(max_abs_err, other.max_abs_err);
        if (other.max_rel_err > max_rel_err) {
            max_rel_err = other.max_rel_err;
            worst_index = other.worst_index;
            analytic = other.analytic;
            numeric = other.numeric;
        }
    }
};

using ScalarFn = std::function<Tensor<double>(const Tensor<double>&)>;

// Central-difference check of a deterministic tensor-to-scalar function
// against its analytic gradient at x. The baseline is evaluated twice; any
// disagreement means the function is unusable for differencing and raises a
// harness error.
inline GradReport grad_check(const ScalarFn& f, const Tensor<double>& x, double eps) {
    if (!(eps > 0.0)) throw HarnessError("grad_check: eps must be positive");

    Tensor<double> probe = x.clone();
    probe.set_requires_grad(true);

    {
        NoGradGuard ng;
        const double once = f(probe).item();
        const double twice = f(probe).item();
        if (once != twice) {
            throw HarnessError("grad_check: target function is not deterministic (" +
                               std::to_string(once) + " vs " + std::to_string(twice) + ")");
        }
    }

    // A constant f never routes gradient to the probe; its analytic gradient
    // is identically zero.
    Tensor<double> loss = f(probe);
    if (loss.requires_grad()) loss.backward();
    std::vector<double> analytic = probe.grad();
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(x.numel()), 0.0);

    GradReport report;
    Tensor<double> work = x.clone();
    NoGradGuard ng;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double keep = work.mut_data()[i];
        work.mut_data()[i] = keep + eps;
        const double plus = f(work).item();
        work.mut_data()[i] = keep - eps;
        const double minus = f(work).item();
        work.mut_data()[i] = keep;
        const double numeric = (plus - minus) / (2.0 * eps);
        report.fold(analytic[static_cast<std::size_t>(i)], numeric, i);
    }
    return report;
}

}  // namespace mdepth
