#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace mdepth {

// The full per-evaluation record behind the usual depth benchmark columns.
struct MetricsReport {
    double abs_rel = 0.0;
    double sq_rel = 0.0;
    double rmse = 0.0;
    double rmse_log = 0.0;
    double log10 = 0.0;
    double silog = 0.0;
    double delta1 = 0.0;
    double delta2 = 0.0;
    double delta3 = 0.0;
    std::int64_t valid_pixel_count = 0;
};

inline constexpr std::array<double, 3> kDeltaThresholds = {1.25, 1.25 * 1.25,
                                                           1.25 * 1.25 * 1.25};

// Computes the metric suite over pixels that are flagged valid and whose
// ground truth does not exceed cap; predictions are clamped to [d_min, cap]
// first. delta_k counts max(p/g, g/p) < threshold_k. SILog reports
// sqrt(mean(d^2) - (mean d)^2) over log residuals.
MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> gt,
                              std::span<const std::uint8_t> valid, double cap, double d_min,
                              const std::array<double, 3>& thresholds = kDeltaThresholds);

// JSON object string with every field.
std::string metrics_to_json(const MetricsReport& r);

// Aligned two-line table; column order AbsRel, RMSE, log10, SqRel, d1, d2, d3.
std::string metrics_table(const MetricsReport& r);
std::string metrics_table_header();
std::string metrics_table_row(const MetricsReport& r);

}  // namespace mdepth
