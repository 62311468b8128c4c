#include "mdepth/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mdepth/errors.hpp"

namespace mdepth {

MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> gt,
                              std::span<const std::uint8_t> valid, double cap, double d_min,
                              const std::array<double, 3>& thresholds) {
    if (pred.size() != gt.size() || pred.size() != valid.size()) {
        throw DimensionError("compute_metrics: pred/gt/valid sizes differ");
    }
    MetricsReport r;
    double sum_abs_rel = 0.0, sum_sq_rel = 0.0, sum_sq = 0.0, sum_sq_log = 0.0;
    double sum_log10 = 0.0, sum_d = 0.0, sum_d2 = 0.0;
    std::int64_t hits1 = 0, hits2 = 0, hits3 = 0, n = 0;

    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!valid[i]) continue;
        const double g = gt[i];
        if (!(g > 0.0)) {
            throw NumericError("compute_metrics: non-positive ground truth on valid pixel " +
                               std::to_string(i));
        }
        if (g > cap) continue;
        const double p = std::clamp(pred[i], d_min, cap);
        const double diff = p - g;
        sum_abs_rel += std::abs(diff) / g;
        sum_sq_rel += diff * diff / g;
        sum_sq += diff * diff;
        const double dl = std::log(p) - std::log(g);
        sum_sq_log += dl * dl;
        sum_log10 += std::abs(std::log10(p) - std::log10(g));
        sum_d += dl;
        sum_d2 += dl * dl;
        const double ratio = std::max(p / g, g / p);
        if (ratio < thresholds[0]) ++hits1;
        if (ratio < thresholds[1]) ++hits2;
        if (ratio < thresholds[2]) ++hits3;
        ++n;
    }
    if (n == 0) throw EvalError("compute_metrics: zero valid pixels after capping");

    const double inv = 1.0 / static_cast<double>(n);
    r.abs_rel = sum_abs_rel * inv;
    r.sq_rel = sum_sq_rel * inv;
    r.rmse = std::sqrt(sum_sq * inv);
    r.rmse_log = std::sqrt(sum_sq_log * inv);
    r.log10 = sum_log10 * inv;
    const double mean_d = sum_d * inv;
    r.silog = std::sqrt(std::max(0.0, sum_d2 * inv - mean_d * mean_d));
    r.delta1 = static_cast<double>(hits1) * inv;
    r.delta2 = static_cast<double>(hits2) * inv;
    r.delta3 = static_cast<double>(hits3) * inv;
    r.valid_pixel_count = n;
    return r;
}

std::string metrics_to_json(const MetricsReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"abs_rel\":%.10g,\"sq_rel\":%.10g,\"rmse\":%.10g,\"rmse_log\":%.10g,"
                  "\"log10\":%.10g,\"silog\":%.10g,\"delta1\":%.10g,\"delta2\":%.10g,"
                  "\"delta3\":%.10g,\"valid_pixel_count\":%lld}",
                  r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.log10, r.silog, r.delta1, r.delta2,
                  r.delta3, static_cast<long long>(r.valid_pixel_count));
    return buf;
}

std::string metrics_table_header() {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%10s %10s %10s %10s %8s %8s %8s", "AbsRel", "RMSE", "log10",
                  "SqRel", "d1", "d2", "d3");
    return buf;
}

std::string metrics_table_row(const MetricsReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%10.4f %10.4f %10.4f %10.4f %8.4f %8.4f %8.4f", r.abs_rel,
                  r.rmse, r.log10, r.sq_rel, r.delta1, r.delta2, r.delta3);
    return buf;
}

std::string metrics_table(const MetricsReport& r) {
    return metrics_table_header() + "\n" + metrics_table_row(r) + "\n";
}

}  // namespace mdepth
