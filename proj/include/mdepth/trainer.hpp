#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mdepth/checkpoint.hpp"
#include "mdepth/config.hpp"
#include "mdepth/dataset.hpp"
#include "mdepth/gradcheck.hpp"
#include "mdepth/metrics.hpp"
#include "mdepth/model.hpp"

namespace mdepth {

// Linear warmup to base_lr over warmup_steps, then cosine decay to zero at
// total_steps. Continuous at the junction, non-negative everywhere.
double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
             double base_lr);

struct TrainResult {
    std::filesystem::path checkpoint_dir;
    std::int64_t steps = 0;
    double first_loss = 0.0;
    double final_loss = 0.0;
    std::uint64_t frozen_checksum_before = 0;
    std::uint64_t frozen_checksum_after = 0;
    std::vector<double> losses;
};

// Derived step counts for a config against a training-set size.
std::int64_t resolve_total_steps(const RunConfig& cfg, std::int64_t train_size);
std::int64_t resolve_warmup_steps(const RunConfig& cfg, std::int64_t train_size);

// Full training run: reads the dataset, builds the model, optimizes with
// AdamW under the warmup+cosine schedule, logs every step to
// <output_dir>/train_log.jsonl, and writes checkpoints (periodic plus final).
TrainResult train(const RunConfig& config);

// Training core over preloaded samples and an existing model; train() and
// the ablation driver share it.
TrainResult train_model(Model<float>& model, const RunConfig& config,
                        const std::vector<DepthSample>& samples,
                        const std::filesystem::path& output_dir);

// Mean of per-image metric reports over a sample list.
MetricsReport evaluate_model(const Model<float>& model, const std::vector<DepthSample>& samples,
                             double cap);

// Loads a checkpoint and evaluates the requested split of its dataset.
MetricsReport evaluate(const std::filesystem::path& checkpoint_dir, const std::string& split,
                       const std::string& dataset_override = "");

std::vector<DepthSample> load_split(const std::filesystem::path& dataset_dir,
                                    const std::string& split);

// The eight stage-toggle combinations, trained and evaluated in the standard
// row order (partition, enhance, pattern injection, image injection).
struct AblationRow {
    PeiToggles toggles;
    MetricsReport metrics;
    double final_loss = 0.0;
    bool loss_finite = true;
};

extern const std::array<PeiToggles, 8> kAblationGrid;

std::vector<AblationRow> ablate(const RunConfig& config);
std::string ablation_table(const std::vector<AblationRow>& rows);

// Inference: checkpoint + image tensor file in, depth.wtns + depth.pgm out.
// The PGM is 16-bit with header comments recording the metric scaling.
void infer(const std::filesystem::path& checkpoint_dir, const std::filesystem::path& image_path,
           const std::filesystem::path& out_dir);

void write_depth_pgm(const std::filesystem::path& path, const Tensor<float>& depth, float d_min,
                     float d_max);
Tensor<float> read_depth_pgm(const std::filesystem::path& path);

// Full-stack f64 gradient check: analytic gradients of
// si_loss(decode(pei(encode(image)))) for every trainable parameter element
// against central differences.
struct FullCheckResult {
    GradReport report;
    std::string worst_param;
    std::int64_t n_params = 0;
    std::int64_t n_tensors = 0;
    double seconds = 0.0;
};

FullCheckResult full_stack_gradcheck(const ModelConfig& cfg, std::uint64_t seed, double lambda,
                                     double eps);

}  // namespace mdepth
