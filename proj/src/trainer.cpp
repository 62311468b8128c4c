#include "mdepth/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mdepth/loss.hpp"
#include "mdepth/tensor_io.hpp"
#include "mdepth/weights_io.hpp"

namespace mdepth {

double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
             double base_lr) {
    if (step < 0 || step > total_steps) {
        throw UsageError("lr_at: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(total_steps) + "]");
    }
    if (warmup_steps < 0 || warmup_steps >= total_steps) {
        throw UsageError("lr_at: warmup_steps must satisfy 0 <= warmup < total");
    }
    if (warmup_steps > 0 && step <= warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (step == total_steps) return 0.0;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

std::int64_t resolve_total_steps(const RunConfig& cfg, std::int64_t train_size) {
    if (cfg.total_steps_override > 0) return cfg.total_steps_override;
    const std::int64_t per_epoch = (train_size + cfg.batch_size - 1) / cfg.batch_size;
    return cfg.epochs * per_epoch;
}

std::int64_t resolve_warmup_steps(const RunConfig& cfg, std::int64_t train_size) {
    if (cfg.warmup_steps_override >= 0) return cfg.warmup_steps_override;
    const std::int64_t per_epoch = (train_size + cfg.batch_size - 1) / cfg.batch_size;
    return cfg.warmup_epochs * per_epoch;
}

std::vector<DepthSample> load_split(const std::filesystem::path& dataset_dir,
                                    const std::string& split) {
    const DatasetIndex index = read_index(dataset_dir);
    std::vector<DepthSample> out;
    for (const auto& dir : index.dirs_for(split)) {
        out.push_back(read_sample(dataset_dir / dir));
    }
    return out;
}

namespace {

// Deterministic per-epoch sample order.
std::vector<std::int64_t> epoch_order(std::uint64_t seed, std::int64_t epoch, std::int64_t n) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    CounterRng rng(derive_seed(seed, "order-" + std::to_string(epoch)));
    for (std::int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(i + 1)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

Mask sample_valid_mask(const DepthSample& s) { return s.valid; }

}  // namespace

TrainResult train_model(Model<float>& model, const RunConfig& config,
                        const std::vector<DepthSample>& samples,
                        const std::filesystem::path& output_dir) {
    if (samples.empty()) throw UsageError("training split is empty");
    config.validate();

    const auto n = static_cast<std::int64_t>(samples.size());
    const std::int64_t total_steps = resolve_total_steps(config, n);
    const std::int64_t warmup_steps = resolve_warmup_steps(config, n);
    if (warmup_steps >= total_steps) {
        throw ConfigError("resolved warmup steps must stay below total steps");
    }

    std::filesystem::create_directories(output_dir);
    std::ofstream log(output_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write " + (output_dir / "train_log.jsonl").string());

    std::vector<Tensor<float>> params = model.trainable_parameters();
    OptimizerState<float> opt_state = make_optimizer_state(params);

    TrainResult result;
    result.frozen_checksum_before = model.frozen_checksum();
    result.steps = total_steps;
    result.losses.reserve(static_cast<std::size_t>(total_steps));

    std::vector<std::int64_t> order;
    std::int64_t cursor = 0, epoch = 0;

    for (std::int64_t step = 0; step < total_steps; ++step) {
        // Assemble the batch indices for this step.
        const std::int64_t batch_n = std::min<std::int64_t>(config.batch_size, n);
        std::vector<std::int64_t> batch;
        while (static_cast<std::int64_t>(batch.size()) < batch_n) {
            if (cursor >= static_cast<std::int64_t>(order.size())) {
                order = epoch_order(config.seed, epoch++, n);
                cursor = 0;
            }
            batch.push_back(order[static_cast<std::size_t>(cursor++)]);
        }

        Tensor<float> total_loss;
        try {
            for (std::size_t bi = 0; bi < batch.size(); ++bi) {
                const DepthSample& s = samples[static_cast<std::size_t>(batch[bi])];
                Tensor<float> image = s.rgb;  // constant leaf
                DepthMap<float> pred = model.forward(image);
                Tensor<float> loss = si_loss(pred.values, s.depth, sample_valid_mask(s),
                                             static_cast<float>(config.loss_lambda));
                total_loss = bi == 0 ? loss : ops::add(total_loss, loss);
            }
            total_loss = ops::scale(total_loss, 1.0f / static_cast<float>(batch.size()));
        } catch (const NumericError& e) {
            std::ostringstream seeds;
            for (auto i : batch) seeds << samples[static_cast<std::size_t>(i)].seed << " ";
            throw NumericError("non-finite loss at step " + std::to_string(step) + " (" + e.what() +
                               "); batch sample seeds: " + seeds.str());
        }

        const double loss_value = static_cast<double>(total_loss.item());
        if (!std::isfinite(loss_value)) {
            std::ostringstream seeds;
            for (auto i : batch) seeds << samples[static_cast<std::size_t>(i)].seed << " ";
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               "; batch sample seeds: " + seeds.str());
        }
        if (step == 0) result.first_loss = loss_value;
        result.final_loss = loss_value;
        result.losses.push_back(loss_value);

        total_loss.backward();
        clip_global_norm(params, config.clip_norm);

        AdamWOptions opt = config.optimizer;
        opt.lr = lr_at(step, total_steps, warmup_steps, config.optimizer.lr);
        adamw_step(params, opt_state, opt);
        model.store().zero_grads();

        log << "{\"step\":" << step << ",\"lr\":" << opt.lr << ",\"loss\":" << loss_value << "}\n";
        if (config.log_every_steps > 0 && step % config.log_every_steps == 0) {
            std::printf("step %6lld  lr %.3e  loss %.6f\n", static_cast<long long>(step), opt.lr,
                        loss_value);
            std::fflush(stdout);
        }

        if (config.checkpoint_every_steps > 0 && (step + 1) % config.checkpoint_every_steps == 0 &&
            step + 1 < total_steps) {
            save_checkpoint(output_dir / ("checkpoint-" + std::to_string(step + 1)), model,
                            &opt_state, step + 1, config);
        }
    }

    result.frozen_checksum_after = model.frozen_checksum();
    result.checkpoint_dir = output_dir / "checkpoint-final";
    save_checkpoint(result.checkpoint_dir, model, &opt_state, total_steps, config);
    return result;
}

TrainResult train(const RunConfig& config) {
    config.validate();
    if (config.dataset_dir.empty() || !std::filesystem::exists(config.dataset_dir)) {
        throw ConfigError("dataset directory does not exist: " + config.dataset_dir);
    }
    const std::vector<DepthSample> samples = load_split(config.dataset_dir, "train");
    if (samples.empty()) throw UsageError("dataset has no train split");
    for (const auto& s : samples) {
        if (s.config.height != config.height || s.config.width != config.width) {
            throw ConfigError("dataset resolution " + std::to_string(s.config.height) + "x" +
                              std::to_string(s.config.width) + " does not match config " +
                              std::to_string(config.height) + "x" + std::to_string(config.width));
        }
    }
    Model<float> model(config.seed, config.model_config());
    if (!config.enhancer_weights_dir.empty()) {
        if (!std::filesystem::exists(config.enhancer_weights_dir)) {
            throw ConfigError("enhancer weights directory does not exist: " +
                              config.enhancer_weights_dir);
        }
        model.enhancer().load_weights(config.enhancer_weights_dir);
    }
    return train_model(model, config, samples, config.output_dir);
}

MetricsReport evaluate_model(const Model<float>& model, const std::vector<DepthSample>& samples,
                             double cap) {
    if (samples.empty()) throw UsageError("evaluation split is empty");
    NoGradGuard ng;
    MetricsReport total;
    for (const auto& s : samples) {
        DepthMap<float> pred = model.forward(s.rgb);
        std::vector<double> p(pred.values.data(), pred.values.data() + pred.values.numel());
        std::vector<double> g(s.depth.data(), s.depth.data() + s.depth.numel());
        MetricsReport r =
            compute_metrics(p, g, s.valid.data, cap, static_cast<double>(pred.d_min));
        total.abs_rel += r.abs_rel;
        total.sq_rel += r.sq_rel;
        total.rmse += r.rmse;
        total.rmse_log += r.rmse_log;
        total.log10 += r.log10;
        total.silog += r.silog;
        total.delta1 += r.delta1;
        total.delta2 += r.delta2;
        total.delta3 += r.delta3;
        total.valid_pixel_count += r.valid_pixel_count;
    }
    const double inv = 1.0 / static_cast<double>(samples.size());
    total.abs_rel *= inv;
    total.sq_rel *= inv;
    total.rmse *= inv;
    total.rmse_log *= inv;
    total.log10 *= inv;
    total.silog *= inv;
    total.delta1 *= inv;
    total.delta2 *= inv;
    total.delta3 *= inv;
    return total;
}

MetricsReport evaluate(const std::filesystem::path& checkpoint_dir, const std::string& split,
                       const std::string& dataset_override) {
    RunConfig cfg = checkpoint_config(checkpoint_dir);
    Model<float> model(cfg.seed, cfg.model_config());
    load_checkpoint(checkpoint_dir, model, nullptr);
    const std::string dataset = dataset_override.empty() ? cfg.dataset_dir : dataset_override;
    if (dataset.empty() || !std::filesystem::exists(dataset)) {
        throw ConfigError("dataset directory does not exist: " + dataset);
    }
    const auto samples = load_split(dataset, split);
    if (samples.empty()) throw UsageError("split '" + split + "' is empty");
    return evaluate_model(model, samples, cfg.eval_cap);
}

// Canonical ablation order: each row toggles (partition, enhance, pattern
// injection, image injection).
const std::array<PeiToggles, 8> kAblationGrid = {{
    {false, false, false, false},
    {false, true, true, false},
    {true, false, true, false},
    {false, true, false, true},
    {true, true, true, false},
    {true, true, false, true},
    {false, true, true, true},
    {true, true, true, true},
}};

std::vector<AblationRow> ablate(const RunConfig& config) {
    config.validate();
    if (config.dataset_dir.empty() || !std::filesystem::exists(config.dataset_dir)) {
        throw ConfigError("dataset directory does not exist: " + config.dataset_dir);
    }
    const auto train_samples = load_split(config.dataset_dir, "train");
    if (train_samples.empty()) throw UsageError("dataset has no train split");
    auto eval_samples = load_split(config.dataset_dir, "test");
    if (eval_samples.empty()) eval_samples = train_samples;

    std::vector<AblationRow> rows;
    for (std::size_t i = 0; i < kAblationGrid.size(); ++i) {
        RunConfig row_cfg = config;
        row_cfg.toggles = kAblationGrid[i];
        row_cfg.log_every_steps = 0;
        Model<float> model(row_cfg.seed, row_cfg.model_config());
        const auto out_dir =
            std::filesystem::path(config.output_dir) / ("ablate-row" + std::to_string(i + 1));
        AblationRow row;
        row.toggles = kAblationGrid[i];
        TrainResult tr = train_model(model, row_cfg, train_samples, out_dir);
        row.final_loss = tr.final_loss;
        row.loss_finite = true;
        for (double l : tr.losses) row.loss_finite = row.loss_finite && std::isfinite(l);
        row.metrics = evaluate_model(model, eval_samples, row_cfg.eval_cap);
        rows.push_back(row);
    }
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%3s %2s %2s %3s %3s %10s %10s %8s", "row", "P", "E", "PT",
                  "IT", "AbsRel", "RMSE", "d1");
    os << buf << "\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        std::snprintf(buf, sizeof(buf), "%3zu %2s %2s %3s %3s %10.4f %10.4f %8.4f", i + 1,
                      r.toggles.partition ? "+" : "-", r.toggles.enhance ? "+" : "-",
                      r.toggles.inject_patterns ? "+" : "-", r.toggles.inject_image ? "+" : "-",
                      r.metrics.abs_rel, r.metrics.rmse, r.metrics.delta1);
        os << buf << "\n";
    }
    return os.str();
}

void write_depth_pgm(const std::filesystem::path& path, const Tensor<float>& depth, float d_min,
                     float d_max) {
    if (depth.rank() != 3 || depth.extent(0) != 1) {
        throw UsageError("depth map must be 1xHxW, got " + shape_str(depth.shape()));
    }
    const std::int64_t h = depth.extent(1), w = depth.extent(2);
    const double scale = (static_cast<double>(d_max) - static_cast<double>(d_min)) / 65535.0;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P5\n";
    out << "# scale meters_per_unit=" << std::scientific << scale << "\n";
    out << "# offset_meters=" << std::scientific << static_cast<double>(d_min) << "\n";
    out << w << " " << h << "\n65535\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 2);
    for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) {
            const double v = (static_cast<double>(depth.data()[r * w + c]) - d_min) / scale;
            const auto g = static_cast<std::uint16_t>(
                std::clamp(std::llround(v), 0ll, 65535ll));
            row[static_cast<std::size_t>(c) * 2] = static_cast<unsigned char>(g >> 8);
            row[static_cast<std::size_t>(c) * 2 + 1] = static_cast<unsigned char>(g & 0xff);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

Tensor<float> read_depth_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5") throw FormatError(path.string() + " is not a P5 PGM");
    double scale = -1.0, offset = 0.0;
    std::int64_t w = -1, h = -1, maxval = -1;
    std::string token;
    while (in >> std::ws) {
        if (in.peek() == '#') {
            std::string comment;
            std::getline(in, comment);
            std::size_t at = comment.find("meters_per_unit=");
            if (at != std::string::npos) scale = std::stod(comment.substr(at + 16));
            at = comment.find("offset_meters=");
            if (at != std::string::npos) offset = std::stod(comment.substr(at + 14));
            continue;
        }
        if (w < 0) {
            in >> w;
        } else if (h < 0) {
            in >> h;
        } else {
            in >> maxval;
            break;
        }
    }
    if (w < 1 || h < 1 || maxval != 65535 || scale <= 0.0) {
        throw FormatError(path.string() + " lacks the 16-bit depth header");
    }
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h) * 2);
    if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
        throw FormatError("truncated PGM payload in " + path.string());
    }
    std::vector<float> depth(static_cast<std::size_t>(w * h));
    for (std::size_t i = 0; i < depth.size(); ++i) {
        const std::uint16_t g =
            static_cast<std::uint16_t>((bytes[i * 2] << 8) | bytes[i * 2 + 1]);
        depth[i] = static_cast<float>(offset + static_cast<double>(g) * scale);
    }
    return Tensor<float>({1, h, w}, std::move(depth));
}

void infer(const std::filesystem::path& checkpoint_dir, const std::filesystem::path& image_path,
           const std::filesystem::path& out_dir) {
    RunConfig cfg = checkpoint_config(checkpoint_dir);
    Model<float> model(cfg.seed, cfg.model_config());
    load_checkpoint(checkpoint_dir, model, nullptr);

    Tensor<float> image = load_wtns_as<float>(image_path);
    if (image.rank() != 3 || image.extent(0) != 3) {
        throw ConfigError("inference image must be a 3xHxW tensor, got " +
                          shape_str(image.shape()));
    }
    const std::int64_t divisor = std::lcm<std::int64_t>(32, cfg.enhancer_patch);
    if (image.extent(1) % divisor != 0 || image.extent(2) % divisor != 0) {
        throw ConfigError("inference image extents must be divisible by " +
                          std::to_string(divisor));
    }

    NoGradGuard ng;
    DepthMap<float> depth = model.forward(image);
    std::filesystem::create_directories(out_dir);
    save_wtns(out_dir / "depth.wtns", depth.values);
    write_depth_pgm(out_dir / "depth.pgm", depth.values, depth.d_min, depth.d_max);
}

FullCheckResult full_stack_gradcheck(const ModelConfig& cfg, std::uint64_t seed, double lambda,
                                     double eps) {
    const auto start = std::chrono::steady_clock::now();

    Model<double> model(seed, cfg);
    SceneConfig scene;
    scene.height = cfg.height;
    scene.width = cfg.width;
    scene.d_min = cfg.d_min;
    scene.d_max = cfg.d_max;
    scene.n_objects = 3;
    const DepthSample sample = generate_sample(derive_seed(seed, "gradcheck-scene"), scene);
    const Tensor<double> image = sample.rgb.cast<double>();
    const Tensor<double> gt = sample.depth.cast<double>();
    const Mask valid = sample.valid;

    auto loss_fn = [&]() {
        DepthMap<double> pred = model.forward(image);
        return si_loss(pred.values, gt, valid, lambda);
    };

    {
        NoGradGuard ng;
        const double once = loss_fn().item();
        const double twice = loss_fn().item();
        if (once != twice) throw HarnessError("full-stack loss is not deterministic");
    }

    model.store().zero_grads();
    loss_fn().backward();

    FullCheckResult result;
    auto named = model.store().named_trainable();
    result.n_tensors = static_cast<std::int64_t>(named.size());
    NoGradGuard ng;
    for (auto& [name, param] : named) {
        const std::vector<double> analytic =
            param.has_grad() ? param.grad()
                             : std::vector<double>(static_cast<std::size_t>(param.numel()), 0.0);
        GradReport local;
        for (std::int64_t i = 0; i < param.numel(); ++i) {
            const double keep = param.mut_data()[i];
            param.mut_data()[i] = keep + eps;
            const double plus = loss_fn().item();
            param.mut_data()[i] = keep - eps;
            const double minus = loss_fn().item();
            param.mut_data()[i] = keep;
            local.fold(analytic[static_cast<std::size_t>(i)], (plus - minus) / (2.0 * eps), i);
        }
        if (local.max_rel_err > result.report.max_rel_err) result.worst_param = name;
        result.report.merge(local);
        result.n_params += param.numel();
    }
    result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace mdepth
