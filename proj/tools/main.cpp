#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "mdepth/trainer.hpp"
#include "mdepth/weights_io.hpp"

namespace {

using namespace mdepth;

RunConfig resolve_config(const std::string& config_path, std::int64_t seed_override,
                         const std::vector<std::string>& toggle_offs,
                         const std::string& dataset_override, const std::string& out_override) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    for (const auto& t : toggle_offs) {
        if (t == "partition") cfg.toggles.partition = false;
        if (t == "enhance") cfg.toggles.enhance = false;
        if (t == "inject-patterns") cfg.toggles.inject_patterns = false;
        if (t == "inject-image") cfg.toggles.inject_image = false;
    }
    if (!dataset_override.empty()) cfg.dataset_dir = dataset_override;
    if (!out_override.empty()) cfg.output_dir = out_override;
    return cfg;
}

ModelConfig toy_gradcheck_config() {
    ModelConfig cfg;
    cfg.height = 32;
    cfg.width = 32;
    cfg.encoder_channels = {4, 6, 8, 10};
    cfg.enhancer.patch = 8;
    cfg.enhancer.width = 16;
    cfg.enhancer.heads = 2;
    cfg.enhancer.layers = 4;
    cfg.n_patterns = 4;
    cfg.decoder_mid = 8;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-branch monocular depth estimation testbed"};
    app.require_subcommand(1);

    std::string config_path, dataset_dir, output_dir, checkpoint_dir, image_path, split = "test";
    std::int64_t seed_override = -1;
    std::int64_t count = 16;
    double test_fraction = 0.25;
    double eps = 1e-5;
    std::vector<std::string> toggle_offs;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON run config");
        cmd->add_option("--seed", seed_override, "override the config seed");
        cmd->add_flag_callback("--no-partition", [&] { toggle_offs.push_back("partition"); });
        cmd->add_flag_callback("--no-enhance", [&] { toggle_offs.push_back("enhance"); });
        cmd->add_flag_callback("--no-inject-patterns",
                               [&] { toggle_offs.push_back("inject-patterns"); });
        cmd->add_flag_callback("--no-inject-image", [&] { toggle_offs.push_back("inject-image"); });
    };

    CLI::App* gen = app.add_subcommand("gen-data", "render a synthetic RGB-D dataset");
    add_common(gen);
    gen->add_option("--out", output_dir, "dataset directory")->required();
    gen->add_option("--count", count, "number of samples");
    gen->add_option("--test-fraction", test_fraction, "fraction tagged as the test split");

    CLI::App* train_cmd = app.add_subcommand("train", "train a model");
    add_common(train_cmd);
    train_cmd->add_option("--dataset", dataset_dir, "dataset directory override");
    train_cmd->add_option("--out", output_dir, "output directory override");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    eval_cmd->add_option("--split", split, "dataset split (train|test)");
    eval_cmd->add_option("--dataset", dataset_dir, "dataset directory override");

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "train the 8 stage-toggle combinations");
    add_common(ablate_cmd);
    ablate_cmd->add_option("--dataset", dataset_dir, "dataset directory override");
    ablate_cmd->add_option("--out", output_dir, "output directory override");

    CLI::App* infer_cmd = app.add_subcommand("infer", "predict depth for one image tensor");
    infer_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    infer_cmd->add_option("--image", image_path, "3xHxW WTNS1 image file")->required();
    infer_cmd->add_option("--out", output_dir, "output directory")->required();

    CLI::App* gc_cmd = app.add_subcommand("gradcheck", "full-stack finite-difference check");
    add_common(gc_cmd);
    gc_cmd->add_option("--eps", eps, "central-difference step");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            RunConfig cfg = resolve_config(config_path, seed_override, toggle_offs, "", "");
            SceneConfig scene;
            scene.height = cfg.height;
            scene.width = cfg.width;
            scene.d_min = cfg.d_min;
            scene.d_max = cfg.d_max;
            generate_dataset(output_dir, cfg.seed, scene, count, test_fraction);
            std::printf("wrote %lld samples to %s\n", static_cast<long long>(count),
                        output_dir.c_str());
        } else if (train_cmd->parsed()) {
            RunConfig cfg =
                resolve_config(config_path, seed_override, toggle_offs, dataset_dir, output_dir);
            TrainResult result = train(cfg);
            std::printf("trained %lld steps, loss %.6f -> %.6f, checkpoint %s\n",
                        static_cast<long long>(result.steps), result.first_loss, result.final_loss,
                        result.checkpoint_dir.c_str());
        } else if (eval_cmd->parsed()) {
            MetricsReport report = evaluate(checkpoint_dir, split, dataset_dir);
            std::printf("%s", metrics_table(report).c_str());
            std::printf("%s\n", metrics_to_json(report).c_str());
        } else if (ablate_cmd->parsed()) {
            RunConfig cfg =
                resolve_config(config_path, seed_override, toggle_offs, dataset_dir, output_dir);
            std::vector<AblationRow> rows = ablate(cfg);
            std::printf("%s", ablation_table(rows).c_str());
        } else if (infer_cmd->parsed()) {
            infer(checkpoint_dir, image_path, output_dir);
            std::printf("wrote %s/depth.wtns and depth.pgm\n", output_dir.c_str());
        } else if (gc_cmd->parsed()) {
            ModelConfig cfg = toy_gradcheck_config();
            const std::uint64_t seed = seed_override >= 0 ? static_cast<std::uint64_t>(seed_override) : 7;
            FullCheckResult result = full_stack_gradcheck(cfg, seed, 0.5, eps);
            std::printf("parameters checked: %lld in %lld tensors\n",
                        static_cast<long long>(result.n_params),
                        static_cast<long long>(result.n_tensors));
            std::printf("max_rel_err %.3e  max_abs_err %.3e  worst %s[%lld] analytic %.9g numeric %.9g\n",
                        result.report.max_rel_err, result.report.max_abs_err,
                        result.worst_param.c_str(), static_cast<long long>(result.report.worst_index),
                        result.report.analytic, result.report.numeric);
            std::printf("elapsed %.1f s\n", result.seconds);
            if (result.report.max_rel_err > 1e-6) {
                std::fprintf(stderr, "error: numeric: gradient check exceeded 1e-6\n");
                return 1;
            }
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", e.category().c_str(), e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: internal: %s\n", e.what());
        return 2;
    }
    return 0;
}
