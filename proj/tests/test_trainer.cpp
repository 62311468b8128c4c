#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mdepth/trainer.hpp"
#include "mdepth/weights_io.hpp"
#include "test_util.hpp"

using namespace mdepth;
namespace tu = mdepth::testutil;

namespace {

namespace fs = std::filesystem;

// A 32x32 configuration that keeps every trainer test in milliseconds.
RunConfig mini_config(const fs::path& dataset, const fs::path& out) {
    RunConfig cfg;
    cfg.seed = 3;
    cfg.height = 32;
    cfg.width = 32;
    cfg.encoder_channels = {4, 6, 8, 10};
    cfg.enhancer_patch = 8;
    cfg.enhancer_width = 16;
    cfg.enhancer_heads = 2;
    cfg.enhancer_layers = 4;
    cfg.n_patterns = 2;
    cfg.decoder_mid = 4;
    cfg.batch_size = 2;
    cfg.epochs = 5;
    cfg.warmup_epochs = 1;
    cfg.total_steps_override = 10;
    cfg.warmup_steps_override = 2;
    cfg.log_every_steps = 0;
    cfg.dataset_dir = dataset.string();
    cfg.output_dir = out.string();
    return cfg;
}

fs::path make_dataset(const char* name, std::int64_t count = 4) {
    const fs::path dir = fs::temp_directory_path() / name;
    if (!fs::exists(dir / "index.json")) {
        SceneConfig scene;
        scene.height = 32;
        scene.width = 32;
        scene.n_objects = 3;
        generate_dataset(dir, 900, scene, count, 0.25);
    }
    return dir;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

bool dirs_byte_identical(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> rel;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (entry.is_regular_file()) rel.push_back(fs::relative(entry.path(), a));
    }
    std::sort(rel.begin(), rel.end());
    for (const auto& r : rel) {
        if (!fs::exists(b / r)) return false;
        if (slurp(a / r) != slurp(b / r)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("lr schedule endpoints and junction") {
    const double base = 2e-3;
    CHECK(lr_at(0, 100, 10, base) == 0.0);
    CHECK(lr_at(10, 100, 10, base) == base);       // ramp endpoint
    CHECK(lr_at(100, 100, 10, base) == 0.0);       // cosine endpoint
    CHECK(lr_at(55, 100, 10, base) == doctest::Approx(base / 2).epsilon(1e-12));  // midpoint
    CHECK(lr_at(0, 100, 0, base) == base);         // no warmup starts at base

    SUBCASE("continuous and non-negative everywhere") {
        double prev = lr_at(0, 200, 30, base);
        for (std::int64_t s = 1; s <= 200; ++s) {
            const double v = lr_at(s, 200, 30, base);
            CHECK(v >= 0.0);
            CHECK(std::abs(v - prev) <= base * 0.05);  // no jumps
            prev = v;
        }
    }
    SUBCASE("precondition violations") {
        CHECK_THROWS_AS(lr_at(-1, 10, 2, base), UsageError);
        CHECK_THROWS_AS(lr_at(11, 10, 2, base), UsageError);
        CHECK_THROWS_AS(lr_at(5, 10, 10, base), UsageError);
    }
}

TEST_CASE("config json round trip is stable") {
    RunConfig cfg = mini_config("data", "out");
    const std::string once = config_to_json(cfg);
    RunConfig back = config_from_json(once);
    CHECK(config_to_json(back) == once);
    CHECK(config_hash(back) == config_hash(cfg));

    SUBCASE("partial configs resolve against defaults") {
        RunConfig partial = config_from_json("{\"seed\": 9}");
        CHECK(partial.seed == 9);
        CHECK(partial.enhancer_patch == 14);
        CHECK(partial.optimizer.lr == 2e-3);
    }
    SUBCASE("validation failures") {
        RunConfig bad = cfg;
        bad.warmup_epochs = bad.epochs;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        RunConfig bad_res = cfg;
        bad_res.height = 40;
        CHECK_THROWS_AS(bad_res.validate(), ConfigError);
    }
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
    const fs::path dataset = make_dataset("mdepth_train_data");
    RunConfig cfg = mini_config(dataset, fs::temp_directory_path() / "mdepth_zero_lr");
    cfg.optimizer.lr = 0.0;
    cfg.total_steps_override = 2;
    cfg.warmup_steps_override = 0;

    for (double wd : {0.01, 0.0}) {
        cfg.optimizer.weight_decay = wd;
        Model<float> model(cfg.seed, cfg.model_config());
        std::vector<std::vector<float>> before;
        for (const auto& [name, t] : model.store().named()) before.push_back(t.data_vec());
        const auto samples = load_split(cfg.dataset_dir, "train");
        train_model(model, cfg, samples, cfg.output_dir);
        std::size_t i = 0;
        for (const auto& [name, t] : model.store().named()) {
            CAPTURE(name);
            CHECK(t.data_vec() == before[i]);
            ++i;
        }
    }
}

TEST_CASE("training is deterministic and freezes the enhancer") {
    const fs::path dataset = make_dataset("mdepth_train_data");
    const fs::path out = fs::temp_directory_path() / "mdepth_det";
    const fs::path kept = fs::temp_directory_path() / "mdepth_det_first";
    fs::remove_all(out);
    fs::remove_all(kept);

    // Two runs with the literally identical config.
    RunConfig cfg = mini_config(dataset, out);
    TrainResult a = train(cfg);
    fs::rename(a.checkpoint_dir, kept);
    TrainResult b = train(cfg);

    CHECK(a.frozen_checksum_before == a.frozen_checksum_after);
    CHECK(a.losses == b.losses);
    CHECK(dirs_byte_identical(kept, b.checkpoint_dir));
    CHECK(fs::exists(out / "train_log.jsonl"));
}

TEST_CASE("checkpoint save-load-save produces identical bytes") {
    const fs::path dataset = make_dataset("mdepth_train_data");
    const fs::path out = fs::temp_directory_path() / "mdepth_ckpt_rt";
    fs::remove_all(out);
    RunConfig cfg = mini_config(dataset, out);
    cfg.total_steps_override = 3;
    TrainResult tr = train(cfg);

    RunConfig loaded_cfg = checkpoint_config(tr.checkpoint_dir);
    CHECK(config_hash(loaded_cfg) == config_hash(cfg));
    CHECK(checkpoint_step(tr.checkpoint_dir) == 3);

    Model<float> model(loaded_cfg.seed, loaded_cfg.model_config());
    OptimizerState<float> opt;
    load_checkpoint(tr.checkpoint_dir, model, &opt);
    CHECK(opt.step == 3);

    const fs::path resaved = fs::temp_directory_path() / "mdepth_ckpt_rt2";
    fs::remove_all(resaved);
    save_checkpoint(resaved, model, &opt, 3, loaded_cfg);
    CHECK(dirs_byte_identical(tr.checkpoint_dir, resaved));
}

TEST_CASE("evaluation is deterministic and validates its inputs") {
    const fs::path dataset = make_dataset("mdepth_train_data");
    const fs::path out = fs::temp_directory_path() / "mdepth_eval";
    fs::remove_all(out);
    RunConfig cfg = mini_config(dataset, out);
    cfg.total_steps_override = 4;
    TrainResult tr = train(cfg);

    MetricsReport r1 = evaluate(tr.checkpoint_dir, "train");
    MetricsReport r2 = evaluate(tr.checkpoint_dir, "train");
    CHECK(metrics_to_json(r1) == metrics_to_json(r2));
    CHECK(r1.valid_pixel_count > 0);

    SUBCASE("empty split is a usage error") {
        const fs::path lonely = fs::temp_directory_path() / "mdepth_lonely";
        fs::remove_all(lonely);
        SceneConfig scene;
        scene.height = 32;
        scene.width = 32;
        generate_dataset(lonely, 1, scene, 1, 0.0);  // no test split
        CHECK_THROWS_AS(evaluate(tr.checkpoint_dir, "test", lonely.string()), UsageError);
    }
    SUBCASE("cap below every ground truth is an evaluation error") {
        Model<float> model(cfg.seed, cfg.model_config());
        load_checkpoint(tr.checkpoint_dir, model, nullptr);
        const auto samples = load_split(cfg.dataset_dir, "train");
        CHECK_THROWS_AS(evaluate_model(model, samples, /*cap=*/0.01), EvalError);
    }
    SUBCASE("missing dataset directory is a config error") {
        CHECK_THROWS_AS(evaluate(tr.checkpoint_dir, "train", "/nonexistent/dataset"),
                        ConfigError);
    }
}

TEST_CASE("ablation grid follows the canonical row order") {
    // Rows: (P, E, PT, IT).
    const bool want[8][4] = {{0, 0, 0, 0}, {0, 1, 1, 0}, {1, 0, 1, 0}, {0, 1, 0, 1},
                             {1, 1, 1, 0}, {1, 1, 0, 1}, {0, 1, 1, 1}, {1, 1, 1, 1}};
    for (int i = 0; i < 8; ++i) {
        CHECK(kAblationGrid[i].partition == want[i][0]);
        CHECK(kAblationGrid[i].enhance == want[i][1]);
        CHECK(kAblationGrid[i].inject_patterns == want[i][2]);
        CHECK(kAblationGrid[i].inject_image == want[i][3]);
    }
}

TEST_CASE("ablation driver trains all eight rows") {
    const fs::path dataset = make_dataset("mdepth_train_data");
    const fs::path out = fs::temp_directory_path() / "mdepth_ablate";
    fs::remove_all(out);
    RunConfig cfg = mini_config(dataset, out);
    cfg.total_steps_override = 2;
    cfg.warmup_steps_override = 1;
    std::vector<AblationRow> rows = ablate(cfg);
    REQUIRE(rows.size() == 8);
    for (const auto& row : rows) {
        CHECK(row.loss_finite);
        CHECK(row.metrics.valid_pixel_count > 0);
    }
    const std::string table = ablation_table(rows);
    CHECK(table.find("AbsRel") != std::string::npos);
    CHECK(std::count(table.begin(), table.end(), '\n') == 9);  // header + 8 rows
}

TEST_CASE("inference writes consistent wtns and pgm depth") {
    const fs::path dataset = make_dataset("mdepth_train_data");
    const fs::path out = fs::temp_directory_path() / "mdepth_infer";
    fs::remove_all(out);
    RunConfig cfg = mini_config(dataset, out / "run");
    cfg.total_steps_override = 2;
    cfg.warmup_steps_override = 1;
    TrainResult tr = train(cfg);

    const fs::path image = dataset / "000000" / "rgb.wtns";
    infer(tr.checkpoint_dir, image, out / "pred");
    infer(tr.checkpoint_dir, image, out / "pred2");

    Tensor<float> depth = load_wtns_as<float>(out / "pred" / "depth.wtns");
    CHECK(depth.shape() == Shape{1, 32, 32});
    Tensor<float> from_pgm = read_depth_pgm(out / "pred" / "depth.pgm");
    REQUIRE(from_pgm.shape() == depth.shape());
    const double quantum = (cfg.d_max - cfg.d_min) / 65535.0;
    for (std::int64_t i = 0; i < depth.numel(); ++i) {
        CHECK(std::abs(static_cast<double>(from_pgm.data()[i]) -
                       static_cast<double>(depth.data()[i])) <= quantum);
    }
    CHECK(slurp(out / "pred" / "depth.pgm") == slurp(out / "pred2" / "depth.pgm"));
    CHECK(slurp(out / "pred" / "depth.wtns") == slurp(out / "pred2" / "depth.wtns"));

    SUBCASE("pgm endpoints map to the depth range") {
        // Gray 0 and 65535 decode to d_min and d_max.
        Tensor<float> ramp({1, 1, 2}, {static_cast<float>(cfg.d_min), static_cast<float>(cfg.d_max)});
        write_depth_pgm(out / "ramp.pgm", ramp, static_cast<float>(cfg.d_min),
                        static_cast<float>(cfg.d_max));
        Tensor<float> back = read_depth_pgm(out / "ramp.pgm");
        CHECK(back.data()[0] == doctest::Approx(cfg.d_min).epsilon(1e-6));
        CHECK(back.data()[1] == doctest::Approx(cfg.d_max).epsilon(1e-6));
    }
    SUBCASE("invalid image size is a config error") {
        DepthSample odd = generate_sample(5, SceneConfig{64, 96, 0.1, 10.0, 2});
        save_wtns(out / "odd.wtns", odd.rgb);
        // 96 is divisible by 32 but not by lcm(32, patch=8) = 32, so this one
        // passes; a 3-channel tensor with a bad extent must fail.
        Tensor<float> bad = Tensor<float>::zeros({3, 40, 40});
        save_wtns(out / "bad.wtns", bad);
        CHECK_THROWS_AS(infer(tr.checkpoint_dir, out / "bad.wtns", out / "pred3"), ConfigError);
    }
}

TEST_CASE("training aborts with a diagnostic on missing dataset") {
    RunConfig cfg = mini_config("/nonexistent/dir", fs::temp_directory_path() / "mdepth_nodata");
    CHECK_THROWS_AS(train(cfg), ConfigError);
}

TEST_CASE("external enhancer weights replace the random surrogate") {
    const fs::path dataset = make_dataset("mdepth_train_data");
    const fs::path weights = fs::temp_directory_path() / "mdepth_ext_weights";
    const fs::path out = fs::temp_directory_path() / "mdepth_ext_run";
    fs::remove_all(weights);
    fs::remove_all(out);

    RunConfig cfg = mini_config(dataset, out);
    cfg.total_steps_override = 1;
    cfg.warmup_steps_override = 0;

    // A differently seeded enhancer provides the external weights.
    ParamStore<float> donor_store(999);
    EnhancerConfig ecfg;
    ecfg.patch = cfg.enhancer_patch;
    ecfg.width = cfg.enhancer_width;
    ecfg.heads = cfg.enhancer_heads;
    ecfg.layers = cfg.enhancer_layers;
    Enhancer<float> donor(donor_store, "enhancer", ecfg, 4, 4);
    donor.save_weights(weights);

    cfg.enhancer_weights_dir = weights.string();
    TrainResult tr = train(cfg);
    CHECK(tr.frozen_checksum_before == donor.frozen_checksum());
    CHECK(tr.frozen_checksum_after == donor.frozen_checksum());

    cfg.enhancer_weights_dir = "/nonexistent/weights";
    CHECK_THROWS_AS(train(cfg), ConfigError);
}
