#include "mdepth/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

#include "mdepth/rng.hpp"

namespace mdepth {

namespace {

using nlohmann::json;

json toggles_to_json(const PeiToggles& t) {
    return {{"partition", t.partition},
            {"enhance", t.enhance},
            {"inject_patterns", t.inject_patterns},
            {"inject_image", t.inject_image}};
}

template <class T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string config_to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["resolution"] = {{"height", c.height}, {"width", c.width}};
    j["encoder_channels"] = c.encoder_channels;
    j["enhancer"] = {{"patch", c.enhancer_patch},
                     {"width", c.enhancer_width},
                     {"heads", c.enhancer_heads},
                     {"layers", c.enhancer_layers},
                     {"weights_dir", c.enhancer_weights_dir}};
    j["n_patterns"] = c.n_patterns;
    j["toggles"] = toggles_to_json(c.toggles);
    j["decoder_mid"] = c.decoder_mid;
    j["optimizer"] = {{"lr", c.optimizer.lr},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"eps", c.optimizer.eps}};
    j["schedule"] = {{"epochs", c.epochs},
                     {"warmup_epochs", c.warmup_epochs},
                     {"batch_size", c.batch_size},
                     {"total_steps_override", c.total_steps_override},
                     {"warmup_steps_override", c.warmup_steps_override}};
    j["loss_lambda"] = c.loss_lambda;
    j["depth_range"] = {{"d_min", c.d_min}, {"d_max", c.d_max}};
    j["eval_cap"] = c.eval_cap;
    j["clip_norm"] = c.clip_norm;
    j["dataset_dir"] = c.dataset_dir;
    j["output_dir"] = c.output_dir;
    j["checkpoint_every_steps"] = c.checkpoint_every_steps;
    j["log_every_steps"] = c.log_every_steps;
    j["deterministic"] = c.deterministic;
    return j.dump(2);
}

RunConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("invalid config JSON: ") + e.what());
    }
    RunConfig c;
    read_field(j, "seed", c.seed);
    if (j.contains("resolution")) {
        read_field(j["resolution"], "height", c.height);
        read_field(j["resolution"], "width", c.width);
    }
    read_field(j, "encoder_channels", c.encoder_channels);
    if (j.contains("enhancer")) {
        const auto& e = j["enhancer"];
        read_field(e, "patch", c.enhancer_patch);
        read_field(e, "width", c.enhancer_width);
        read_field(e, "heads", c.enhancer_heads);
        read_field(e, "layers", c.enhancer_layers);
        read_field(e, "weights_dir", c.enhancer_weights_dir);
    }
    read_field(j, "n_patterns", c.n_patterns);
    if (j.contains("toggles")) {
        const auto& t = j["toggles"];
        read_field(t, "partition", c.toggles.partition);
        read_field(t, "enhance", c.toggles.enhance);
        read_field(t, "inject_patterns", c.toggles.inject_patterns);
        read_field(t, "inject_image", c.toggles.inject_image);
    }
    read_field(j, "decoder_mid", c.decoder_mid);
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        read_field(o, "lr", c.optimizer.lr);
        read_field(o, "beta1", c.optimizer.beta1);
        read_field(o, "beta2", c.optimizer.beta2);
        read_field(o, "weight_decay", c.optimizer.weight_decay);
        read_field(o, "eps", c.optimizer.eps);
    }
    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        read_field(s, "epochs", c.epochs);
        read_field(s, "warmup_epochs", c.warmup_epochs);
        read_field(s, "batch_size", c.batch_size);
        read_field(s, "total_steps_override", c.total_steps_override);
        read_field(s, "warmup_steps_override", c.warmup_steps_override);
    }
    read_field(j, "loss_lambda", c.loss_lambda);
    if (j.contains("depth_range")) {
        read_field(j["depth_range"], "d_min", c.d_min);
        read_field(j["depth_range"], "d_max", c.d_max);
    }
    read_field(j, "eval_cap", c.eval_cap);
    read_field(j, "clip_norm", c.clip_norm);
    read_field(j, "dataset_dir", c.dataset_dir);
    read_field(j, "output_dir", c.output_dir);
    read_field(j, "checkpoint_every_steps", c.checkpoint_every_steps);
    read_field(j, "log_every_steps", c.log_every_steps);
    read_field(j, "deterministic", c.deterministic);
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return config_from_json(text);
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write config " + path.string());
    out << config_to_json(cfg) << "\n";
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(config_to_json(cfg)); }

}  // namespace mdepth
