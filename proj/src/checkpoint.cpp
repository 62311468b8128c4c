#include "mdepth/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

#include "mdepth/tensor_io.hpp"

namespace mdepth {

namespace {

using nlohmann::json;

json read_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint manifest " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("invalid JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                     const OptimizerState<float>* opt_state, std::int64_t step,
                     const RunConfig& config) {
    std::filesystem::create_directories(dir / "params");
    json manifest;
    manifest["format"] = "mdepth-checkpoint-v1";
    manifest["step"] = step;
    manifest["config"] = json::parse(config_to_json(config));
    manifest["config_hash"] = config_hash(config);
    manifest["frozen_checksum"] = model.frozen_checksum();

    manifest["params"] = json::array();
    for (const auto& [name, tensor] : model.store().named()) {
        const std::string file = name + ".wtns";
        save_wtns(dir / "params" / file, tensor);
        manifest["params"].push_back({{"name", name},
                                      {"file", file},
                                      {"shape", tensor.shape()},
                                      {"dtype", dtype_name(tensor.dtype())},
                                      {"trainable", tensor.requires_grad()}});
    }

    if (opt_state) {
        std::filesystem::create_directories(dir / "opt");
        const auto trainable = model.store().named_trainable();
        if (trainable.size() != opt_state->first_moment.size()) {
            throw UsageError("optimizer state does not align with the trainable parameter set");
        }
        manifest["opt_step"] = opt_state->step;
        manifest["opt"] = json::array();
        for (std::size_t i = 0; i < trainable.size(); ++i) {
            const auto& [name, tensor] = trainable[i];
            Tensor<float> m(tensor.shape(), opt_state->first_moment[i]);
            Tensor<float> v(tensor.shape(), opt_state->second_moment[i]);
            save_wtns(dir / "opt" / (name + ".m.wtns"), m);
            save_wtns(dir / "opt" / (name + ".v.wtns"), v);
            manifest["opt"].push_back({{"name", name}});
        }
    }

    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

RunConfig checkpoint_config(const std::filesystem::path& dir) {
    const json manifest = read_manifest(dir);
    if (!manifest.contains("config")) {
        throw FormatError("checkpoint manifest lacks an embedded config");
    }
    RunConfig cfg = config_from_json(manifest["config"].dump());
    if (manifest.contains("config_hash") &&
        manifest["config_hash"].get<std::uint64_t>() != config_hash(cfg)) {
        throw FormatError("checkpoint config hash mismatch (manifest edited?)");
    }
    return cfg;
}

std::int64_t checkpoint_step(const std::filesystem::path& dir) {
    return read_manifest(dir).at("step").get<std::int64_t>();
}

void load_checkpoint(const std::filesystem::path& dir, Model<float>& model,
                     OptimizerState<float>* opt_state) {
    const json manifest = read_manifest(dir);
    if (!manifest.contains("params") || !manifest["params"].is_array()) {
        throw FormatError("checkpoint manifest has no params array");
    }
    std::size_t matched = 0;
    for (const auto& entry : manifest["params"]) {
        const auto name = entry.at("name").get<std::string>();
        Tensor<float>* target = model.store().find(name);
        if (!target) throw FormatError("checkpoint names unknown tensor '" + name + "'");
        const auto shape = entry.at("shape").get<Shape>();
        if (shape != target->shape()) {
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                              ", model expects " + shape_str(target->shape()));
        }
        Tensor<float> loaded =
            load_wtns_as<float>(dir / "params" / entry.at("file").get<std::string>());
        if (loaded.shape() != target->shape()) {
            throw FormatError("checkpoint file for '" + name + "' holds shape " +
                              shape_str(loaded.shape()));
        }
        std::copy(loaded.data(), loaded.data() + loaded.numel(), target->mut_data());
        ++matched;
    }
    if (matched != model.store().named().size()) {
        throw FormatError("checkpoint covers " + std::to_string(matched) + " tensors, model has " +
                          std::to_string(model.store().named().size()));
    }
    if (manifest.contains("frozen_checksum")) {
        const auto expected = manifest["frozen_checksum"].get<std::uint64_t>();
        if (model.frozen_checksum() != expected) {
            throw FormatError("frozen-enhancer checksum mismatch after load");
        }
    }

    if (opt_state) {
        if (!manifest.contains("opt")) {
            throw FormatError("checkpoint has no optimizer state");
        }
        const auto trainable = model.store().named_trainable();
        opt_state->first_moment.clear();
        opt_state->second_moment.clear();
        opt_state->step = manifest.value("opt_step", std::int64_t{0});
        for (const auto& [name, tensor] : trainable) {
            AnyTensor m = load_wtns(dir / "opt" / (name + ".m.wtns"));
            AnyTensor v = load_wtns(dir / "opt" / (name + ".v.wtns"));
            if (m.shape != tensor.shape() || v.shape != tensor.shape()) {
                throw FormatError("optimizer state shape mismatch for '" + name + "'");
            }
            opt_state->first_moment.push_back(m.to<float>().data_vec());
            opt_state->second_moment.push_back(v.to<float>().data_vec());
        }
    }
}

}  // namespace mdepth
