#pragma once

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>

#include "mdepth/enhancer.hpp"

// Out-of-line definitions for the enhancer weight-file interface: a directory
// of WTNS1 tensors plus a manifest.json naming each parameter and its shape.

namespace mdepth {

namespace weights_detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
}

}  // namespace weights_detail

template <class T>
void Enhancer<T>::save_weights(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "wtns-manifest-v1";
    manifest["params"] = nlohmann::json::array();
    for (const auto& [name, tensor] : params_) {
        const std::string file = name + ".wtns";
        save_wtns(dir / file, tensor);
        nlohmann::json entry;
        entry["name"] = name;
        entry["file"] = file;
        entry["shape"] = tensor.shape();
        entry["dtype"] = dtype_name(tensor.dtype());
        manifest["params"].push_back(entry);
    }
    weights_detail::write_json_file(dir / "manifest.json", manifest);
}

template <class T>
void Enhancer<T>::load_weights(const std::filesystem::path& dir) {
    const nlohmann::json manifest = weights_detail::read_json_file(dir / "manifest.json");
    if (!manifest.contains("params") || !manifest["params"].is_array()) {
        throw FormatError("weight manifest " + (dir / "manifest.json").string() +
                          " has no params array");
    }
    struct Entry {
        std::string file;
        Shape shape;
    };
    std::map<std::string, Entry> entries;
    for (const auto& e : manifest["params"]) {
        Entry entry;
        entry.file = e.at("file").get<std::string>();
        entry.shape = e.at("shape").get<Shape>();
        entries[e.at("name").get<std::string>()] = entry;
    }

    std::set<std::string> consumed;
    for (auto& [name, tensor] : params_) {
        auto it = entries.find(name);
        if (it == entries.end()) {
            throw FormatError("weight manifest is missing tensor '" + name + "'");
        }
        if (it->second.shape != tensor.shape()) {
            throw FormatError("weight tensor '" + name + "' has shape " +
                              shape_str(it->second.shape) + ", expected " +
                              shape_str(tensor.shape()));
        }
        AnyTensor loaded = load_wtns(dir / it->second.file);
        if (loaded.shape != tensor.shape()) {
            throw FormatError("weight file for '" + name + "' holds shape " +
                              shape_str(loaded.shape) + ", expected " + shape_str(tensor.shape()));
        }
        Tensor<T> converted = loaded.template to<T>();
        std::copy(converted.data(), converted.data() + converted.numel(), tensor.mut_data());
        consumed.insert(name);
    }
    for (const auto& [name, entry] : entries) {
        if (!consumed.count(name)) {
            throw FormatError("weight manifest names unknown tensor '" + name + "'");
        }
    }
}

}  // namespace mdepth
