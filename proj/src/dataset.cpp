#include "mdepth/dataset.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>

#include "mdepth/errors.hpp"

namespace mdepth {

void write_index(const std::filesystem::path& root, const DatasetIndex& index) {
    std::filesystem::create_directories(root);
    nlohmann::json j;
    j["samples"] = nlohmann::json::array();
    for (const auto& e : index.entries) {
        j["samples"].push_back({{"dir", e.dir}, {"split", e.split}});
    }
    std::ofstream out(root / "index.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (root / "index.json").string());
    out << j.dump(2) << "\n";
}

DatasetIndex read_index(const std::filesystem::path& root) {
    const auto path = root / "index.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid JSON in " + path.string() + ": " + e.what());
    }
    DatasetIndex index;
    if (!j.contains("samples") || !j["samples"].is_array()) {
        throw FormatError(path.string() + " has no samples array");
    }
    for (const auto& e : j["samples"]) {
        DatasetEntry entry;
        entry.dir = e.at("dir").get<std::string>();
        entry.split = e.at("split").get<std::string>();
        if (entry.split != "train" && entry.split != "test") {
            throw FormatError("unknown split tag '" + entry.split + "' in " + path.string());
        }
        index.entries.push_back(entry);
    }
    return index;
}

DatasetIndex generate_dataset(const std::filesystem::path& root, std::uint64_t base_seed,
                              const SceneConfig& config, std::int64_t count, double test_fraction) {
    if (count < 1) throw ConfigError("dataset sample count must be >= 1");
    if (test_fraction < 0.0 || test_fraction >= 1.0) {
        throw ConfigError("test fraction must lie in [0,1)");
    }
    const auto n_test = static_cast<std::int64_t>(static_cast<double>(count) * test_fraction);
    DatasetIndex index;
    for (std::int64_t i = 0; i < count; ++i) {
        char name[16];
        std::snprintf(name, sizeof(name), "%06lld", static_cast<long long>(i));
        DepthSample sample = generate_sample(base_seed + static_cast<std::uint64_t>(i), config);
        write_sample(sample, root / name);
        index.entries.push_back({name, i < count - n_test ? "train" : "test"});
    }
    write_index(root, index);
    return index;
}

}  // namespace mdepth
