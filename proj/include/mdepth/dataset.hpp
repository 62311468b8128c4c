#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mdepth/scenegen.hpp"

namespace mdepth {

// A dataset is a directory of numbered sample directories plus index.json
// listing them with their split tag.
struct DatasetEntry {
    std::string dir;
    std::string split;  // "train" or "test"
};

struct DatasetIndex {
    std::vector<DatasetEntry> entries;

    std::vector<std::string> dirs_for(const std::string& split) const {
        std::vector<std::string> out;
        for (const auto& e : entries)
            if (e.split == split) out.push_back(e.dir);
        return out;
    }
};

void write_index(const std::filesystem::path& root, const DatasetIndex& index);
DatasetIndex read_index(const std::filesystem::path& root);

// Renders `count` samples seeded base_seed, base_seed+1, ... and assigns the
// trailing test_fraction of them to the test split.
DatasetIndex generate_dataset(const std::filesystem::path& root, std::uint64_t base_seed,
                              const SceneConfig& config, std::int64_t count, double test_fraction);

}  // namespace mdepth
