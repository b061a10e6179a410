#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace sare {

/// One named parameter array stored in `weights.bin`.
struct NamedArray {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

/// Writes `<dir>/weights.bin` (raw little-endian float32 arrays concatenated in order) and
/// `<dir>/model.json` (`spec` plus the array table under "arrays").
void write_checkpoint(const std::filesystem::path& dir, nlohmann::json spec, const std::vector<NamedArray>& arrays);

struct LoadedCheckpoint {
    nlohmann::json spec;
    std::vector<NamedArray> arrays;

    const NamedArray& array(const std::string& name) const;
};

LoadedCheckpoint read_checkpoint(const std::filesystem::path& dir);

}  // namespace sare
