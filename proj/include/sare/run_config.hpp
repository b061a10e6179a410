#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "sare/detector.hpp"
#include "sare/recon.hpp"
#include "sare/sare_map.hpp"

namespace sare {

/// Merged configuration of every stage: defaults, then a config file, then command-line flags.
struct RunConfig {
    std::uint64_t seed = 0;
    int workers = 1;
    std::string cache_dir;

    ReconstructionConfig recon{};
    PreprocessOptions preprocess{};
    detect::TrainConfig train{};

    double caption_fidelity = 1.0;
    std::uint64_t caption_seed = 0;
    bool mention_position = false;

    /// Applies an INI file with sections [global], [recon], [preprocess], [train], [caption].
    /// Unknown sections or keys are a ParameterError.
    void apply_file(const std::filesystem::path& path);
    void validate() const;
    nlohmann::json to_json() const;
};

/// Cache directory: the explicit value if nonempty, else $SARE_CACHE_DIR, else "sare_cache".
std::string resolve_cache_dir(const std::string& explicit_dir);

}  // namespace sare
