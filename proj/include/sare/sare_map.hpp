#pragma once

#include <filesystem>
#include <string>

#include "sare/recon.hpp"
#include "sare/tensor.hpp"

namespace sare {

/// Per-pixel absolute reconstruction difference |x - x_hat|, 3 channels.
struct SareMap {
    ImageArray data;
    std::string input_digest;
    ReconstructionConfig config;
};

struct PreprocessOptions {
    int long_side = 512;
    int multiple = 8;  ///< codec downscale factor
};

/// Aspect-preserving bicubic resize to `long_side` on the longer side, each dimension then rounded
/// to the nearest multiple of `multiple`. Output is clamped and on the 16-bit grid.
ImageArray preprocess_for_recon(const ImageArray& image, const PreprocessOptions& options = {});

/// Target (height, width) that preprocess_for_recon resizes to.
std::pair<int, int> recon_size(int height, int width, const PreprocessOptions& options = {});

SareMap compute_sare(const ImageArray& x, const ImageArray& x_hat);
SareMap compute_sare(const ImageArray& x, const ReconstructionRecord& record);

/// Square bicubic resize of the map to `size` x `size`, re-clamped to [0, 1].
ImageArray prepare_sare_input(const SareMap& s, int size = 224);

/// Mean over all entries; the single-feature score used by the toy separability checks.
double mean_sare(const SareMap& s);

/// Raw little-endian float32 dump: header of three uint32 (channels, height, width), then data.
void write_sare_raw(const std::filesystem::path& path, const ImageArray& data);
ImageArray read_sare_raw(const std::filesystem::path& path);
/// Lossy 8-bit PNG rendering of a map.
void write_sare_png(const std::filesystem::path& path, const ImageArray& data);

}  // namespace sare
