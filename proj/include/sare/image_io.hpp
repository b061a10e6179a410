#pragma once

#include <filesystem>

#include "sare/tensor.hpp"

namespace sare {

/// Decodes a PNG (8/16-bit; gray, RGB, RGBA, palette) or baseline JPEG into RGB in [0, 1].
/// Throws IoError on unreadable or corrupt files.
ImageArray read_image(const std::filesystem::path& path);

/// Writes a 3-channel image as PNG with 8 or 16 bits per sample.
void write_png(const std::filesystem::path& path, const ImageArray& image, int bit_depth = 8);

}  // namespace sare
