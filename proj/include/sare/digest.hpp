#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "sare/tensor.hpp"

namespace sare {

/// Incremental SHA-256 (OpenSSL EVP underneath).
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::span<const std::uint8_t> bytes);
    Sha256& update(std::string_view text);
    Sha256& update_u32(std::uint32_t v);
    Sha256& update_u64(std::uint64_t v);
    /// Lowercase hex digest. The hasher cannot be reused afterwards.
    std::string hex_digest();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

/// Content hash of an image over its 16-bit quantized samples and shape.
std::string image_digest(const ImageArray& image);

/// Derives a 64-bit seed from a global seed and a hex digest.
std::uint64_t mix_seed(std::uint64_t seed, std::string_view digest);

/// Derives a 64-bit seed from a list of integers (e.g. seed, epoch, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace sare
