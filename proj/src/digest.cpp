#include "sare/digest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <vector>

#include "sare/errors.hpp"

namespace sare {

struct Sha256::Impl {
    EVP_MD_CTX* ctx = nullptr;
};

Sha256::Sha256() : impl_(std::make_unique<Impl>()) {
    impl_->ctx = EVP_MD_CTX_new();
    if (impl_->ctx == nullptr || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1) {
        throw Error("EVP sha256 init failed");
    }
}

Sha256::~Sha256() {
    if (impl_ && impl_->ctx) EVP_MD_CTX_free(impl_->ctx);
}

Sha256& Sha256::update(std::span<const std::uint8_t> bytes) {
    EVP_DigestUpdate(impl_->ctx, bytes.data(), bytes.size());
    return *this;
}

Sha256& Sha256::update(std::string_view text) {
    EVP_DigestUpdate(impl_->ctx, text.data(), text.size());
    return *this;
}

Sha256& Sha256::update_u32(std::uint32_t v) {
    std::array<std::uint8_t, 4> b{};
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    return update(b);
}

Sha256& Sha256::update_u64(std::uint64_t v) {
    std::array<std::uint8_t, 8> b{};
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    return update(b);
}

std::string Sha256::hex_digest() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(impl_->ctx, md.data(), &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xF]);
    }
    return out;
}

std::string sha256_hex(std::string_view text) {
    Sha256 h;
    h.update(text);
    return h.hex_digest();
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    Sha256 h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto n = static_cast<std::size_t>(in.gcount());
        if (n == 0) break;
        h.update(std::string_view(buf.data(), n));
    }
    return h.hex_digest();
}

std::string image_digest(const ImageArray& image) {
    Sha256 h;
    h.update("sare-image-u16-v1");
    h.update_u32(static_cast<std::uint32_t>(image.channels()));
    h.update_u32(static_cast<std::uint32_t>(image.height()));
    h.update_u32(static_cast<std::uint32_t>(image.width()));
    std::vector<std::uint8_t> bytes;
    bytes.reserve(image.size() * 2);
    for (double v : image.values()) {
        const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
        bytes.push_back(static_cast<std::uint8_t>(q & 0xFF));
        bytes.push_back(static_cast<std::uint8_t>(q >> 8));
    }
    h.update(bytes);
    return h.hex_digest();
}

namespace {
std::uint64_t first_u64(const std::string& hex) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < 16 && i < hex.size(); ++i) {
        const char c = hex[i];
        const std::uint64_t nib = (c >= '0' && c <= '9') ? static_cast<std::uint64_t>(c - '0')
                                                         : static_cast<std::uint64_t>(c - 'a' + 10);
        v = (v << 4) | nib;
    }
    return v;
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::string_view digest) {
    Sha256 h;
    h.update("sare-seed-v1");
    h.update_u64(seed);
    h.update(digest);
    return first_u64(h.hex_digest());
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    Sha256 h;
    h.update("sare-derive-v1");
    h.update_u64(seed).update_u64(a).update_u64(b).update_u64(c);
    return first_u64(h.hex_digest());
}

}  // namespace sare
