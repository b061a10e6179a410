#include "sare/sare_map.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sare/image_io.hpp"
#include "sare/image_ops.hpp"

namespace sare {

std::pair<int, int> recon_size(int height, int width, const PreprocessOptions& options) {
    if (height < 1 || width < 1) throw ParameterError("image", "degenerate dimensions");
    if (options.long_side < 1) throw ParameterError("long_side", "must be >= 1");
    if (options.multiple < 1) throw ParameterError("multiple", "must be >= 1");
    const double scale = static_cast<double>(options.long_side) / std::max(height, width);
    auto round_to = [&](double v) {
        const long k = std::lround(v / options.multiple);
        return static_cast<int>(std::max<long>(1, k) * options.multiple);
    };
    return {round_to(height * scale), round_to(width * scale)};
}

ImageArray preprocess_for_recon(const ImageArray& image, const PreprocessOptions& options) {
    if (image.height() < 1 || image.width() < 1) throw ParameterError("image", "degenerate dimensions");
    if (image.channels() != 3) throw ShapeError("expected an RGB image, got " + image.shape().str());
    const auto [h, w] = recon_size(image.height(), image.width(), options);
    ImageArray out = resize_bicubic(image, h, w);
    quantize16(out);
    return out;
}

SareMap compute_sare(const ImageArray& x, const ImageArray& x_hat) {
    require_same_shape(x, x_hat, "compute_sare");
    SareMap s;
    s.data = ImageArray(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) s.data[i] = std::abs(x[i] - x_hat[i]);
    return s;
}

SareMap compute_sare(const ImageArray& x, const ReconstructionRecord& record) {
    SareMap s = compute_sare(x, record.output);
    s.input_digest = record.input_digest;
    s.config = record.config;
    return s;
}

ImageArray prepare_sare_input(const SareMap& s, int size) {
    ImageArray out = resize_bicubic(s.data, size, size);
    clamp01(out);
    return out;
}

double mean_sare(const SareMap& s) { return mean_value(s.data); }

void write_sare_raw(const std::filesystem::path& path, const ImageArray& data) {
    static_assert(std::endian::native == std::endian::little, "raw SARE files assume a little-endian host");
    std::string bytes(12 + data.size() * 4, '\0');
    const std::array<std::uint32_t, 3> header{static_cast<std::uint32_t>(data.channels()),
                                              static_cast<std::uint32_t>(data.height()),
                                              static_cast<std::uint32_t>(data.width())};
    std::memcpy(bytes.data(), header.data(), 12);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto f = static_cast<float>(data[i]);
        std::memcpy(bytes.data() + 12 + i * 4, &f, 4);
    }
    atomic_write(path, bytes);
}

ImageArray read_sare_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::array<std::uint32_t, 3> header{};
    in.read(reinterpret_cast<char*>(header.data()), 12);
    if (in.gcount() != 12) throw IoError("truncated SARE header in " + path.string());
    const Shape3 shape{static_cast<int>(header[0]), static_cast<int>(header[1]), static_cast<int>(header[2])};
    std::vector<float> raw(shape.size());
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (static_cast<std::size_t>(in.gcount()) != raw.size() * 4) throw IoError("truncated SARE data in " + path.string());
    ImageArray out(shape);
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i];
    return out;
}

void write_sare_png(const std::filesystem::path& path, const ImageArray& data) { write_png(path, data, 8); }

}  // namespace sare
