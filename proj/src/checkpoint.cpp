#include "sare/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "sare/errors.hpp"
#include "sare/recon.hpp"
#include "sare/version.hpp"

namespace sare {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

void write_checkpoint(const fs::path& dir, nlohmann::json spec, const std::vector<NamedArray>& arrays) {
    fs::create_directories(dir);
    std::string bytes;
    nlohmann::json table = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& a : arrays) {
        std::size_t count = 1;
        for (auto d : a.shape) count *= d;
        if (count != a.values.size()) throw ShapeError("array " + a.name + " does not match its declared shape");
        table.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", count}});
        const std::size_t at = bytes.size();
        bytes.resize(at + count * 4);
        std::memcpy(bytes.data() + at, a.values.data(), count * 4);
        offset += count;
    }
    spec["arrays"] = table;
    spec["dtype"] = "float32-le";
    if (!spec.contains("toolkit_version")) spec["toolkit_version"] = kToolkitVersion;
    atomic_write(dir / "weights.bin", bytes);
    atomic_write(dir / "model.json", spec.dump(2) + "\n");
}

const NamedArray& LoadedCheckpoint::array(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return a;
    }
    throw IoError("checkpoint has no array named " + name);
}

LoadedCheckpoint read_checkpoint(const fs::path& dir) {
    LoadedCheckpoint out;
    {
        std::ifstream in(dir / "model.json");
        if (!in) throw IoError("missing " + (dir / "model.json").string());
        try {
            out.spec = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("unreadable model.json: " + std::string(e.what()));
        }
    }
    std::ifstream in(dir / "weights.bin", std::ios::binary);
    if (!in) throw IoError("missing " + (dir / "weights.bin").string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (const auto& entry : out.spec.at("arrays")) {
        NamedArray a;
        a.name = entry.at("name").get<std::string>();
        a.shape = entry.at("shape").get<std::vector<std::size_t>>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto count = entry.at("count").get<std::size_t>();
        if ((offset + count) * 4 > bytes.size()) throw IoError("weights.bin is truncated at array " + a.name);
        a.values.resize(count);
        std::memcpy(a.values.data(), bytes.data() + offset * 4, count * 4);
        out.arrays.push_back(std::move(a));
    }
    return out;
}

}  // namespace sare
