#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "sare/tensor.hpp"

namespace sare::testing {

template <class Tag>
Array3<Tag> random_array(Shape3 shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Array3<Tag> a(shape);
    for (auto& v : a.values()) v = u(rng);
    return a;
}

template <class Tag>
double l2(const Array3<Tag>& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    return std::sqrt(s);
}

template <class Tag>
double rel_l2(const Array3<Tag>& got, const Array3<Tag>& want) {
    double num = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) num += (got[i] - want[i]) * (got[i] - want[i]);
    return std::sqrt(num) / l2(want);
}

template <class Tag>
double max_abs_diff(const Array3<Tag>& a, const Array3<Tag>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("sare_" + tag + "_" + std::to_string(rd()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

}  // namespace sare::testing
