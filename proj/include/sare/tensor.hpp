#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sare/errors.hpp"

namespace sare {

struct Shape3 {
    int channels = 0;
    int height = 0;
    int width = 0;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }
    std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
    friend bool operator==(const Shape3&, const Shape3&) = default;
    std::string str() const {
        return "(" + std::to_string(channels) + ", " + std::to_string(height) + ", " + std::to_string(width) + ")";
    }
};

/// Dense (channels, height, width) array of doubles, channel-major.
/// The tag keeps images and latents from being mixed up at compile time.
template <class Tag>
class Array3 {
public:
    Array3() = default;
    explicit Array3(Shape3 shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {
        if (shape.channels < 0 || shape.height < 0 || shape.width < 0) {
            throw ShapeError("negative dimension in " + shape.str());
        }
    }
    Array3(int channels, int height, int width, double fill = 0.0) : Array3(Shape3{channels, height, width}, fill) {}
    Array3(Shape3 shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
        if (data_.size() != shape_.size()) {
            throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " + shape_.str());
        }
    }

    const Shape3& shape() const noexcept { return shape_; }
    int channels() const noexcept { return shape_.channels; }
    int height() const noexcept { return shape_.height; }
    int width() const noexcept { return shape_.width; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(int c, int y, int x) noexcept { return data_[index(c, y, x)]; }
    double operator()(int c, int y, int x) const noexcept { return data_[index(c, y, x)]; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::span<double> channel(int c) noexcept { return {data_.data() + c * shape_.plane(), shape_.plane()}; }
    std::span<const double> channel(int c) const noexcept { return {data_.data() + c * shape_.plane(), shape_.plane()}; }

    bool all_finite() const noexcept {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    friend bool operator==(const Array3&, const Array3&) = default;

private:
    std::size_t index(int c, int y, int x) const noexcept {
        return (static_cast<std::size_t>(c) * shape_.height + static_cast<std::size_t>(y)) * shape_.width +
               static_cast<std::size_t>(x);
    }

    Shape3 shape_{};
    std::vector<double> data_;
};

struct ImageTag {};
struct LatentTag {};

/// RGB image, values in [0, 1].
using ImageArray = Array3<ImageTag>;
/// Latent-space array consumed by the diffusion kernel.
using LatentArray = Array3<LatentTag>;

/// Reinterprets an array under another tag without touching the values.
template <class To, class From>
Array3<To> retag(const Array3<From>& a) {
    return Array3<To>(a.shape(), std::vector<double>(a.values().begin(), a.values().end()));
}

template <class A, class B>
void require_same_shape(const Array3<A>& a, const Array3<B>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape " + a.shape().str() + " vs " + b.shape().str());
    }
}

}  // namespace sare
