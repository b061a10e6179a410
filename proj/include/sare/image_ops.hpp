#pragma once

#include <cstdint>

#include "sare/tensor.hpp"

namespace sare {

/// Separable bicubic resampling (Keys kernel, a = -0.5) with the kernel widened when
/// downscaling so every source pixel contributes. Border weights are renormalized.
template <class Tag>
Array3<Tag> resize_bicubic(const Array3<Tag>& src, int out_height, int out_width);

template <class Tag>
void clamp01(Array3<Tag>& a);

/// Rounds every sample onto the 16-bit grid k / 65535 (after clamping to [0, 1]).
void quantize16(ImageArray& image);
/// Rounds every sample onto the 8-bit grid k / 255 (after clamping to [0, 1]).
void quantize8(ImageArray& image);

struct CropWindow {
    int top = 0;
    int left = 0;
    int height = 0;
    int width = 0;
    friend bool operator==(const CropWindow&, const CropWindow&) = default;
};

template <class Tag>
Array3<Tag> crop(const Array3<Tag>& src, const CropWindow& window);

template <class Tag>
Array3<Tag> flip_horizontal(const Array3<Tag>& src);

/// Rotation about the image centre with bilinear sampling and edge clamping.
template <class Tag>
Array3<Tag> rotate(const Array3<Tag>& src, double degrees);

/// Separable Gaussian blur, kernel radius ceil(3 sigma), edge clamping.
template <class Tag>
Array3<Tag> gaussian_blur(const Array3<Tag>& src, double sigma);

/// Non-overlapping box average by an integer factor; trailing rows/columns are dropped.
template <class Tag>
Array3<Tag> average_pool(const Array3<Tag>& src, int factor);

/// Nearest-neighbour upsampling by an integer factor.
template <class Tag>
Array3<Tag> upsample_nearest(const Array3<Tag>& src, int factor);

template <class Tag>
double mean_value(const Array3<Tag>& a);

}  // namespace sare
