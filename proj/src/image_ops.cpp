#include "sare/image_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace sare {

namespace {

double cubic(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
    return 0.0;
}

struct Taps {
    std::vector<int> first;
    std::vector<int> count;
    std::vector<double> weights;  // count.max per output, padded
    int stride = 0;
};

// Per-output-sample source taps for one axis.
Taps make_taps(int in_size, int out_size) {
    const double scale = static_cast<double>(in_size) / out_size;
    const double support_scale = std::max(1.0, scale);
    const double support = 2.0 * support_scale;
    Taps taps;
    taps.stride = static_cast<int>(std::ceil(support)) * 2 + 3;
    taps.first.resize(out_size);
    taps.count.resize(out_size);
    taps.weights.assign(static_cast<std::size_t>(out_size) * taps.stride, 0.0);
    for (int o = 0; o < out_size; ++o) {
        const double center = (o + 0.5) * scale;
        int lo = static_cast<int>(std::floor(center - support));
        int hi = static_cast<int>(std::ceil(center + support));
        lo = std::max(lo, 0);
        hi = std::min(hi, in_size);
        double* w = &taps.weights[static_cast<std::size_t>(o) * taps.stride];
        double total = 0.0;
        int n = 0;
        for (int i = lo; i < hi && n < taps.stride; ++i, ++n) {
            w[n] = cubic((i + 0.5 - center) / support_scale);
            total += w[n];
        }
        if (total != 0.0) {
            for (int k = 0; k < n; ++k) w[k] /= total;
        }
        taps.first[o] = lo;
        taps.count[o] = n;
    }
    return taps;
}

}  // namespace

template <class Tag>
Array3<Tag> resize_bicubic(const Array3<Tag>& src, int out_height, int out_width) {
    if (out_height < 1 || out_width < 1) throw ParameterError("size", "target dimensions must be >= 1");
    if (src.height() < 1 || src.width() < 1) throw ParameterError("image", "source has a zero dimension");
    if (src.height() == out_height && src.width() == out_width) return src;

    const Taps th = make_taps(src.height(), out_height);
    const Taps tw = make_taps(src.width(), out_width);

    // Horizontal pass into (C, H_in, W_out), then vertical pass.
    Array3<Tag> tmp(src.channels(), src.height(), out_width);
    for (int c = 0; c < src.channels(); ++c) {
        for (int y = 0; y < src.height(); ++y) {
            for (int x = 0; x < out_width; ++x) {
                const double* w = &tw.weights[static_cast<std::size_t>(x) * tw.stride];
                double acc = 0.0;
                for (int k = 0; k < tw.count[x]; ++k) acc += w[k] * src(c, y, tw.first[x] + k);
                tmp(c, y, x) = acc;
            }
        }
    }
    Array3<Tag> out(src.channels(), out_height, out_width);
    for (int c = 0; c < src.channels(); ++c) {
        for (int y = 0; y < out_height; ++y) {
            const double* w = &th.weights[static_cast<std::size_t>(y) * th.stride];
            for (int x = 0; x < out_width; ++x) {
                double acc = 0.0;
                for (int k = 0; k < th.count[y]; ++k) acc += w[k] * tmp(c, th.first[y] + k, x);
                out(c, y, x) = acc;
            }
        }
    }
    return out;
}

template <class Tag>
void clamp01(Array3<Tag>& a) {
    for (double& v : a.values()) v = std::clamp(v, 0.0, 1.0);
}

void quantize16(ImageArray& image) {
    for (double& v : image.values()) v = std::round(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0;
}

void quantize8(ImageArray& image) {
    for (double& v : image.values()) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

template <class Tag>
Array3<Tag> crop(const Array3<Tag>& src, const CropWindow& w) {
    if (w.top < 0 || w.left < 0 || w.height < 1 || w.width < 1 || w.top + w.height > src.height() ||
        w.left + w.width > src.width()) {
        throw ParameterError("crop", "window outside image " + src.shape().str());
    }
    Array3<Tag> out(src.channels(), w.height, w.width);
    for (int c = 0; c < src.channels(); ++c) {
        for (int y = 0; y < w.height; ++y) {
            for (int x = 0; x < w.width; ++x) out(c, y, x) = src(c, w.top + y, w.left + x);
        }
    }
    return out;
}

template <class Tag>
Array3<Tag> flip_horizontal(const Array3<Tag>& src) {
    Array3<Tag> out(src.shape());
    const int w = src.width();
    for (int c = 0; c < src.channels(); ++c) {
        for (int y = 0; y < src.height(); ++y) {
            for (int x = 0; x < w; ++x) out(c, y, x) = src(c, y, w - 1 - x);
        }
    }
    return out;
}

template <class Tag>
Array3<Tag> rotate(const Array3<Tag>& src, double degrees) {
    const double rad = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(rad);
    const double sn = std::sin(rad);
    const double cy = (src.height() - 1) / 2.0;
    const double cx = (src.width() - 1) / 2.0;
    Array3<Tag> out(src.shape());
    for (int y = 0; y < src.height(); ++y) {
        for (int x = 0; x < src.width(); ++x) {
            // Inverse map: output pixel -> source position.
            const double dx = x - cx;
            const double dy = y - cy;
            const double sx = std::clamp(cs * dx + sn * dy + cx, 0.0, src.width() - 1.0);
            const double sy = std::clamp(-sn * dx + cs * dy + cy, 0.0, src.height() - 1.0);
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const int x1 = std::min(x0 + 1, src.width() - 1);
            const int y1 = std::min(y0 + 1, src.height() - 1);
            const double fx = sx - x0;
            const double fy = sy - y0;
            for (int c = 0; c < src.channels(); ++c) {
                const double top = src(c, y0, x0) * (1 - fx) + src(c, y0, x1) * fx;
                const double bot = src(c, y1, x0) * (1 - fx) + src(c, y1, x1) * fx;
                out(c, y, x) = top * (1 - fy) + bot * fy;
            }
        }
    }
    return out;
}

template <class Tag>
Array3<Tag> gaussian_blur(const Array3<Tag>& src, double sigma) {
    if (!(sigma > 0.0)) return src;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += k[i + radius];
    }
    for (double& v : k) v /= total;

    const int h = src.height();
    const int w = src.width();
    Array3<Tag> tmp(src.shape());
    Array3<Tag> out(src.shape());
    for (int c = 0; c < src.channels(); ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * src(c, y, std::clamp(x + i, 0, w - 1));
                tmp(c, y, x) = acc;
            }
        }
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(c, std::clamp(y + i, 0, h - 1), x);
                out(c, y, x) = acc;
            }
        }
    }
    return out;
}

template <class Tag>
Array3<Tag> average_pool(const Array3<Tag>& src, int factor) {
    if (factor < 1) throw ParameterError("factor", "must be >= 1");
    const int oh = src.height() / factor;
    const int ow = src.width() / factor;
    if (oh < 1 || ow < 1) throw ParameterError("factor", "larger than the image");
    Array3<Tag> out(src.channels(), oh, ow);
    const double norm = 1.0 / (factor * factor);
    for (int c = 0; c < src.channels(); ++c) {
        for (int y = 0; y < oh * factor; ++y) {
            for (int x = 0; x < ow * factor; ++x) out(c, y / factor, x / factor) += src(c, y, x);
        }
    }
    for (double& v : out.values()) v *= norm;
    return out;
}

template <class Tag>
Array3<Tag> upsample_nearest(const Array3<Tag>& src, int factor) {
    if (factor < 1) throw ParameterError("factor", "must be >= 1");
    Array3<Tag> out(src.channels(), src.height() * factor, src.width() * factor);
    for (int c = 0; c < out.channels(); ++c) {
        for (int y = 0; y < out.height(); ++y) {
            for (int x = 0; x < out.width(); ++x) out(c, y, x) = src(c, y / factor, x / factor);
        }
    }
    return out;
}

template <class Tag>
double mean_value(const Array3<Tag>& a) {
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (double v : a.values()) s += v;
    return s / static_cast<double>(a.size());
}

#define SARE_INSTANTIATE(Tag)                                                    \
    template Array3<Tag> resize_bicubic(const Array3<Tag>&, int, int);          \
    template void clamp01(Array3<Tag>&);                                         \
    template Array3<Tag> crop(const Array3<Tag>&, const CropWindow&);           \
    template Array3<Tag> flip_horizontal(const Array3<Tag>&);                    \
    template Array3<Tag> rotate(const Array3<Tag>&, double);                     \
    template Array3<Tag> gaussian_blur(const Array3<Tag>&, double);              \
    template Array3<Tag> average_pool(const Array3<Tag>&, int);                  \
    template Array3<Tag> upsample_nearest(const Array3<Tag>&, int);              \
    template double mean_value(const Array3<Tag>&);

SARE_INSTANTIATE(ImageTag)
SARE_INSTANTIATE(LatentTag)

#undef SARE_INSTANTIATE

}  // namespace sare
