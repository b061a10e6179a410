#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "sare/checkpoint.hpp"
#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/toyworld.hpp"

namespace sare::toy {

namespace fs = std::filesystem;

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXf;
using MatMap = Eigen::Map<Mat>;
using VecMap = Eigen::Map<Vec>;

namespace {

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

Mat silu(const Mat& x) {
    return x.unaryExpr([](float v) { return v * sigmoid(v); });
}

Mat silu_grad(const Mat& x) {
    return x.unaryExpr([](float v) {
        const float s = sigmoid(v);
        return s * (1.0f + v * (1.0f - s));
    });
}

// (cin * 9) x (h * w) patch matrix for a 3x3 kernel with dilation d and zero padding d.
void im2col(const Mat& in, int h, int w, int d, Mat& col) {
    const int cin = static_cast<int>(in.rows());
    col.setZero(cin * 9, static_cast<Eigen::Index>(h) * w);
    for (int c = 0; c < cin; ++c) {
        const float* src = in.row(c).data();
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                float* dst = col.row(c * 9 + ky * 3 + kx).data();
                const int oy = (ky - 1) * d, ox = (kx - 1) * d;
                const int x_lo = std::max(0, -ox), x_hi = std::min(w, w - ox);
                for (int y = std::max(0, -oy); y < std::min(h, h - oy); ++y) {
                    std::memcpy(dst + y * w + x_lo, src + (y + oy) * w + x_lo + ox,
                                sizeof(float) * static_cast<std::size_t>(std::max(0, x_hi - x_lo)));
                }
            }
        }
    }
}

// Adjoint of im2col: scatters patch gradients back onto the input grid (accumulating).
void col2im(const Mat& col, int h, int w, int d, Mat& out) {
    const int cin = static_cast<int>(col.rows() / 9);
    for (int c = 0; c < cin; ++c) {
        float* dst = out.row(c).data();
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const float* src = col.row(c * 9 + ky * 3 + kx).data();
                const int oy = (ky - 1) * d, ox = (kx - 1) * d;
                const int x_lo = std::max(0, -ox), x_hi = std::min(w, w - ox);
                for (int y = std::max(0, -oy); y < std::min(h, h - oy); ++y) {
                    const float* s = src + y * w;
                    float* o = dst + (y + oy) * w + ox;
                    for (int x = x_lo; x < x_hi; ++x) o[x] += s[x];
                }
            }
        }
    }
}

}  // namespace

struct ToyDenoiser::Net {
    struct Block {
        std::string name;
        int rows = 0;
        int cols = 0;
        std::size_t offset = 0;
    };
    struct Layer {
        int cin = 0, cout = 0, dil = 1;
        int W = -1, b = -1, P = -1;  // block indices, P = -1 for the output layer
    };

    ToyDenoiserSpec spec;
    std::vector<Block> blocks;
    std::vector<Layer> layers;
    int A = -1, a = -1;
    std::vector<float> params;

    int add(const std::string& name, int rows, int cols) {
        const std::size_t off = blocks.empty() ? 0 : blocks.back().offset + static_cast<std::size_t>(blocks.back().rows) * blocks.back().cols;
        blocks.push_back({name, rows, cols, off});
        return static_cast<int>(blocks.size()) - 1;
    }

    explicit Net(const ToyDenoiserSpec& s) : spec(s) {
        if (s.hidden < 1 || s.image_channels < 1 || s.time_dim < 2 || s.time_dim % 2 != 0 || s.cond_dim < 1 || s.embed_dim < 1) {
            throw ParameterError("spec", "invalid toy denoiser dimensions");
        }
        A = add("cond.A", s.embed_dim, s.time_dim + s.cond_dim);
        a = add("cond.a", s.embed_dim, 1);
        std::vector<int> dils{1};
        dils.insert(dils.end(), s.dilations.begin(), s.dilations.end());
        for (std::size_t l = 0; l < dils.size(); ++l) {
            Layer L;
            L.cin = l == 0 ? s.image_channels : s.hidden;
            L.cout = s.hidden;
            L.dil = dils[l];
            const std::string p = "conv" + std::to_string(l);
            L.W = add(p + ".W", L.cout, L.cin * 9);
            L.b = add(p + ".b", L.cout, 1);
            L.P = add(p + ".P", L.cout, s.embed_dim);
            layers.push_back(L);
        }
        Layer out;
        out.cin = s.hidden;
        out.cout = s.image_channels;
        out.dil = 1;
        const std::string p = "conv" + std::to_string(dils.size());
        out.W = add(p + ".W", out.cout, out.cin * 9);
        out.b = add(p + ".b", out.cout, 1);
        layers.push_back(out);
        params.assign(blocks.back().offset + static_cast<std::size_t>(blocks.back().rows) * blocks.back().cols, 0.0f);
    }

    MatMap m(std::vector<float>& buf, int i) const {
        const auto& B = blocks[static_cast<std::size_t>(i)];
        return MatMap(buf.data() + B.offset, B.rows, B.cols);
    }
    Eigen::Map<const Mat> m(const std::vector<float>& buf, int i) const {
        const auto& B = blocks[static_cast<std::size_t>(i)];
        return Eigen::Map<const Mat>(buf.data() + B.offset, B.rows, B.cols);
    }

    void init(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<float> n(0.0f, 1.0f);
        auto fill = [&](int i, float stddev) {
            auto M = m(params, i);
            for (Eigen::Index r = 0; r < M.rows(); ++r) {
                for (Eigen::Index c = 0; c < M.cols(); ++c) M(r, c) = stddev * n(rng);
            }
        };
        fill(A, std::sqrt(1.0f / static_cast<float>(spec.time_dim + spec.cond_dim)));
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& L = layers[l];
            const float fan_in = static_cast<float>(L.cin * 9);
            const bool last = l + 1 == layers.size();
            // residual branches start small so the stack begins near identity
            const float gain = last ? 1.0f : (l == 0 ? 2.0f : 0.5f);
            fill(L.W, std::sqrt(gain / fan_in));
            if (L.P >= 0) fill(L.P, std::sqrt(1.0f / static_cast<float>(spec.embed_dim)));
        }
    }

    Vec time_embedding(int t) const {
        const int half = spec.time_dim / 2;
        Vec e(spec.time_dim);
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            e[i] = static_cast<float>(std::sin(t * freq));
            e[half + i] = static_cast<float>(std::cos(t * freq));
        }
        return e;
    }

    struct Cache {
        Vec e_in, g, emb;
        std::vector<Mat> cols, pres, hs;
    };

    Vec cond_input(int t, const std::vector<float>& pooled) const {
        if (static_cast<int>(pooled.size()) != spec.cond_dim) {
            throw ShapeError("condition width " + std::to_string(pooled.size()) + " != " + std::to_string(spec.cond_dim));
        }
        Vec e(spec.time_dim + spec.cond_dim);
        e.head(spec.time_dim) = time_embedding(t);
        for (int i = 0; i < spec.cond_dim; ++i) e[spec.time_dim + i] = pooled[static_cast<std::size_t>(i)];
        return e;
    }

    // z: (channels, h*w). Returns the noise prediction with the same layout.
    Mat forward(const Mat& z, int h, int w, int t, const std::vector<float>& pooled, Cache* cache) const {
        Vec e_in = cond_input(t, pooled);
        Vec g = m(params, A) * e_in + m(params, a);
        Vec emb = g.unaryExpr([](float v) { return v * sigmoid(v); });
        Mat col, h_prev = z, out;
        if (cache) {
            cache->cols.assign(layers.size(), {});
            cache->pres.assign(layers.size(), {});
            cache->hs.assign(layers.size(), {});
        }
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& L = layers[l];
            im2col(h_prev, h, w, L.dil, col);
            Mat pre = m(params, L.W) * col;
            Vec bias = m(params, L.b);
            if (L.P >= 0) bias += m(params, L.P) * emb;
            pre.colwise() += bias;
            if (l + 1 == layers.size()) {
                out = std::move(pre);
            } else {
                Mat act = silu(pre);
                Mat next = l == 0 ? act : Mat(h_prev + act);
                if (cache) {
                    cache->pres[l] = std::move(pre);
                    cache->hs[l] = next;
                }
                h_prev = std::move(next);
            }
            if (cache) cache->cols[l] = col;
        }
        if (cache) {
            cache->e_in = std::move(e_in);
            cache->g = std::move(g);
            cache->emb = std::move(emb);
        }
        return out;
    }

    // Accumulates d(loss)/d(params) into grad given d(loss)/d(output).
    void backward(const Mat& d_out, int h, int w, const Cache& cache, std::vector<float>& grad) const {
        Vec d_emb = Vec::Zero(spec.embed_dim);
        Mat d_h;
        for (std::size_t li = layers.size(); li-- > 0;) {
            const auto& L = layers[li];
            Mat d_pre;
            if (li + 1 == layers.size()) {
                d_pre = d_out;
            } else {
                d_pre = d_h.cwiseProduct(silu_grad(cache.pres[li]));
            }
            m(grad, L.W).noalias() += d_pre * cache.cols[li].transpose();
            const Vec d_bias = d_pre.rowwise().sum();
            m(grad, L.b) += d_bias;
            if (L.P >= 0) {
                m(grad, L.P).noalias() += d_bias * cache.emb.transpose();
                d_emb.noalias() += m(params, L.P).transpose() * d_bias;
            }
            if (li == 0) break;
            const Mat d_col = m(params, L.W).transpose() * d_pre;
            // residual path carries d_h straight through for every hidden layer except the first
            Mat d_in = (li + 1 == layers.size() || li == 0) ? Mat::Zero(L.cin, static_cast<Eigen::Index>(h) * w) : d_h;
            col2im(d_col, h, w, L.dil, d_in);
            d_h = std::move(d_in);
        }
        const Vec d_g = d_emb.cwiseProduct(cache.g.unaryExpr([](float v) {
            const float s = sigmoid(v);
            return s * (1.0f + v * (1.0f - s));
        }));
        m(grad, A).noalias() += d_g * cache.e_in.transpose();
        m(grad, a) += d_g;
    }
};

namespace {

struct Precond {
    float shift, c_in, c_skip, c_out;
};

Precond precond(const ToyDenoiserSpec& spec, double ab) {
    const double s2 = spec.data_std * spec.data_std;
    const double v = ab * s2 + 1.0 - ab;
    return {static_cast<float>(std::sqrt(ab) * spec.data_mean), static_cast<float>(1.0 / std::sqrt(v)),
            static_cast<float>(std::sqrt(1.0 - ab) / v), static_cast<float>(std::sqrt(ab * s2 / v))};
}

// Preconditioned net input for a raw latent buffer.
template <class Get>
Mat net_input(Eigen::Index rows, Eigen::Index cols, const Precond& p, Get&& z) {
    Mat out(rows, cols);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = p.c_in * (z(i) - p.shift);
    return out;
}

std::vector<float> pooled_of(const ConditionEmbedding& cond) {
    const auto p = cond.pooled();
    return std::vector<float>(p.begin(), p.end());
}

}  // namespace

ToyDenoiser::ToyDenoiser(ToyDenoiserSpec spec, NoiseSchedule schedule, std::uint64_t init_seed)
    : spec_(std::move(spec)), schedule_(std::move(schedule)), net_(std::make_unique<Net>(spec_)) {
    net_->init(init_seed);
}

ToyDenoiser::~ToyDenoiser() = default;
ToyDenoiser::ToyDenoiser(ToyDenoiser&&) noexcept = default;
ToyDenoiser& ToyDenoiser::operator=(ToyDenoiser&&) noexcept = default;

std::string ToyDenoiser::identifier() const {
    return "toy-denoiser-v1-h" + std::to_string(spec_.hidden) + "-" + weights_digest().substr(0, 16);
}

std::size_t ToyDenoiser::parameter_count() const { return net_->params.size(); }

std::string ToyDenoiser::weights_digest() const {
    Sha256 h;
    h.update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(net_->params.data()),
                                           net_->params.size() * sizeof(float)));
    return h.hex_digest();
}

LatentArray ToyDenoiser::predict_noise(const LatentArray& z_t, int t, const ConditionEmbedding& cond) {
    if (z_t.channels() != spec_.image_channels) {
        throw ShapeError("toy denoiser expects " + std::to_string(spec_.image_channels) + " channels, got " + z_t.shape().str());
    }
    if (t < 0 || t > schedule_.t_max()) throw ParameterError("t", "outside the training schedule");
    const Precond p = precond(spec_, schedule_.alpha_bar(t));
    const Mat in = net_input(z_t.channels(), static_cast<Eigen::Index>(z_t.height()) * z_t.width(), p,
                             [&](Eigen::Index i) { return static_cast<float>(z_t[static_cast<std::size_t>(i)]); });
    const Mat out = net_->forward(in, z_t.height(), z_t.width(), t, pooled_of(cond), nullptr);
    LatentArray eps(z_t.shape());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        eps[i] = static_cast<double>(p.c_skip) * (z_t[i] - p.shift) + static_cast<double>(p.c_out) * out.data()[i];
    }
    return eps;
}

void ToyDenoiser::save(const fs::path& dir) const {
    nlohmann::json spec{{"kind", "toy-denoiser-v1"},
                        {"hidden", spec_.hidden},
                        {"image_channels", spec_.image_channels},
                        {"time_dim", spec_.time_dim},
                        {"cond_dim", spec_.cond_dim},
                        {"embed_dim", spec_.embed_dim},
                        {"dilations", spec_.dilations},
                        {"data_mean", spec_.data_mean},
                        {"data_std", spec_.data_std},
                        {"alpha_bar", std::vector<double>(schedule_.alpha_bars().begin(), schedule_.alpha_bars().end())},
                        {"weights_digest", weights_digest()}};
    std::vector<NamedArray> arrays;
    for (const auto& b : net_->blocks) {
        NamedArray arr;
        arr.name = b.name;
        arr.shape = {static_cast<std::size_t>(b.rows), static_cast<std::size_t>(b.cols)};
        arr.values.assign(net_->params.begin() + static_cast<std::ptrdiff_t>(b.offset),
                          net_->params.begin() + static_cast<std::ptrdiff_t>(b.offset + static_cast<std::size_t>(b.rows) * b.cols));
        arrays.push_back(std::move(arr));
    }
    write_checkpoint(dir, spec, arrays);
}

ToyDenoiser ToyDenoiser::load(const fs::path& dir) {
    const LoadedCheckpoint ck = read_checkpoint(dir);
    if (ck.spec.value("kind", std::string()) != "toy-denoiser-v1") throw IoError(dir.string() + " is not a toy denoiser checkpoint");
    ToyDenoiserSpec spec;
    spec.hidden = ck.spec.at("hidden").get<int>();
    spec.image_channels = ck.spec.at("image_channels").get<int>();
    spec.time_dim = ck.spec.at("time_dim").get<int>();
    spec.cond_dim = ck.spec.at("cond_dim").get<int>();
    spec.embed_dim = ck.spec.at("embed_dim").get<int>();
    spec.dilations = ck.spec.at("dilations").get<std::vector<int>>();
    spec.data_mean = ck.spec.at("data_mean").get<double>();
    spec.data_std = ck.spec.at("data_std").get<double>();
    ToyDenoiser model(spec, NoiseSchedule::from_alpha_bar(ck.spec.at("alpha_bar").get<std::vector<double>>()), 0);
    for (const auto& b : model.net_->blocks) {
        const NamedArray& arr = ck.array(b.name);
        if (arr.values.size() != static_cast<std::size_t>(b.rows) * b.cols) throw IoError("array " + b.name + " has the wrong size");
        std::copy(arr.values.begin(), arr.values.end(), model.net_->params.begin() + static_cast<std::ptrdiff_t>(b.offset));
    }
    if (ck.spec.contains("weights_digest") && ck.spec.at("weights_digest").get<std::string>() != model.weights_digest()) {
        throw IoError("weights digest mismatch in " + dir.string());
    }
    return model;
}

// ---------------------------------------------------------------------------

ToyTrainResult train_toy_denoiser(const std::vector<ToyItem>& items, const TextEncoderBackend& encoder,
                                  const NoiseSchedule& schedule, const ToyTrainOptions& options) {
    if (items.empty()) throw TrainingError("toy denoiser training needs a nonempty dataset");
    if (options.epochs < 1) throw ParameterError("epochs", "must be >= 1");
    if (options.batch_size < 1) throw ParameterError("batch_size", "must be >= 1");
    if (!(options.learning_rate > 0.0)) throw ParameterError("learning_rate", "must be > 0");
    if (!(options.caption_dropout >= 0.0 && options.caption_dropout <= 1.0)) {
        throw ParameterError("caption_dropout", "must lie in [0, 1]");
    }
    const Shape3 shape = items.front().image.shape();
    for (const auto& it : items) {
        if (it.image.shape() != shape) throw ShapeError("toy training images must share one shape");
    }

    ToyDenoiserSpec spec = options.spec;
    {
        double sum = 0.0, sum2 = 0.0, n = 0.0;
        for (const auto& it : items) {
            for (double v : it.image.values()) {
                sum += v;
                sum2 += v * v;
            }
            n += static_cast<double>(it.image.size());
        }
        spec.data_mean = sum / n;
        spec.data_std = std::max(1e-3, std::sqrt(std::max(0.0, sum2 / n - spec.data_mean * spec.data_mean)));
    }
    ToyDenoiser model(spec, schedule, derive_seed(options.seed, 0x1417));
    auto& net = model.net();

    std::vector<std::vector<float>> conds;
    conds.reserve(items.size());
    for (const auto& it : items) conds.push_back(pooled_of(encoder.embed(it.caption.text)));
    const std::vector<float> null_cond = pooled_of(encoder.null_embedding());

    std::mt19937_64 rng(derive_seed(options.seed, 0x7a1));
    std::uniform_int_distribution<int> t_dist(1, schedule.t_max());
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<float> normal(0.0f, 1.0f);

    const std::size_t n_params = net.params.size();
    std::vector<float> grad(n_params), m1(n_params, 0.0f), m2(n_params, 0.0f);
    const int h = shape.height, w = shape.width;
    const std::size_t batches_per_epoch = (items.size() + options.batch_size - 1) / options.batch_size;
    const double total_steps = static_cast<double>(batches_per_epoch) * options.epochs;
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8, kClip = 1.0, kFloor = 0.05;

    ToyTrainResult result{std::move(model), {}};
    std::vector<std::size_t> order(items.size());
    std::size_t step = 0;
    ToyDenoiser::Net::Cache cache;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const std::size_t end = std::min(order.size(), start + options.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0f);
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const ToyItem& item = items[order[k]];
                const int t = t_dist(rng);
                const bool drop = u01(rng) < options.caption_dropout;
                const float sa = static_cast<float>(std::sqrt(schedule.alpha_bar(t)));
                const float sn = static_cast<float>(std::sqrt(1.0 - schedule.alpha_bar(t)));
                const Precond p = precond(spec, schedule.alpha_bar(t));
                Mat eps(shape.channels, static_cast<Eigen::Index>(h) * w);
                for (Eigen::Index j = 0; j < eps.size(); ++j) eps.data()[j] = normal(rng);
                Mat z(eps.rows(), eps.cols());
                for (Eigen::Index j = 0; j < z.size(); ++j) {
                    z.data()[j] = sa * static_cast<float>(item.image[static_cast<std::size_t>(j)]) + sn * eps.data()[j];
                }
                const Mat in = net_input(z.rows(), z.cols(), p, [&](Eigen::Index j) { return z.data()[j]; });
                const Mat f = net.forward(in, h, w, t, drop ? null_cond : conds[order[k]], &cache);
                const Mat diff = (p.c_skip * (z.array() - p.shift)).matrix() + p.c_out * f - eps;
                const double loss = static_cast<double>(diff.squaredNorm()) / static_cast<double>(diff.size());
                if (!std::isfinite(loss)) {
                    throw TrainingError("non-finite toy denoiser loss at epoch " + std::to_string(epoch) + ", step " +
                                        std::to_string(step));
                }
                batch_loss += loss;
                const float scale = 2.0f * p.c_out / static_cast<float>(diff.size() * static_cast<Eigen::Index>(end - start));
                net.backward(diff * scale, h, w, cache, grad);
            }
            epoch_loss += batch_loss;

            double norm2 = 0.0;
            for (float g : grad) norm2 += static_cast<double>(g) * g;
            const double clip = std::sqrt(norm2) > kClip ? kClip / std::sqrt(norm2) : 1.0;
            ++step;
            const double progress = std::min(1.0, (step - 1) / std::max(1.0, total_steps - 1));
            const double lr = options.learning_rate * (kFloor + (1.0 - kFloor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
            const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
            for (std::size_t j = 0; j < n_params; ++j) {
                const double g = grad[j] * clip;
                m1[j] = static_cast<float>(kBeta1 * m1[j] + (1.0 - kBeta1) * g);
                m2[j] = static_cast<float>(kBeta2 * m2[j] + (1.0 - kBeta2) * g * g);
                const double upd = lr * (m1[j] / bc1) / (std::sqrt(m2[j] / bc2) + kEps);
                net.params[j] -= static_cast<float>(upd);
            }
        }
        result.loss_trace.push_back(epoch_loss / static_cast<double>(items.size()));
        spdlog::debug("toy denoiser epoch {} loss {:.5f}", epoch, result.loss_trace.back());
    }
    return result;
}

PredictionError toy_prediction_error(ToyDenoiser& model, const std::vector<ToyItem>& items,
                                     const TextEncoderBackend& encoder, int t, std::uint64_t seed) {
    if (items.empty()) throw ParameterError("items", "must be nonempty");
    const auto& sched = model.schedule();
    const double ab = sched.alpha_bar(t);
    PredictionError out;
    std::size_t count = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& item = items[i];
        const LatentArray x0 = retag<LatentTag>(item.image);
        const LatentArray eps = gaussian_latent(x0.shape(), derive_seed(seed, static_cast<std::uint64_t>(t), i));
        const LatentArray z = forward_noise(x0, t, eps, sched);
        const LatentArray pred = model.predict_noise(z, t, encoder.embed(item.caption.text));
        for (std::size_t j = 0; j < z.size(); ++j) {
            const double e = pred[j] - eps[j];
            out.eps_mse += e * e;
            // x0_hat - x0 = -sqrt((1 - ab) / ab) * (eps_hat - eps)
            out.x0_mse += e * e * (1.0 - ab) / ab;
        }
        count += z.size();
    }
    out.eps_mse /= static_cast<double>(count);
    out.x0_mse /= static_cast<double>(count);
    return out;
}

}  // namespace sare::toy
