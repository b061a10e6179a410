#include "sare/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <spdlog/spdlog.h>

#include "sare/checkpoint.hpp"
#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/parallel.hpp"
#include "sare/recon.hpp"

namespace sare::detect {

namespace fs = std::filesystem;

namespace {

Matrix random_matrix(int rows, int cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

void require_finite(const Matrix& m, const char* encoder) {
    if (!m.allFinite()) throw NumericError(std::string("non-finite activations in the ") + encoder + " encoder");
}

}  // namespace

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double bce_with_logit(double logit, int label) {
    // softplus(logit) - label * logit
    const double sp = logit > 0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
    return sp - static_cast<double>(label) * logit;
}

// ---------------------------------------------------------------------------

PatchEncoder::PatchEncoder(EncoderSpec spec, std::uint64_t seed) : spec_(spec) {
    if (spec.channels < 1 || spec.pool < 1 || spec.patch < 1 || spec.hidden < 1 || spec.out_dim < 1) {
        throw ParameterError("encoder", "dimensions must be positive");
    }
    std::mt19937_64 rng(seed);
    W1 = random_matrix(spec.patch_dim(), spec.hidden, std::sqrt(2.0 / spec.patch_dim()), rng);
    b1 = Vector::Zero(spec.hidden);
    W2 = random_matrix(spec.hidden, spec.out_dim, std::sqrt(1.0 / spec.hidden), rng);
    b2 = Vector::Zero(spec.out_dim);
}

int PatchEncoder::positions_for(int height, int width) const {
    return (height / spec_.stride()) * (width / spec_.stride());
}

Matrix PatchEncoder::tokens(const ImageArray& image) const {
    if (image.channels() != spec_.channels) {
        throw ShapeError("encoder expects " + std::to_string(spec_.channels) + " channels, got " + image.shape().str());
    }
    const int gh = image.height() / spec_.stride(), gw = image.width() / spec_.stride();
    if (gh < 1 || gw < 1) throw ShapeError("input " + image.shape().str() + " is smaller than one encoder stride");
    const ImageArray pooled = average_pool(image, spec_.pool);
    const int p = spec_.patch;
    Matrix out(gh * gw, spec_.patch_dim());
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int row = gy * gw + gx;
            for (int c = 0; c < spec_.channels; ++c) {
                for (int dy = 0; dy < p; ++dy) {
                    for (int dx = 0; dx < p; ++dx) {
                        out(row, (c * p + dy) * p + dx) = spec_.input_scale * pooled(c, gy * p + dy, gx * p + dx);
                    }
                }
            }
        }
    }
    return out;
}

Matrix PatchEncoder::forward_tokens(const Matrix& t, Matrix* pre_activation) const {
    Matrix z1 = t * W1;
    z1.rowwise() += b1.transpose();
    Matrix out = z1.cwiseMax(0.0) * W2;
    out.rowwise() += b2.transpose();
    if (pre_activation) *pre_activation = std::move(z1);
    return out;
}

FeatureSequence PatchEncoder::forward(const ImageArray& image, Origin origin) const {
    return FeatureSequence{forward_tokens(tokens(image)), origin};
}

// ---------------------------------------------------------------------------

void FusionWeights::validate() const {
    const auto d = W_Q.cols();
    if (d < 1) throw ShapeError("fusion dimension must be positive");
    if (W_K.cols() != d || W_V.cols() != d) throw ShapeError("W_Q, W_K and W_V must share the fusion dimension");
    if (W_K.rows() != W_V.rows()) throw ShapeError("W_K and W_V must share the SARE feature dimension");
    if (W_O.rows() != d || W_O.cols() != d) throw ShapeError("W_O must be (d, d)");
    if (head_count < 1 || d % head_count != 0) {
        throw ShapeError("fusion dimension " + std::to_string(d) + " is not divisible by head count " + std::to_string(head_count));
    }
    if (residual && W_Q.rows() != d) throw ShapeError("residual fusion needs d_x == d");
}

FusionWeights FusionWeights::random(int d_x, int d_s, int d, int heads, std::uint64_t seed, bool residual) {
    std::mt19937_64 rng(seed);
    FusionWeights w;
    w.W_Q = random_matrix(d_x, d, std::sqrt(1.0 / d_x), rng);
    w.W_K = random_matrix(d_s, d, std::sqrt(1.0 / d_s), rng);
    w.W_V = random_matrix(d_s, d, std::sqrt(1.0 / d_s), rng);
    w.W_O = random_matrix(d, d, std::sqrt(1.0 / d), rng);
    w.head_count = heads;
    w.residual = residual;
    w.validate();
    return w;
}

FeatureSequence cross_attention_fuse(const FeatureSequence& f_x, const FeatureSequence& f_s, const FusionWeights& w,
                                     FusionCache* cache) {
    w.validate();
    if (f_x.positions() < 1 || f_s.positions() < 1) throw ShapeError("feature sequences need at least one position");
    if (f_x.dim() != w.W_Q.rows()) {
        throw ShapeError("f_x dim " + std::to_string(f_x.dim()) + " does not match W_Q rows " + std::to_string(w.W_Q.rows()));
    }
    if (f_s.dim() != w.W_K.rows()) {
        throw ShapeError("f_S dim " + std::to_string(f_s.dim()) + " does not match W_K rows " + std::to_string(w.W_K.rows()));
    }
    const int d = w.d(), dh = d / w.head_count;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix Q = f_x.data * w.W_Q;
    Matrix K = f_s.data * w.W_K;
    Matrix V = f_s.data * w.W_V;
    Matrix H(Q.rows(), d);
    std::vector<Matrix> attn;
    attn.reserve(static_cast<std::size_t>(w.head_count));
    for (int h = 0; h < w.head_count; ++h) {
        Matrix S = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose() * scale;
        for (Eigen::Index r = 0; r < S.rows(); ++r) {
            const double mx = S.row(r).maxCoeff();
            S.row(r) = (S.row(r).array() - mx).exp();
            S.row(r) /= S.row(r).sum();
        }
        H.middleCols(h * dh, dh) = S * V.middleCols(h * dh, dh);
        attn.push_back(std::move(S));
    }
    FeatureSequence out{H * w.W_O, Origin::fused};
    if (w.residual) out.data += f_x.data;
    if (cache) {
        cache->Q = std::move(Q);
        cache->K = std::move(K);
        cache->V = std::move(V);
        cache->attention = std::move(attn);
        cache->heads = std::move(H);
    }
    return out;
}

FusionGradients cross_attention_backward(const FeatureSequence& f_x, const FeatureSequence& f_s, const FusionWeights& w,
                                         const FusionCache& cache, const Matrix& d_out) {
    const int d = w.d(), dh = d / w.head_count;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    FusionGradients g;
    g.W_O = cache.heads.transpose() * d_out;
    const Matrix dH = d_out * w.W_O.transpose();
    Matrix dQ(cache.Q.rows(), d), dK(cache.K.rows(), d), dV(cache.V.rows(), d);
    for (int h = 0; h < w.head_count; ++h) {
        const Matrix& A = cache.attention[static_cast<std::size_t>(h)];
        const auto dO = dH.middleCols(h * dh, dh);
        const Matrix dA = dO * cache.V.middleCols(h * dh, dh).transpose();
        dV.middleCols(h * dh, dh) = A.transpose() * dO;
        // softmax Jacobian, row by row
        const Vector row_dot = (dA.array() * A.array()).rowwise().sum();
        const Matrix dS = (A.array() * (dA.array().colwise() - row_dot.array())).matrix() * scale;
        dQ.middleCols(h * dh, dh) = dS * cache.K.middleCols(h * dh, dh);
        dK.middleCols(h * dh, dh) = dS.transpose() * cache.Q.middleCols(h * dh, dh);
    }
    g.W_Q = f_x.data.transpose() * dQ;
    g.W_K = f_s.data.transpose() * dK;
    g.W_V = f_s.data.transpose() * dV;
    g.f_x = dQ * w.W_Q.transpose();
    if (w.residual) g.f_x += d_out;
    g.f_s = dK * w.W_K.transpose() + dV * w.W_V.transpose();
    return g;
}

double classify_logit(const FeatureSequence& fused, const ClassifierHead& head) {
    if (fused.dim() != head.w.size()) throw ShapeError("head width does not match fused features");
    if (fused.positions() < 1) throw ShapeError("fused sequence is empty");
    const Vector pooled = fused.data.colwise().mean().transpose();
    return head.w.dot(pooled) + head.b;
}

double classify(const FeatureSequence& fused, const ClassifierHead& head) { return sigmoid(classify_logit(fused, head)); }

FusionHeadGradients fusion_head_gradients(const FeatureSequence& f_x, const FeatureSequence& f_s, const FusionWeights& w,
                                          const ClassifierHead& head, int label) {
    FusionCache cache;
    const FeatureSequence fused = cross_attention_fuse(f_x, f_s, w, &cache);
    const double logit = classify_logit(fused, head);
    FusionHeadGradients g;
    g.loss = bce_with_logit(logit, label);
    const double d_logit = sigmoid(logit) - label;
    const Vector pooled = fused.data.colwise().mean().transpose();
    g.head_w = d_logit * pooled;
    g.head_b = d_logit;
    const Matrix d_fused = Matrix::Ones(fused.positions(), 1) * (d_logit / fused.positions() * head.w.transpose());
    g.fusion = cross_attention_backward(f_x, f_s, w, cache, d_fused);
    return g;
}

// ---------------------------------------------------------------------------

DetectorSpec DetectorSpec::toy() {
    DetectorSpec s;
    s.image_encoder.hidden = 48;
    s.image_encoder.out_dim = 32;
    s.sare_encoder.hidden = 48;
    s.sare_encoder.out_dim = 32;
    s.sare_encoder.input_scale = 10.0;
    s.fusion_dim = 32;
    s.heads = 4;
    return s;
}

namespace {

nlohmann::json encoder_json(const EncoderSpec& e) {
    return {{"channels", e.channels}, {"pool", e.pool},       {"patch", e.patch},
            {"hidden", e.hidden},     {"out_dim", e.out_dim}, {"input_scale", e.input_scale}};
}

EncoderSpec encoder_from_json(const nlohmann::json& j) {
    EncoderSpec e;
    e.channels = j.at("channels").get<int>();
    e.pool = j.at("pool").get<int>();
    e.patch = j.at("patch").get<int>();
    e.hidden = j.at("hidden").get<int>();
    e.out_dim = j.at("out_dim").get<int>();
    e.input_scale = j.at("input_scale").get<double>();
    return e;
}

}  // namespace

nlohmann::json DetectorSpec::to_json() const {
    return {{"input_size", input_size},
            {"image_encoder", encoder_json(image_encoder)},
            {"sare_encoder", encoder_json(sare_encoder)},
            {"fusion_dim", fusion_dim},
            {"heads", heads},
            {"residual", residual},
            {"frozen", {{"image_encoder", image_encoder_frozen}, {"sare_encoder", sare_encoder_frozen}}}};
}

DetectorSpec DetectorSpec::from_json(const nlohmann::json& j) {
    DetectorSpec s;
    s.input_size = j.at("input_size").get<int>();
    s.image_encoder = encoder_from_json(j.at("image_encoder"));
    s.sare_encoder = encoder_from_json(j.at("sare_encoder"));
    s.fusion_dim = j.at("fusion_dim").get<int>();
    s.heads = j.at("heads").get<int>();
    s.residual = j.at("residual").get<bool>();
    s.image_encoder_frozen = j.at("frozen").at("image_encoder").get<bool>();
    s.sare_encoder_frozen = j.at("frozen").at("sare_encoder").get<bool>();
    return s;
}

DetectorModel::DetectorModel(DetectorSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    if (spec_.input_size < spec_.image_encoder.stride() || spec_.input_size < spec_.sare_encoder.stride()) {
        throw ParameterError("input_size", "smaller than an encoder stride");
    }
    image_encoder = PatchEncoder(spec_.image_encoder, derive_seed(seed, 1));
    sare_encoder = PatchEncoder(spec_.sare_encoder, derive_seed(seed, 2));
    fusion = FusionWeights::random(spec_.image_encoder.out_dim, spec_.sare_encoder.out_dim, spec_.fusion_dim, spec_.heads,
                                   derive_seed(seed, 3), spec_.residual);
    head.w = Vector::Zero(spec_.fusion_dim);
    head.b = 0.0;
}

namespace {

void check_input(const ImageArray& a, int size, const char* what) {
    if (a.height() != size || a.width() != size) {
        throw ShapeError(std::string(what) + " must be " + std::to_string(size) + "x" + std::to_string(size) + ", got " +
                         a.shape().str());
    }
}

}  // namespace

std::pair<FeatureSequence, FeatureSequence> extract_features(const ImageArray& image, const ImageArray& sare,
                                                             const DetectorModel& model) {
    check_input(image, model.spec().input_size, "image");
    check_input(sare, model.spec().input_size, "SARE map");
    FeatureSequence fx = model.image_encoder.forward(image, Origin::image);
    require_finite(fx.data, "image");
    FeatureSequence fs = model.sare_encoder.forward(sare, Origin::sare);
    require_finite(fs.data, "semantic");
    return {std::move(fx), std::move(fs)};
}

std::vector<std::pair<FeatureSequence, FeatureSequence>> extract_features_batch(const std::vector<ImageArray>& images,
                                                                               const std::vector<ImageArray>& sares,
                                                                               const DetectorModel& model) {
    if (images.size() != sares.size()) throw ShapeError("image and SARE batches differ in length");
    if (images.empty()) return {};
    auto stack = [&](const std::vector<ImageArray>& xs, const PatchEncoder& enc, const char* what) {
        std::vector<Matrix> toks;
        Eigen::Index rows = 0;
        for (const auto& x : xs) {
            check_input(x, model.spec().input_size, what);
            toks.push_back(enc.tokens(x));
            rows += toks.back().rows();
        }
        Matrix all(rows, enc.spec().patch_dim());
        Eigen::Index at = 0;
        for (const auto& t : toks) {
            all.middleRows(at, t.rows()) = t;
            at += t.rows();
        }
        return std::make_pair(enc.forward_tokens(all), toks.front().rows());
    };
    const auto [fx_all, nx] = stack(images, model.image_encoder, "image");
    require_finite(fx_all, "image");
    const auto [fs_all, ns] = stack(sares, model.sare_encoder, "SARE map");
    require_finite(fs_all, "semantic");
    std::vector<std::pair<FeatureSequence, FeatureSequence>> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        out.emplace_back(FeatureSequence{fx_all.middleRows(k * nx, nx), Origin::image},
                         FeatureSequence{fs_all.middleRows(k * ns, ns), Origin::sare});
    }
    return out;
}

double DetectorModel::logit(const ImageArray& image, const ImageArray& sare) const {
    const auto [fx, fs] = extract_features(image, sare, *this);
    return classify_logit(cross_attention_fuse(fx, fs, fusion), head);
}

double DetectorModel::predict(const ImageArray& image, const ImageArray& sare) const { return sigmoid(logit(image, sare)); }

namespace {

NamedArray named(const std::string& name, const Matrix& m) {
    NamedArray a;
    a.name = name;
    a.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
    a.values.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) a.values[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    }
    return a;
}

void fill(Matrix& m, const NamedArray& a) {
    if (a.values.size() != static_cast<std::size_t>(m.size())) throw IoError("array " + a.name + " has the wrong size");
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = a.values[static_cast<std::size_t>(r * m.cols() + c)];
    }
}

void fill(Vector& v, const NamedArray& a) {
    if (a.values.size() != static_cast<std::size_t>(v.size())) throw IoError("array " + a.name + " has the wrong size");
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = a.values[static_cast<std::size_t>(i)];
}

}  // namespace

void DetectorModel::save(const fs::path& dir, const nlohmann::json& training) const {
    nlohmann::json spec{{"kind", "fusion-detector-v1"}, {"architecture", spec_.to_json()}, {"training", training}};
    std::vector<NamedArray> arrays;
    auto enc = [&](const std::string& p, const PatchEncoder& e) {
        arrays.push_back(named(p + ".W1", e.W1));
        arrays.push_back(named(p + ".b1", e.b1));
        arrays.push_back(named(p + ".W2", e.W2));
        arrays.push_back(named(p + ".b2", e.b2));
    };
    enc("image_encoder", image_encoder);
    enc("sare_encoder", sare_encoder);
    arrays.push_back(named("fusion.W_Q", fusion.W_Q));
    arrays.push_back(named("fusion.W_K", fusion.W_K));
    arrays.push_back(named("fusion.W_V", fusion.W_V));
    arrays.push_back(named("fusion.W_O", fusion.W_O));
    arrays.push_back(named("head.w", head.w));
    arrays.push_back(named("head.b", Matrix::Constant(1, 1, head.b)));
    write_checkpoint(dir, spec, arrays);
}

DetectorModel DetectorModel::load(const fs::path& dir) {
    const LoadedCheckpoint ck = read_checkpoint(dir);
    if (ck.spec.value("kind", std::string()) != "fusion-detector-v1") throw IoError(dir.string() + " is not a detector checkpoint");
    DetectorModel m(DetectorSpec::from_json(ck.spec.at("architecture")), 0);
    auto enc = [&](const std::string& p, PatchEncoder& e) {
        fill(e.W1, ck.array(p + ".W1"));
        fill(e.b1, ck.array(p + ".b1"));
        fill(e.W2, ck.array(p + ".W2"));
        fill(e.b2, ck.array(p + ".b2"));
    };
    enc("image_encoder", m.image_encoder);
    enc("sare_encoder", m.sare_encoder);
    fill(m.fusion.W_Q, ck.array("fusion.W_Q"));
    fill(m.fusion.W_K, ck.array("fusion.W_K"));
    fill(m.fusion.W_V, ck.array("fusion.W_V"));
    fill(m.fusion.W_O, ck.array("fusion.W_O"));
    fill(m.head.w, ck.array("head.w"));
    m.head.b = ck.array("head.b").values.at(0);
    return m;
}

// ---------------------------------------------------------------------------

void AugmentationPolicy::validate() const {
    for (double p : {crop_p, flip_p, noise_p, blur_p, rotate_p}) {
        if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("augmentation", "probabilities must lie in [0, 1]");
    }
    if (crop_size < 1) throw ParameterError("crop_size", "must be >= 1");
    if (!(noise_sigma_min >= 0.0 && noise_sigma_max >= noise_sigma_min)) throw ParameterError("noise_sigma", "invalid range");
    if (!(blur_sigma_min > 0.0 && blur_sigma_max >= blur_sigma_min)) throw ParameterError("blur_sigma", "invalid range");
    if (!(rotate_degrees >= 0.0)) throw ParameterError("rotate_degrees", "must be >= 0");
}

AugmentationPolicy AugmentationPolicy::eval(int crop_size) {
    AugmentationPolicy p;
    p.crop_size = crop_size;
    p.training = false;
    return p;
}

namespace {

struct Draws {
    AugmentRecord record;
    std::uint64_t noise_seed = 0;
};

Draws draw(int height, int width, const AugmentationPolicy& policy, std::uint64_t seed) {
    policy.validate();
    const int c = policy.crop_size;
    if (height < c || width < c) {
        throw ParameterError("image", std::to_string(height) + "x" + std::to_string(width) + " is smaller than the " +
                                          std::to_string(c) + " crop");
    }
    Draws d;
    d.record.crop = CropWindow{(height - c) / 2, (width - c) / 2, c, c};
    if (!policy.training) return d;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // every draw happens unconditionally so one decision never shifts another's randomness
    const double crop_u = u(rng), top_u = u(rng), left_u = u(rng);
    const double flip_u = u(rng);
    const double noise_u = u(rng), noise_s = u(rng);
    const double blur_u = u(rng), blur_s = u(rng);
    const double rot_u = u(rng), rot_a = u(rng);
    d.noise_seed = rng();
    if (crop_u < policy.crop_p) {
        d.record.crop.top = std::min(height - c, static_cast<int>(top_u * (height - c + 1)));
        d.record.crop.left = std::min(width - c, static_cast<int>(left_u * (width - c + 1)));
    }
    d.record.flipped = flip_u < policy.flip_p;
    if (noise_u < policy.noise_p) {
        d.record.noise_sigma = policy.noise_sigma_min + noise_s * (policy.noise_sigma_max - policy.noise_sigma_min);
    }
    if (blur_u < policy.blur_p) d.record.blur_sigma = policy.blur_sigma_min + blur_s * (policy.blur_sigma_max - policy.blur_sigma_min);
    if (rot_u < policy.rotate_p) d.record.rotation = (2.0 * rot_a - 1.0) * policy.rotate_degrees;
    return d;
}

ImageArray apply_geometric_and_photometric(const ImageArray& image, const Draws& d, bool photometric) {
    ImageArray out = crop(image, d.record.crop);
    if (d.record.flipped) out = flip_horizontal(out);
    if (photometric && d.record.noise_sigma > 0.0) {
        std::mt19937_64 rng(d.noise_seed);
        std::normal_distribution<double> n(0.0, d.record.noise_sigma);
        for (auto& v : out.values()) v += n(rng);
    }
    if (photometric && d.record.blur_sigma > 0.0) out = gaussian_blur(out, d.record.blur_sigma);
    if (d.record.rotation != 0.0) out = rotate(out, d.record.rotation);
    return out;
}

}  // namespace

ImageArray augment(const ImageArray& image, const AugmentationPolicy& policy, std::uint64_t seed, AugmentRecord* record) {
    const Draws d = draw(image.height(), image.width(), policy, seed);
    if (record) *record = d.record;
    return apply_geometric_and_photometric(image, d, true);
}

AugmentedPair augment_pair(const ImageArray& image, const ImageArray& sare, const AugmentationPolicy& policy,
                           std::uint64_t seed) {
    if (image.height() != sare.height() || image.width() != sare.width()) {
        throw ShapeError("image " + image.shape().str() + " and SARE map " + sare.shape().str() + " are not aligned");
    }
    const Draws d = draw(image.height(), image.width(), policy, seed);
    return AugmentedPair{apply_geometric_and_photometric(image, d, true), apply_geometric_and_photometric(sare, d, false),
                         d.record};
}

std::pair<ImageArray, ImageArray> to_canvas(const ImageArray& image, const SareMap& sare, int canvas) {
    ImageArray img = resize_bicubic(image, canvas, canvas);
    clamp01(img);
    return {std::move(img), prepare_sare_input(sare, canvas)};
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size < 1) throw ParameterError("batch_size", "must be >= 1");
    if (!(learning_rate > 0.0)) throw ParameterError("learning_rate", "must be > 0");
    if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay", "must be >= 0");
    if (epochs < 1) throw ParameterError("epochs", "must be >= 1");
    augmentation.validate();
}

nlohmann::json TrainConfig::to_json() const {
    const auto& a = augmentation;
    return {{"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epochs", epochs},
            {"seed", seed},
            {"optimizer", "adamw"},
            {"augmentation",
             {{"crop_size", a.crop_size},
              {"crop_p", a.crop_p},
              {"flip_p", a.flip_p},
              {"noise_p", a.noise_p},
              {"noise_sigma", {a.noise_sigma_min, a.noise_sigma_max}},
              {"blur_p", a.blur_p},
              {"blur_sigma", {a.blur_sigma_min, a.blur_sigma_max}},
              {"rotate_p", a.rotate_p},
              {"rotate_degrees", a.rotate_degrees}}}};
}

namespace {

// Flat views over the trainable parameters of a model, in a fixed order.
struct ParamView {
    double* data;
    std::size_t size;
    bool decay;
};

std::vector<ParamView> views(DetectorModel& m, bool image_encoder, bool sare_encoder) {
    std::vector<ParamView> out;
    auto mat = [&](Matrix& x) { out.push_back({x.data(), static_cast<std::size_t>(x.size()), true}); };
    auto vec = [&](Vector& x) { out.push_back({x.data(), static_cast<std::size_t>(x.size()), false}); };
    auto enc = [&](PatchEncoder& e) {
        mat(e.W1);
        vec(e.b1);
        mat(e.W2);
        vec(e.b2);
    };
    if (image_encoder) enc(m.image_encoder);
    if (sare_encoder) enc(m.sare_encoder);
    mat(m.fusion.W_Q);
    mat(m.fusion.W_K);
    mat(m.fusion.W_V);
    mat(m.fusion.W_O);
    vec(m.head.w);
    out.push_back({&m.head.b, 1, false});
    return out;
}

void zero(DetectorModel& m) {
    for (auto& v : views(m, true, true)) std::fill(v.data, v.data + v.size, 0.0);
}

// Encoder weight gradients given d(features) and the cached forward values.
void encoder_backward(const PatchEncoder& enc, const Matrix& tokens, const Matrix& pre, const Matrix& d_feat, PatchEncoder& grad) {
    const Matrix act = pre.cwiseMax(0.0);
    grad.W2.noalias() += act.transpose() * d_feat;
    grad.b2 += d_feat.colwise().sum().transpose();
    const Matrix d_pre = (d_feat * enc.W2.transpose()).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    grad.W1.noalias() += tokens.transpose() * d_pre;
    grad.b1 += d_pre.colwise().sum().transpose();
}

}  // namespace

TrainResult train_detector(const std::vector<LabeledSample>& data, const TrainConfig& config, DetectorModel model) {
    config.validate();
    if (data.empty()) throw TrainingError("detector training needs a nonempty dataset");
    const auto fakes = std::count_if(data.begin(), data.end(), [](const LabeledSample& s) { return s.label == 1; });
    if (fakes == 0 || fakes == static_cast<long>(data.size())) {
        throw TrainingError("detector training needs both classes (got " + std::to_string(fakes) + " fake of " +
                            std::to_string(data.size()) + ")");
    }
    if (config.augmentation.crop_size != model.spec().input_size) {
        throw ParameterError("crop_size", "must equal the detector input size");
    }
    const bool train_img = !model.spec().image_encoder_frozen;
    const bool train_sare = !model.spec().sare_encoder_frozen;

    DetectorModel grad = model;
    std::vector<ParamView> p_views = views(model, train_img, train_sare);
    std::vector<ParamView> g_views = views(grad, train_img, train_sare);
    std::vector<std::vector<double>> m1, m2;
    for (const auto& v : p_views) {
        m1.emplace_back(v.size, 0.0);
        m2.emplace_back(v.size, 0.0);
    }

    TrainResult result;
    std::mt19937_64 order_rng(derive_seed(config.seed, 0x5ff1e));
    std::vector<std::size_t> order(data.size());
    int step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), order_rng);
        double epoch_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const std::size_t n = end - start;
            std::vector<AugmentedPair> batch(n);
            parallel_for(n, config.workers, [&](std::size_t k) {
                const std::size_t idx = order[start + k];
                batch[k] = augment_pair(data[idx].image, data[idx].sare, config.augmentation,
                                        derive_seed(config.seed, static_cast<std::uint64_t>(epoch), idx));
            });
            zero(grad);
            double batch_loss = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t idx = order[start + k];
                const int label = data[idx].label;
                const Matrix tx = model.image_encoder.tokens(batch[k].image);
                const Matrix ts = model.sare_encoder.tokens(batch[k].sare);
                Matrix pre_x, pre_s;
                FeatureSequence fx{model.image_encoder.forward_tokens(tx, &pre_x), Origin::image};
                FeatureSequence fs{model.sare_encoder.forward_tokens(ts, &pre_s), Origin::sare};
                const FusionHeadGradients g = fusion_head_gradients(fx, fs, model.fusion, model.head, label);
                if (!std::isfinite(g.loss)) {
                    throw TrainingError("non-finite detector loss at epoch " + std::to_string(epoch) + ", step " +
                                        std::to_string(step) + ", sample " + std::to_string(idx) + " (label " +
                                        std::to_string(label) + ")");
                }
                batch_loss += g.loss;
                grad.fusion.W_Q += g.fusion.W_Q;
                grad.fusion.W_K += g.fusion.W_K;
                grad.fusion.W_V += g.fusion.W_V;
                grad.fusion.W_O += g.fusion.W_O;
                grad.head.w += g.head_w;
                grad.head.b += g.head_b;
                if (train_img) encoder_backward(model.image_encoder, tx, pre_x, g.fusion.f_x, grad.image_encoder);
                if (train_sare) encoder_backward(model.sare_encoder, ts, pre_s, g.fusion.f_s, grad.sare_encoder);
            }
            ++step;
            const double bc1 = 1.0 - std::pow(config.beta1, step), bc2 = 1.0 - std::pow(config.beta2, step);
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t v = 0; v < p_views.size(); ++v) {
                double* p = p_views[v].data;
                const double* g = g_views[v].data;
                for (std::size_t j = 0; j < p_views[v].size; ++j) {
                    const double gj = g[j] * inv_n;
                    m1[v][j] = config.beta1 * m1[v][j] + (1.0 - config.beta1) * gj;
                    m2[v][j] = config.beta2 * m2[v][j] + (1.0 - config.beta2) * gj * gj;
                    if (p_views[v].decay) p[j] -= config.learning_rate * config.weight_decay * p[j];
                    p[j] -= config.learning_rate * (m1[v][j] / bc1) / (std::sqrt(m2[v][j] / bc2) + 1e-8);
                }
            }
            result.steps.push_back({epoch, step, batch_loss * inv_n});
            epoch_sum += batch_loss;
        }
        result.epoch_loss.push_back(epoch_sum / static_cast<double>(data.size()));
        spdlog::debug("detector epoch {} loss {:.5f}", epoch, result.epoch_loss.back());
    }
    result.model = std::move(model);
    return result;
}

double evaluate_loss(const DetectorModel& model, const std::vector<LabeledSample>& data, int crop_size) {
    if (data.empty()) throw ParameterError("data", "must be nonempty");
    const AugmentationPolicy eval = AugmentationPolicy::eval(crop_size);
    double sum = 0.0;
    for (const auto& s : data) {
        const AugmentedPair p = augment_pair(s.image, s.sare, eval, 0);
        sum += bce_with_logit(model.logit(p.image, p.sare), s.label);
    }
    return sum / static_cast<double>(data.size());
}

void write_loss_csv(const fs::path& path, const std::vector<LossRecord>& steps) {
    std::string out = "epoch,step,loss\n";
    char buf[96];
    for (const auto& r : steps) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.10g\n", r.epoch, r.step, r.loss);
        out += buf;
    }
    atomic_write(path, out);
}

}  // namespace sare::detect
