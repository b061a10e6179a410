#include "sare/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/image_io.hpp"
#include "sare/image_ops.hpp"
#include "sare/parallel.hpp"
#include "sare/recon.hpp"

namespace sare::toy {

namespace fs = std::filesystem;

namespace {

constexpr const char* kShapeNames[] = {"circle", "square", "triangle"};
constexpr const char* kColorNames[] = {"red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"};
constexpr int kSuper = 4;

bool inside(ShapeKind shape, double x, double y, double half, double u, double v) {
    switch (shape) {
        case ShapeKind::circle: return (u - x) * (u - x) + (v - y) * (v - y) <= half * half;
        case ShapeKind::square: return std::abs(u - x) <= half && std::abs(v - y) <= half;
        case ShapeKind::triangle:
            // apex up, base at y + half
            return v <= y + half && v >= y - half && std::abs(u - x) <= (v - (y - half)) * 0.5;
    }
    return false;
}

// Fraction of subsamples of pixel (row, col) inside the predicate.
template <class Pred>
double coverage(int row, int col, int res, Pred&& pred) {
    int hits = 0;
    for (int i = 0; i < kSuper; ++i) {
        for (int j = 0; j < kSuper; ++j) {
            const double u = (col + (j + 0.5) / kSuper) / res;
            const double v = (row + (i + 0.5) / kSuper) / res;
            hits += pred(u, v) ? 1 : 0;
        }
    }
    return static_cast<double>(hits) / (kSuper * kSuper);
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Per-channel value noise in [-1, 1] on an 8x8 lattice.
ImageArray value_noise(std::uint64_t seed, int res) {
    constexpr int kCells = 8;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> lattice(3 * (kCells + 1) * (kCells + 1));
    for (auto& v : lattice) v = u(rng);
    ImageArray out(3, res, res);
    for (int c = 0; c < 3; ++c) {
        const double* L = lattice.data() + c * (kCells + 1) * (kCells + 1);
        for (int r = 0; r < res; ++r) {
            const double gy = (r + 0.5) / res * kCells;
            const int y0 = std::min(static_cast<int>(gy), kCells - 1);
            const double ty = smoothstep(gy - y0);
            for (int q = 0; q < res; ++q) {
                const double gx = (q + 0.5) / res * kCells;
                const int x0 = std::min(static_cast<int>(gx), kCells - 1);
                const double tx = smoothstep(gx - x0);
                const double a = L[y0 * (kCells + 1) + x0], b = L[y0 * (kCells + 1) + x0 + 1];
                const double cc = L[(y0 + 1) * (kCells + 1) + x0], d = L[(y0 + 1) * (kCells + 1) + x0 + 1];
                out(c, r, q) = (a * (1 - tx) + b * tx) * (1 - ty) + (cc * (1 - tx) + d * tx) * ty;
            }
        }
    }
    return out;
}

// Rodrigues rotation of (rgb - 0.5) about the gray axis.
std::array<double, 3> rotate_hue(std::array<double, 3> rgb, double degrees) {
    const double th = degrees * std::numbers::pi / 180.0;
    const double k = 1.0 / std::sqrt(3.0);
    const double cs = std::cos(th), sn = std::sin(th);
    const std::array<double, 3> v{rgb[0] - 0.5, rgb[1] - 0.5, rgb[2] - 0.5};
    // k x v with k = (1,1,1)/sqrt3
    const std::array<double, 3> cross{k * (v[2] - v[1]), k * (v[0] - v[2]), k * (v[1] - v[0])};
    const double kdotv = k * (v[0] + v[1] + v[2]);
    std::array<double, 3> out{};
    for (int i = 0; i < 3; ++i) {
        out[i] = 0.5 + v[i] * cs + cross[i] * sn + k * kdotv * (1.0 - cs);
        out[i] = std::clamp(out[i], 0.0, 1.0);
    }
    return out;
}

struct Occluder {
    double x, y, r, gray;
};

std::vector<Occluder> occluders_for(int count, std::uint64_t rng_seed) {
    std::mt19937_64 rng(derive_seed(rng_seed, 0x0cc1));
    std::uniform_real_distribution<double> pos(0.1, 0.9), rad(0.03, 0.06), gray(0.2, 0.8);
    std::vector<Occluder> out;
    for (int i = 0; i < count; ++i) {
        Occluder o{};
        o.x = pos(rng);
        o.y = pos(rng);
        o.r = rad(rng);
        o.gray = gray(rng);
        out.push_back(o);
    }
    return out;
}

void validate(const SceneFactors& f, int resolution) {
    if (resolution < 4) throw ParameterError("resolution", "must be >= 4");
    if (!(f.size > 0.0 && f.size <= 1.0)) throw ParameterError("size", "must lie in (0, 1]");
    if (!(f.x >= 0.0 && f.x <= 1.0 && f.y >= 0.0 && f.y <= 1.0)) throw ParameterError("position", "outside unit square");
    if (f.detail && f.detail->occluder_count < 0) throw ParameterError("occluder_count", "must be >= 0");
}

}  // namespace

std::string to_string(ShapeKind s) { return kShapeNames[static_cast<int>(s)]; }
std::string to_string(ColorName c) { return kColorNames[static_cast<int>(c)]; }

ShapeKind parse_shape(const std::string& s) {
    for (int i = 0; i < kShapeCount; ++i) {
        if (s == kShapeNames[i]) return static_cast<ShapeKind>(i);
    }
    throw ParameterError("shape", "unknown shape '" + s + "'");
}

ColorName parse_color(const std::string& c) {
    for (int i = 0; i < kColorCount; ++i) {
        if (c == kColorNames[i]) return static_cast<ColorName>(i);
    }
    throw ParameterError("color", "unknown color '" + c + "'");
}

std::array<double, 3> rgb_of(ColorName c) {
    switch (c) {
        case ColorName::red: return {0.9, 0.1, 0.1};
        case ColorName::green: return {0.1, 0.8, 0.1};
        case ColorName::blue: return {0.1, 0.2, 0.9};
        case ColorName::yellow: return {0.95, 0.9, 0.1};
        case ColorName::cyan: return {0.1, 0.85, 0.9};
        case ColorName::magenta: return {0.9, 0.1, 0.85};
        case ColorName::orange: return {0.95, 0.55, 0.05};
        case ColorName::purple: return {0.5, 0.1, 0.7};
    }
    return {0.5, 0.5, 0.5};
}

std::string SceneFactors::coarse_position() const {
    auto third = [](double v) { return v < 1.0 / 3.0 ? 0 : (v > 2.0 / 3.0 ? 2 : 1); };
    static constexpr const char* rows[] = {"top", "middle", "bottom"};
    static constexpr const char* cols[] = {"left", "center", "right"};
    const int r = third(y), c = third(x);
    if (r == 1 && c == 1) return "center";
    return std::string(rows[r]) + " " + cols[c];
}

CaptionFactors SceneFactors::caption_factors() const {
    return CaptionFactors{to_string(shape), to_string(color), coarse_position()};
}

ImageArray gen_scene(const SceneFactors& f, std::uint64_t rng_seed, int res) {
    validate(f, res);
    ImageArray img(3, res, res, kBackgroundGray);
    if (f.detail) {
        const ImageArray tex = value_noise(f.detail->background_texture_seed, res);
        for (std::size_t i = 0; i < img.size(); ++i) img[i] += kTextureAmplitude * tex[i];
    }
    auto rgb = rgb_of(f.color);
    if (f.detail && f.detail->hue_jitter != 0.0) rgb = rotate_hue(rgb, f.detail->hue_jitter);
    const double half = f.size * 0.5;
    for (int r = 0; r < res; ++r) {
        for (int q = 0; q < res; ++q) {
            const double a = coverage(r, q, res, [&](double u, double v) { return inside(f.shape, f.x, f.y, half, u, v); });
            if (a == 0.0) continue;
            for (int c = 0; c < 3; ++c) img(c, r, q) = (1 - a) * img(c, r, q) + a * rgb[c];
        }
    }
    if (f.detail) {
        for (const auto& o : occluders_for(f.detail->occluder_count, rng_seed)) {
            for (int r = 0; r < res; ++r) {
                for (int q = 0; q < res; ++q) {
                    const double a = coverage(r, q, res, [&](double u, double v) {
                        return (u - o.x) * (u - o.x) + (v - o.y) * (v - o.y) <= o.r * o.r;
                    });
                    if (a == 0.0) continue;
                    for (int c = 0; c < 3; ++c) img(c, r, q) = (1 - a) * img(c, r, q) + a * o.gray;
                }
            }
        }
    }
    quantize8(img);
    return img;
}

std::vector<bool> shape_mask(const SceneFactors& f, int res) {
    validate(f, res);
    std::vector<bool> mask(static_cast<std::size_t>(res) * res);
    const double half = f.size * 0.5;
    for (int r = 0; r < res; ++r) {
        for (int q = 0; q < res; ++q) {
            mask[static_cast<std::size_t>(r) * res + q] =
                coverage(r, q, res, [&](double u, double v) { return inside(f.shape, f.x, f.y, half, u, v); }) > 0.5;
        }
    }
    return mask;
}

std::size_t ToyDataset::count(int label) const {
    return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [&](const ToyItem& i) { return i.label == label; }));
}

ToyDataset make_dataset(int n_real, int n_fake, double fidelity, std::uint64_t rng_seed, const DatasetOptions& options) {
    if (n_real < 0 || n_fake < 0) throw ParameterError("n_real/n_fake", "must be >= 0");
    if (!(fidelity >= 0.0 && fidelity <= 1.0)) throw ParameterError("fidelity", "must lie in [0, 1]");

    ToyDataset ds;
    ds.fidelity = fidelity;
    ds.seed = rng_seed;

    // Stratified (shape, color) assignment: each block of 24 items covers every combination once.
    auto combos_for = [&](int n, int label) {
        std::mt19937_64 rng(derive_seed(rng_seed, 0xc0b0, static_cast<std::uint64_t>(label)));
        std::vector<int> out;
        std::vector<int> block(kShapeCount * kColorCount);
        while (static_cast<int>(out.size()) < n) {
            for (int i = 0; i < static_cast<int>(block.size()); ++i) block[i] = i;
            std::shuffle(block.begin(), block.end(), rng);
            out.insert(out.end(), block.begin(), block.end());
        }
        out.resize(static_cast<std::size_t>(n));
        return out;
    };

    struct Plan {
        int label;
        int index;
        int combo;
    };
    std::vector<Plan> plan;
    const auto real_combos = combos_for(n_real, 0);
    const auto fake_combos = combos_for(n_fake, 1);
    for (int i = 0; i < n_real; ++i) plan.push_back({0, i, real_combos[i]});
    for (int i = 0; i < n_fake; ++i) plan.push_back({1, i, fake_combos[i]});

    ds.items.resize(plan.size());
    parallel_for(plan.size(), 0, [&](std::size_t k) {
        const Plan& p = plan[k];
        std::mt19937_64 rng(derive_seed(rng_seed, static_cast<std::uint64_t>(p.label), static_cast<std::uint64_t>(p.index)));
        std::uniform_real_distribution<double> pos(0.25, 0.75), size(0.12, 0.22), jitter(-20.0, 20.0);
        std::uniform_int_distribution<int> occ(0, 2);
        SceneFactors f;
        f.shape = static_cast<ShapeKind>(p.combo % kShapeCount);
        f.color = static_cast<ColorName>(p.combo / kShapeCount);
        f.x = pos(rng);
        f.y = pos(rng);
        f.size = size(rng);
        const std::uint64_t scene_seed = rng();
        if (p.label == 0) {
            InvisibleDetail d;
            d.background_texture_seed = rng();
            d.occluder_count = occ(rng);
            d.hue_jitter = jitter(rng);
            f.detail = d;
        }
        ToyItem& item = ds.items[k];
        item.factors = f;
        item.scene_seed = scene_seed;
        item.label = p.label;
        item.image = gen_scene(f, scene_seed, options.resolution);
        item.digest = image_digest(item.image);
    });

    SyntheticCaptioner captioner(fidelity, options.caption_seed.value_or(rng_seed), options.mention_position);
    register_dataset(captioner, ds);
    ds.captioner_id = captioner.identifier();
    for (auto& item : ds.items) item.caption = generate_caption(item.image, captioner);
    return ds;
}

void register_dataset(SyntheticCaptioner& captioner, const ToyDataset& dataset) {
    for (const auto& item : dataset.items) captioner.register_image(item.digest, item.factors.caption_factors());
}

namespace {

nlohmann::json factors_json(const SceneFactors& f) {
    nlohmann::json j{{"shape", to_string(f.shape)}, {"color", to_string(f.color)}, {"x", f.x}, {"y", f.y}, {"size", f.size}};
    if (f.detail) {
        j["detail"] = {{"background_texture_seed", f.detail->background_texture_seed},
                       {"occluder_count", f.detail->occluder_count},
                       {"hue_jitter", f.detail->hue_jitter}};
    } else {
        j["detail"] = nullptr;
    }
    return j;
}

SceneFactors factors_from_json(const nlohmann::json& j) {
    SceneFactors f;
    f.shape = parse_shape(j.at("shape").get<std::string>());
    f.color = parse_color(j.at("color").get<std::string>());
    f.x = j.at("x").get<double>();
    f.y = j.at("y").get<double>();
    f.size = j.at("size").get<double>();
    if (!j.at("detail").is_null()) {
        const auto& d = j.at("detail");
        f.detail = InvisibleDetail{d.at("background_texture_seed").get<std::uint64_t>(), d.at("occluder_count").get<int>(),
                                   d.at("hue_jitter").get<double>()};
    }
    return f;
}

}  // namespace

data::Manifest write_dataset(const fs::path& dir, const ToyDataset& dataset, data::Split split, const std::string& subset) {
    fs::create_directories(dir / "real");
    fs::create_directories(dir / "fake");
    data::Manifest manifest;
    manifest.source_root = fs::absolute(dir).lexically_normal().string();
    manifest.layout = "toyworld";
    std::string scenes;
    for (std::size_t i = 0; i < dataset.items.size(); ++i) {
        const ToyItem& item = dataset.items[i];
        char name[32];
        std::snprintf(name, sizeof(name), "%05zu.png", i);
        const fs::path rel = fs::path(item.label == 1 ? "fake" : "real") / name;
        write_png(dir / rel, item.image, 8);
        const fs::path abs = fs::canonical(dir / rel);
        manifest.entries.push_back(data::ManifestEntry{abs.string(), item.label == 1 ? data::Label::fake : data::Label::real,
                                                       subset, split, sha256_file(abs)});
        const nlohmann::json j{{"file", rel.generic_string()},
                               {"label", item.label},
                               {"factors", factors_json(item.factors)},
                               {"scene_seed", item.scene_seed},
                               {"image_digest", item.digest},
                               {"caption", item.caption.text},
                               {"captioner_id", item.caption.captioner_id}};
        scenes += j.dump() + "\n";
    }
    atomic_write(dir / "scenes.jsonl", scenes);
    const nlohmann::json meta{{"fidelity", dataset.fidelity}, {"seed", dataset.seed}, {"captioner_id", dataset.captioner_id}};
    atomic_write(dir / "dataset.json", meta.dump(2) + "\n");
    data::write_manifest(dir / "manifest.jsonl", manifest);
    return manifest;
}

ToyDataset read_dataset(const fs::path& dir) {
    ToyDataset ds;
    {
        std::ifstream in(dir / "dataset.json");
        if (!in) throw IoError("missing " + (dir / "dataset.json").string());
        const auto meta = nlohmann::json::parse(in);
        ds.fidelity = meta.at("fidelity").get<double>();
        ds.seed = meta.at("seed").get<std::uint64_t>();
        ds.captioner_id = meta.at("captioner_id").get<std::string>();
    }
    std::ifstream in(dir / "scenes.jsonl");
    if (!in) throw IoError("missing " + (dir / "scenes.jsonl").string());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        ToyItem item;
        item.factors = factors_from_json(j.at("factors"));
        item.scene_seed = j.at("scene_seed").get<std::uint64_t>();
        item.label = j.at("label").get<int>();
        item.image = read_image(dir / j.at("file").get<std::string>());
        item.digest = image_digest(item.image);
        if (item.digest != j.at("image_digest").get<std::string>()) {
            throw IoError("image digest mismatch for " + j.at("file").get<std::string>());
        }
        item.caption = Caption{j.at("caption").get<std::string>(), j.at("captioner_id").get<std::string>(), item.digest};
        ds.items.push_back(std::move(item));
    }
    return ds;
}

// ---------------------------------------------------------------------------

AnalyticGaussianDenoiser::AnalyticGaussianDenoiser(LatentArray mu0, double sigma0, NoiseSchedule schedule)
    : mu0_(std::move(mu0)), sigma0_(sigma0), schedule_(std::move(schedule)) {
    if (!(sigma0 > 0.0) || !std::isfinite(sigma0)) throw ParameterError("sigma0", "must be > 0");
}

std::string AnalyticGaussianDenoiser::identifier() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "analytic-gaussian-v1-s%.6g-", sigma0_);
    return buf + image_digest(retag<ImageTag>(mu0_)).substr(0, 16);
}

LatentArray AnalyticGaussianDenoiser::posterior_mean(const LatentArray& z_t, int t) const {
    require_same_shape(z_t, mu0_, "posterior_mean");
    const double ab = schedule_.alpha_bar(t);
    const double s2 = sigma0_ * sigma0_;
    const double denom = ab * s2 + 1.0 - ab;
    LatentArray out(z_t.shape());
    for (std::size_t i = 0; i < z_t.size(); ++i) out[i] = (std::sqrt(ab) * s2 * z_t[i] + (1.0 - ab) * mu0_[i]) / denom;
    return out;
}

LatentArray AnalyticGaussianDenoiser::predict_noise(const LatentArray& z_t, int t, const ConditionEmbedding&) {
    require_same_shape(z_t, mu0_, "predict_noise");
    const double ab = schedule_.alpha_bar(t);
    if (ab >= 1.0) return LatentArray(z_t.shape());
    const LatentArray m = posterior_mean(z_t, t);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    LatentArray eps(z_t.shape());
    for (std::size_t i = 0; i < z_t.size(); ++i) eps[i] = (z_t[i] - sa * m[i]) / sn;
    return eps;
}

std::unique_ptr<DenoiserBackend> analytic_gaussian_denoiser(const LatentArray& mu0, double sigma0, const NoiseSchedule& schedule) {
    return std::make_unique<AnalyticGaussianDenoiser>(mu0, sigma0, schedule);
}

}  // namespace sare::toy
