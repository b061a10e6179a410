#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <tuple>

#include "helpers.hpp"
#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/schedule.hpp"
#include "sare/toyworld.hpp"

using namespace sare;
using namespace sare::toy;

namespace {

SceneFactors base_scene() {
    SceneFactors f;
    f.shape = ShapeKind::circle;
    f.color = ColorName::red;
    f.x = 0.45;
    f.y = 0.55;
    f.size = 0.2;
    return f;
}

}  // namespace

TEST_CASE("gen_scene determinism and color mass") {
    auto f = base_scene();
    CHECK(gen_scene(f, 3) == gen_scene(f, 3));
    CHECK(gen_scene(f, 3) == gen_scene(f, 4));  // fakes ignore the seed
    const auto img = gen_scene(f, 1);
    CHECK(img.shape() == Shape3{3, 64, 64});
    double red = 0.0, blue = 0.0;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            red += img(0, y, x);
            blue += img(2, y, x);
            CHECK(std::abs(img(0, y, x) * 255 - std::round(img(0, y, x) * 255)) < 1e-9);
        }
    }
    CHECK(red > blue);

    f.detail = InvisibleDetail{77, 2, 0.0};
    CHECK(gen_scene(f, 3) == gen_scene(f, 3));
    CHECK_FALSE(gen_scene(f, 3) == gen_scene(f, 4));  // occluders move with the seed
    f.x = 1.5;
    CHECK_THROWS_AS(gen_scene(f, 1), ParameterError);
}

TEST_CASE("real scene differs from its fake counterpart only in detail regions") {
    auto fake = base_scene();
    auto real = fake;
    real.detail = InvisibleDetail{9, 0, 0.0};  // texture only, no occluders, no hue shift
    const auto a = gen_scene(fake, 1), b = gen_scene(real, 1);
    const auto mask = shape_mask(fake);
    std::size_t interior = 0, background_diff = 0, background = 0;
    for (int y = 1; y < 63; ++y) {
        for (int x = 1; x < 63; ++x) {
            auto m = [&](int yy, int xx) { return static_cast<bool>(mask[static_cast<std::size_t>(yy) * 64 + xx]); };
            const bool core = m(y, x) && m(y - 1, x) && m(y + 1, x) && m(y, x - 1) && m(y, x + 1);
            const bool far = !m(y, x) && !m(y - 1, x) && !m(y + 1, x) && !m(y, x - 1) && !m(y, x + 1);
            for (int c = 0; c < 3; ++c) {
                if (core) {
                    CHECK(a(c, y, x) == b(c, y, x));
                    ++interior;
                } else if (far) {
                    CHECK(a(c, y, x) == std::round(kBackgroundGray * 255) / 255);
                    ++background;
                    background_diff += a(c, y, x) != b(c, y, x) ? 1 : 0;
                }
            }
        }
    }
    CHECK(interior > 100);
    CHECK(background_diff > background / 2);
}

TEST_CASE("make_dataset counts, labels, stratification, captions") {
    const auto ds = make_dataset(100, 100, 1.0, 5);
    CHECK(ds.items.size() == 200);
    int label_sum = 0;
    for (const auto& it : ds.items) label_sum += it.label;
    CHECK(label_sum == 100);
    CHECK(ds.count(1) == 100);
    for (const auto& it : ds.items) {
        CHECK(it.factors.is_real() == (it.label == 0));
        CHECK(it.digest == image_digest(it.image));
        CHECK(it.caption.image_digest == it.digest);
        CHECK(it.caption.text.find(to_string(it.factors.shape)) != std::string::npos);
        CHECK(it.caption.text.find(to_string(it.factors.color)) != std::string::npos);
    }
    // Each class covers every (shape, color) pair in its first 24 items.
    for (int label : {0, 1}) {
        std::set<std::pair<int, int>> combos;
        int seen = 0;
        for (const auto& it : ds.items) {
            if (it.label != label || seen >= 24) continue;
            ++seen;
            combos.insert({static_cast<int>(it.factors.shape), static_cast<int>(it.factors.color)});
        }
        CHECK(combos.size() == 24);
    }

    const auto again = make_dataset(100, 100, 1.0, 5);
    for (std::size_t i = 0; i < 200; ++i) CHECK(again.items[i].image == ds.items[i].image);

    const auto empty = make_dataset(10, 10, 0.0, 6);
    for (const auto& it : empty.items) CHECK(it.caption.text.empty());
    CHECK(make_dataset(0, 0, 1.0, 1).items.empty());
    CHECK_THROWS_AS(make_dataset(-1, 3, 1.0, 1), ParameterError);
    CHECK_THROWS_AS(make_dataset(1, 3, 1.5, 1), ParameterError);
}

TEST_CASE("disjoint seeds give disjoint factor draws") {
    std::set<std::tuple<double, double, double>> a;
    for (const auto& it : make_dataset(150, 150, 1.0, 100).items) a.insert({it.factors.x, it.factors.y, it.factors.size});
    CHECK(a.size() == 300);
    std::size_t collisions = 0;
    for (const auto& it : make_dataset(150, 150, 1.0, 101).items) collisions += a.count({it.factors.x, it.factors.y, it.factors.size});
    CHECK(collisions == 0);
}

TEST_CASE("write_dataset and read_dataset round trip") {
    sare::testing::TempDir dir("toy");
    const auto ds = make_dataset(4, 5, 0.5, 8);
    const auto m = write_dataset(dir / "d", ds);
    CHECK(m.entries.size() == 9);
    CHECK(std::filesystem::exists(dir / "d" / "manifest.jsonl"));
    for (const auto& e : m.entries) {
        CHECK(std::filesystem::exists(e.path));
        CHECK(e.subset == "toyworld");
        CHECK(e.split == data::Split::test);
    }
    const auto back = read_dataset(dir / "d");
    REQUIRE(back.items.size() == 9);
    CHECK(back.fidelity == 0.5);
    CHECK(back.captioner_id == ds.captioner_id);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(back.items[i].image == ds.items[i].image);
        CHECK(back.items[i].digest == ds.items[i].digest);
        CHECK(back.items[i].factors == ds.items[i].factors);
        CHECK(back.items[i].caption == ds.items[i].caption);
        CHECK(back.items[i].label == ds.items[i].label);
    }
}

TEST_CASE("analytic Gaussian denoiser limits") {
    const LatentArray mu0(1, 2, 2, 0.3);
    const AnalyticGaussianDenoiser point(mu0, 1e-9);
    const auto z = sare::testing::random_array<LatentTag>({1, 2, 2}, 1, -3.0, 3.0);
    for (int t : {10, 500, 999}) {
        const auto m = point.posterior_mean(z, t);
        for (std::size_t i = 0; i < m.size(); ++i) CHECK(std::abs(m[i] - 0.3) < 1e-9);
    }
    AnalyticGaussianDenoiser flat(mu0, 0.5, NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.1}));
    HashTextEncoder enc;
    const auto eps = flat.predict_noise(z, 0, null_embedding(enc));
    for (double v : eps.values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(AnalyticGaussianDenoiser(mu0, 0.0), ParameterError);
}

TEST_CASE("posterior mean agrees with Monte Carlo conditional expectation") {
    // The residual z0 - E[z0 | z_t] has zero mean and is uncorrelated with z_t.
    const double mu = 0.4, s0 = 0.7;
    const AnalyticGaussianDenoiser d(LatentArray(1, 1, 1, mu), s0);
    const auto sched = default_schedule();
    std::mt19937_64 rng(123);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int t : {100, 600}) {
        const double ab = sched.alpha_bar(t);
        const int N = 1'000'000;
        double r_sum = 0, r_sq = 0, rz_sum = 0, rz_sq = 0;
        LatentArray zt(1, 1, 1);
        for (int i = 0; i < N; ++i) {
            const double z0 = mu + s0 * n(rng);
            zt[0] = std::sqrt(ab) * z0 + std::sqrt(1 - ab) * n(rng);
            const double r = z0 - d.posterior_mean(zt, t)[0];
            r_sum += r;
            r_sq += r * r;
            rz_sum += r * zt[0];
            rz_sq += r * zt[0] * r * zt[0];
        }
        const double r_mean = r_sum / N, rz_mean = rz_sum / N;
        const double r_se = std::sqrt((r_sq / N - r_mean * r_mean) / N);
        const double rz_se = std::sqrt((rz_sq / N - rz_mean * rz_mean) / N);
        CHECK(std::abs(r_mean) <= 3 * r_se);
        CHECK(std::abs(rz_mean) <= 3 * rz_se);
        // Posterior variance check: Var(residual) = s0^2 (1 - ab) / (ab s0^2 + 1 - ab).
        const double post_var = s0 * s0 * (1 - ab) / (ab * s0 * s0 + 1 - ab);
        CHECK(std::abs(r_sq / N - post_var) <= 3 * post_var * std::sqrt(2.0 / N));
    }
}

TEST_CASE("small toy denoiser: loss falls, seed reproducible, save/load") {
    const auto ds = make_dataset(0, 48, 1.0, 31);
    const HashTextEncoder enc;
    ToyTrainOptions opt;
    opt.epochs = 4;
    opt.seed = 2;
    const auto r1 = train_toy_denoiser(ds.items, enc, default_schedule(), opt);
    const auto r2 = train_toy_denoiser(ds.items, enc, default_schedule(), opt);
    REQUIRE(r1.loss_trace.size() == 4);
    CHECK(r1.loss_trace == r2.loss_trace);
    CHECK(r1.loss_trace.back() < r1.loss_trace.front());
    CHECK(r1.model.weights_digest() == r2.model.weights_digest());
    CHECK(r1.model.identifier().find(r1.model.weights_digest().substr(0, 8)) != std::string::npos);

    opt.seed = 3;
    CHECK(train_toy_denoiser(ds.items, enc, default_schedule(), opt).loss_trace != r1.loss_trace);

    sare::testing::TempDir dir("den");
    r1.model.save(dir / "m");
    auto loaded = ToyDenoiser::load(dir / "m");
    CHECK(loaded.weights_digest() == r1.model.weights_digest());
    CHECK(loaded.spec() == r1.model.spec());
    auto model = ToyDenoiser::load(dir / "m");
    const auto z = sare::testing::random_array<LatentTag>({3, 64, 64}, 4, -1.0, 1.0);
    const auto cond = enc.embed("a red circle");
    const auto e1 = model.predict_noise(z, 300, cond), e2 = loaded.predict_noise(z, 300, cond);
    CHECK(e1.shape() == z.shape());
    CHECK(e1 == e2);

    CHECK_THROWS_AS(train_toy_denoiser({}, enc, default_schedule(), opt), TrainingError);
}
