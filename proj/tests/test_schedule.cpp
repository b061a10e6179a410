#include <doctest.h>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "sare/errors.hpp"
#include "sare/schedule.hpp"

using namespace sare;
using sare::testing::random_array;

namespace {

// Independent accumulation in long double from the interpolated betas.
long double oracle_alpha_bar(int t_max, double b0, double b1, bool scaled, int t) {
    long double prod = 1.0L;
    for (int i = 0; i < t; ++i) {
        const long double frac = t_max == 1 ? 0.0L : static_cast<long double>(i) / (t_max - 1);
        long double beta;
        if (scaled) {
            const long double r = std::sqrt(static_cast<long double>(b0)) +
                                  frac * (std::sqrt(static_cast<long double>(b1)) - std::sqrt(static_cast<long double>(b0)));
            beta = r * r;
        } else {
            beta = b0 + frac * (static_cast<long double>(b1) - b0);
        }
        prod *= 1.0L - beta;
    }
    return prod;
}

LatentArray filled(Shape3 s, double v) { return LatentArray(s, v); }

// Returns the same noise for every query: the eps* used to noise z0*.
class ConstantOracle final : public DenoiserBackend {
public:
    ConstantOracle(LatentArray eps, NoiseSchedule s) : eps_(std::move(eps)), s_(std::move(s)) {}
    std::string identifier() const override { return "constant-oracle"; }
    const NoiseSchedule& schedule() const override { return s_; }
    LatentArray predict_noise(const LatentArray&, int, const ConditionEmbedding&) override {
        ++calls;
        return eps_;
    }
    int calls = 0;

private:
    LatentArray eps_;
    NoiseSchedule s_;
};

// Conditional and unconditional predictions differ so that guidance matters.
class SplitDenoiser final : public DenoiserBackend {
public:
    explicit SplitDenoiser(NoiseSchedule s) : s_(std::move(s)) {}
    std::string identifier() const override { return "split"; }
    const NoiseSchedule& schedule() const override { return s_; }
    LatentArray predict_noise(const LatentArray& z, int t, const ConditionEmbedding& cond) override {
        LatentArray out(z.shape());
        const double k = cond.source == EmbeddingSource::null ? 0.3 : 0.7;
        for (std::size_t i = 0; i < z.size(); ++i) out[i] = k * z[i] + 1e-4 * t;
        if (cond.source == EmbeddingSource::null) ++null_calls;
        return out;
    }
    int null_calls = 0;

private:
    NoiseSchedule s_;
};

ConditionEmbedding emb(EmbeddingSource src) {
    ConditionEmbedding e;
    e.data = {1.0, 2.0};
    e.tokens = 1;
    e.dim = 2;
    e.source = src;
    return e;
}

}  // namespace

TEST_CASE("build_schedule small examples") {
    const auto s1 = build_schedule(1, 0.5, 0.5, BetaKind::linear);
    CHECK(s1.t_max() == 1);
    CHECK(s1.alpha_bar(0) == 1.0);
    CHECK(s1.alpha_bar(1) == doctest::Approx(0.5).epsilon(1e-15));

    const auto s2 = build_schedule(2, 0.1, 0.1, BetaKind::linear);
    CHECK(s2.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(s2.alpha_bar(2) == doctest::Approx(0.81).epsilon(1e-15));
}

TEST_CASE("scaled_linear alpha_bar matches an independent product loop") {
    const auto s = build_schedule(1000, 0.00085, 0.012, BetaKind::scaled_linear);
    REQUIRE(s.t_max() == 1000);
    for (int t : {1, 10, 250, 500, 999, 1000}) {
        const long double want = oracle_alpha_bar(1000, 0.00085, 0.012, true, t);
        CHECK(std::abs(s.alpha_bar(t) - static_cast<double>(want)) / static_cast<double>(want) < 1e-12);
    }
    const auto lin = build_schedule(300, 0.001, 0.02, BetaKind::linear);
    const long double want = oracle_alpha_bar(300, 0.001, 0.02, false, 300);
    CHECK(std::abs(lin.alpha_bar(300) - static_cast<double>(want)) / static_cast<double>(want) < 1e-12);
}

TEST_CASE("schedule invariants") {
    const auto s = default_schedule();
    CHECK(s.alpha_bar(0) == 1.0);
    double prod = 1.0;
    for (int t = 1; t <= s.t_max(); ++t) {
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.beta(t) > 0.0);
        CHECK(s.beta(t) < 1.0);
        prod *= 1.0 - s.beta(t);
        CHECK(std::abs(s.alpha_bar(t) - prod) / prod < 1e-12);
    }
    CHECK(s.beta(1) == doctest::Approx(0.00085).epsilon(1e-12));
    CHECK(s.beta(1000) == doctest::Approx(0.012).epsilon(1e-12));
}

TEST_CASE("build_schedule rejects invalid ranges naming the field") {
    auto field_of = [](auto fn) {
        try {
            fn();
        } catch (const ParameterError& e) {
            return e.field();
        }
        return std::string("<none>");
    };
    CHECK(field_of([] { build_schedule(0, 0.1, 0.2, BetaKind::linear); }) == "t_max");
    CHECK(field_of([] { build_schedule(10, 0.0, 0.2, BetaKind::linear); }) == "beta_start");
    CHECK(field_of([] { build_schedule(10, 0.1, 1.0, BetaKind::linear); }) == "beta_end");
    CHECK(field_of([] { build_schedule(10, 0.3, 0.2, BetaKind::linear); }) == "beta_start");
}

TEST_CASE("from_alpha_bar validation") {
    CHECK_THROWS_AS(NoiseSchedule::from_alpha_bar({0.9, 0.5}), ParameterError);
    CHECK_THROWS_AS(NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.6}), ParameterError);
    const auto flat = NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.5, 0.0});
    CHECK(flat.alpha_bar(3) == 0.0);
}

TEST_CASE("forward_noise examples") {
    const Shape3 sh{2, 3, 4};
    const auto z0 = random_array<LatentTag>(sh, 1);
    const auto eps = random_array<LatentTag>(sh, 2);
    const auto s = default_schedule();
    CHECK(forward_noise(z0, 0, eps, s) == z0);

    const auto flat = NoiseSchedule::from_alpha_bar({1.0, 0.36});
    const auto z = forward_noise(filled(sh, 0.0), 1, filled(sh, 1.0), flat);
    for (double v : z.values()) CHECK(v == doctest::Approx(0.8).epsilon(1e-15));

    const auto zt = forward_noise(z0, 600, eps, s);
    const double a = s.alpha_bar(600);
    for (std::size_t i = 0; i < z0.size(); ++i) {
        CHECK(zt[i] == doctest::Approx(std::sqrt(a) * z0[i] + std::sqrt(1 - a) * eps[i]).epsilon(1e-14));
    }
    CHECK_THROWS_AS(forward_noise(z0, 10, random_array<LatentTag>({2, 3, 5}, 3), s), ShapeError);
}

TEST_CASE("timesteps_for_strength examples and properties") {
    CHECK(timesteps_for_strength(0.5, 50).count == 25);
    CHECK(timesteps_for_strength(0.8, 50).count == 40);
    const auto zero = timesteps_for_strength(0.0, 50);
    CHECK(zero.count == 0);
    CHECK(zero.descending.empty());
    CHECK(timesteps_for_strength(1.0, 50).count == 50);

    const auto st = timesteps_for_strength(0.3, 50);
    REQUIRE(st.descending.size() == 15);
    for (int i = 0; i < 15; ++i) CHECK(st.descending[static_cast<std::size_t>(i)] == 15 - i);

    int prev = 0;
    for (int i = 0; i <= 1000; ++i) {
        const int T = timesteps_for_strength(i / 1000.0, 50).count;
        CHECK(T >= prev);
        CHECK(T == static_cast<int>(std::floor(i / 1000.0 * 50)));
        prev = T;
    }
    CHECK_THROWS_AS(timesteps_for_strength(1.2, 50), ParameterError);
    CHECK_THROWS_AS(timesteps_for_strength(-0.1, 50), ParameterError);
}

TEST_CASE("inference steps are spaced with stride 20 over 1000") {
    CHECK(train_step_for(0, 50, 1000) == 0);
    CHECK(train_step_for(1, 50, 1000) == 20);
    CHECK(train_step_for(25, 50, 1000) == 500);
    CHECK(train_step_for(50, 50, 1000) == 1000);
    const std::vector<int> inf{3, 2, 1};
    CHECK(train_steps_for(inf, 50, 1000) == std::vector<int>{60, 40, 20});
}

TEST_CASE("cfg_combine examples and identities") {
    const Shape3 sh{1, 2, 2};
    const auto a = random_array<LatentTag>(sh, 5);
    const auto b = random_array<LatentTag>(sh, 6);
    CHECK(cfg_combine(a, b, 1.0) == a);
    CHECK(cfg_combine(a, b, 0.0) == b);
    const auto c = cfg_combine(filled(sh, 0.2), filled(sh, 0.1), 7.5);
    for (double v : c.values()) CHECK(v == doctest::Approx(0.85).epsilon(1e-14));
    for (double w : {0.0, 0.5, 3.0, 7.5, 12.0}) {
        const auto same = cfg_combine(a, a, w);
        const auto g = cfg_combine(a, b, w);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(std::abs(same[i] - a[i]) <= 1e-12);
            CHECK(std::abs((g[i] - b[i]) - w * (a[i] - b[i])) <= 1e-12);
        }
    }
    CHECK_THROWS_AS(cfg_combine(a, random_array<LatentTag>({1, 2, 3}, 1), 2.0), ShapeError);
}

TEST_CASE("ddim_step recovers z0 from the true noise") {
    const auto s = default_schedule();
    const Shape3 sh{4, 8, 8};
    const auto z0 = random_array<LatentTag>(sh, 11);
    const auto eps = random_array<LatentTag>(sh, 12);
    for (int t : {1, 20, 500, 980, 1000}) {
        const auto zt = forward_noise(z0, t, eps, s);
        CHECK(sare::testing::rel_l2(ddim_step(zt, eps, t, 0, s), z0) < 1e-6);
    }
}

TEST_CASE("ddim_step on a flat schedule leaves z_t unchanged") {
    const auto s = NoiseSchedule::from_alpha_bar({1.0, 0.7, 0.7});
    const Shape3 sh{1, 3, 3};
    const auto z0 = random_array<LatentTag>(sh, 1);
    const auto eps = random_array<LatentTag>(sh, 2);
    const auto zt = forward_noise(z0, 2, eps, s);
    CHECK(sare::testing::max_abs_diff(ddim_step(zt, eps, 2, 1, s), zt) < 1e-14);
}

TEST_CASE("ddim_step errors, determinism and eta") {
    const auto s = NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.0});
    const Shape3 sh{1, 2, 2};
    const auto z = random_array<LatentTag>(sh, 1);
    const auto e = random_array<LatentTag>(sh, 2);
    CHECK_THROWS_AS(ddim_step(z, e, 2, 1, s), SingularityError);
    CHECK_THROWS_AS(ddim_step(z, e, 1, 0, s, 0.5), ParameterError);
    CHECK_THROWS_AS(ddim_step(z, e, 1, 1, s), ParameterError);

    const auto d = default_schedule();
    CHECK(ddim_step(z, e, 500, 480, d) == ddim_step(z, e, 500, 480, d));

    // eta > 0: direct evaluation of the closed form.
    const auto noise = random_array<LatentTag>(sh, 3);
    const double eta = 0.7;
    const int t = 500, tp = 480;
    const double a = d.alpha_bar(t), ap = d.alpha_bar(tp);
    const double sigma = eta * std::sqrt((1 - ap) / (1 - a)) * std::sqrt(1 - a / ap);
    const auto out = ddim_step(z, e, t, tp, d, eta, &noise);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double x0 = (z[i] - std::sqrt(1 - a) * e[i]) / std::sqrt(a);
        const double want = std::sqrt(ap) * x0 + std::sqrt(1 - ap - sigma * sigma) * e[i] + sigma * noise[i];
        CHECK(out[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("sample loop: empty steps, oracle recovery, guidance identity, reproducibility") {
    const auto s = default_schedule();
    const Shape3 sh{3, 6, 6};
    const auto z0 = random_array<LatentTag>(sh, 21);
    const auto eps = random_array<LatentTag>(sh, 22);
    const auto c = emb(EmbeddingSource::caption), n = emb(EmbeddingSource::null);

    ConstantOracle oracle(eps, s);
    CHECK(ddim_sample_loop(z0, oracle, c, n, GuidanceSpec::with_scale(7.5), {}, s) == z0);
    CHECK(oracle.calls == 0);

    for (double strength : {0.1, 0.5, 0.8}) {
        const auto st = timesteps_for_strength(strength, 50);
        const auto steps = train_steps_for(st.descending, 50, s.t_max());
        const auto zT = forward_noise(z0, steps.front(), eps, s);
        CHECK(sare::testing::rel_l2(ddim_sample_loop(zT, oracle, c, n, GuidanceSpec::with_scale(7.5), steps, s), z0) < 1e-5);
    }

    SplitDenoiser split(s);
    const std::vector<int> steps{400, 300, 200, 100};
    const auto full = ddim_sample_loop(z0, split, c, n, GuidanceSpec{1.0, true}, steps, s);
    CHECK(split.null_calls == 4);
    split.null_calls = 0;
    const auto cond_only = ddim_sample_loop(z0, split, c, n, GuidanceSpec{1.0, false}, steps, s);
    CHECK(split.null_calls == 0);
    CHECK(full == cond_only);

    SamplerOptions opt;
    opt.eta = 1.0;
    opt.seed = 99;
    const auto r1 = ddim_sample_loop(z0, split, c, n, GuidanceSpec::with_scale(3.0), steps, s, opt);
    const auto r2 = ddim_sample_loop(z0, split, c, n, GuidanceSpec::with_scale(3.0), steps, s, opt);
    CHECK(r1 == r2);
    opt.seed = 100;
    CHECK_FALSE(ddim_sample_loop(z0, split, c, n, GuidanceSpec::with_scale(3.0), steps, s, opt) == r1);
}

TEST_CASE("sample loop rejects bad steps and non-finite predictions") {
    const auto s = default_schedule();
    const Shape3 sh{1, 2, 2};
    const auto z = random_array<LatentTag>(sh, 1);
    auto bad = LatentArray(sh, 0.0);
    bad[2] = std::nan("");
    ConstantOracle nan_oracle(bad, s);
    const auto c = emb(EmbeddingSource::caption), n = emb(EmbeddingSource::null);
    try {
        ddim_sample_loop(z, nan_oracle, c, n, GuidanceSpec::with_scale(2.0), std::vector<int>{500, 250}, s);
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(e.step() == 0);
        CHECK(e.stage() == "denoise");
    }
    ConstantOracle ok(LatentArray(sh, 0.0), s);
    CHECK_THROWS_AS(ddim_sample_loop(z, ok, c, n, GuidanceSpec::with_scale(2.0), std::vector<int>{200, 300}, s), ParameterError);
    CHECK_THROWS_AS(ddim_sample_loop(z, ok, c, n, GuidanceSpec{2.0, false}, std::vector<int>{200}, s), ParameterError);
    CHECK_THROWS_AS(ddim_sample_loop(z, ok, c, n, GuidanceSpec{-1.0, true}, std::vector<int>{200}, s), ParameterError);
}
