#include "sare/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sare {

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar) {
    if (alpha_bar.size() < 2) throw ParameterError("alpha_bar", "needs at least two entries");
    if (alpha_bar[0] != 1.0) throw ParameterError("alpha_bar", "alpha_bar[0] must be 1");
    for (std::size_t t = 1; t < alpha_bar.size(); ++t) {
        if (!(alpha_bar[t] >= 0.0 && alpha_bar[t] <= 1.0)) {
            throw ParameterError("alpha_bar", "entry " + std::to_string(t) + " outside [0, 1]");
        }
        if (alpha_bar[t] > alpha_bar[t - 1]) {
            throw ParameterError("alpha_bar", "increases at step " + std::to_string(t));
        }
    }
    NoiseSchedule s;
    s.beta_.resize(alpha_bar.size() - 1);
    for (std::size_t t = 1; t < alpha_bar.size(); ++t) {
        s.beta_[t - 1] = alpha_bar[t - 1] > 0.0 ? 1.0 - alpha_bar[t] / alpha_bar[t - 1] : 1.0;
    }
    s.alpha_bar_ = std::move(alpha_bar);
    return s;
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > t_max()) throw ParameterError("t", "step " + std::to_string(t) + " outside [0, t_max]");
    return alpha_bar_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::beta(int s) const {
    if (s < 1 || s > t_max()) throw ParameterError("s", "step " + std::to_string(s) + " outside [1, t_max]");
    return beta_[static_cast<std::size_t>(s - 1)];
}

NoiseSchedule build_schedule(int t_max, double beta_start, double beta_end, BetaKind kind) {
    if (t_max < 1) throw ParameterError("t_max", "must be >= 1");
    if (!(beta_start > 0.0)) throw ParameterError("beta_start", "must be > 0");
    if (!(beta_end < 1.0)) throw ParameterError("beta_end", "must be < 1");
    if (!(beta_start <= beta_end)) throw ParameterError("beta_start", "must not exceed beta_end");

    NoiseSchedule s;
    s.beta_.resize(static_cast<std::size_t>(t_max));
    for (int i = 0; i < t_max; ++i) {
        const double frac = t_max == 1 ? 0.0 : static_cast<double>(i) / (t_max - 1);
        if (kind == BetaKind::linear) {
            s.beta_[i] = beta_start + frac * (beta_end - beta_start);
        } else {
            const double r = std::sqrt(beta_start) + frac * (std::sqrt(beta_end) - std::sqrt(beta_start));
            s.beta_[i] = r * r;
        }
    }
    s.alpha_bar_.resize(static_cast<std::size_t>(t_max) + 1);
    s.alpha_bar_[0] = 1.0;
    for (int t = 1; t <= t_max; ++t) s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - s.beta_[t - 1]);
    return s;
}

NoiseSchedule default_schedule() { return build_schedule(1000, 0.00085, 0.012, BetaKind::scaled_linear); }

LatentArray forward_noise(const LatentArray& z0, int t, const LatentArray& eps, const NoiseSchedule& schedule) {
    require_same_shape(z0, eps, "forward_noise");
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    LatentArray out(z0.shape());
    for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

StrengthSteps timesteps_for_strength(double strength, int max_steps) {
    if (!(strength >= 0.0 && strength <= 1.0)) throw ParameterError("strength", "must lie in [0, 1]");
    if (max_steps < 1) throw ParameterError("max_steps", "must be >= 1");
    StrengthSteps out;
    out.count = static_cast<int>(std::floor(strength * max_steps));
    out.descending.reserve(static_cast<std::size_t>(out.count));
    for (int k = out.count; k >= 1; --k) out.descending.push_back(k);
    return out;
}

int train_step_for(int inference_step, int max_steps, int t_max) {
    if (inference_step < 0 || inference_step > max_steps) {
        throw ParameterError("inference_step", std::to_string(inference_step) + " outside [0, max_steps]");
    }
    return static_cast<int>(static_cast<long long>(inference_step) * t_max / max_steps);
}

std::vector<int> train_steps_for(std::span<const int> inference_steps, int max_steps, int t_max) {
    std::vector<int> out;
    out.reserve(inference_steps.size());
    for (int k : inference_steps) out.push_back(train_step_for(k, max_steps, t_max));
    return out;
}

LatentArray cfg_combine(const LatentArray& eps_cond, const LatentArray& eps_uncond, double w) {
    require_same_shape(eps_cond, eps_uncond, "cfg_combine");
    LatentArray out(eps_cond.shape());
    const double v = 1.0 - w;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * eps_cond[i] + v * eps_uncond[i];
    return out;
}

LatentArray predict_clean(const LatentArray& z_t, const LatentArray& eps_hat, int t, const NoiseSchedule& schedule) {
    require_same_shape(z_t, eps_hat, "predict_clean");
    const double ab = schedule.alpha_bar(t);
    if (ab <= 0.0) throw SingularityError("alpha_bar[" + std::to_string(t) + "] is zero");
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);
    LatentArray out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (z_t[i] - sb * eps_hat[i]) / sa;
    return out;
}

LatentArray ddim_step(const LatentArray& z_t, const LatentArray& eps_hat, int t, int t_prev,
                      const NoiseSchedule& schedule, double eta, const LatentArray* fresh_noise) {
    if (!(t_prev < t)) throw ParameterError("t_prev", "must be smaller than t");
    if (!(eta >= 0.0)) throw ParameterError("eta", "must be >= 0");
    if (eta > 0.0 && fresh_noise == nullptr) throw ParameterError("fresh_noise", "required when eta > 0");
    if (fresh_noise != nullptr) require_same_shape(z_t, *fresh_noise, "ddim_step noise");

    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const LatentArray z0_hat = predict_clean(z_t, eps_hat, t, schedule);

    double sigma = 0.0;
    if (eta > 0.0 && ab_t < 1.0) {
        sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(std::max(0.0, 1.0 - ab_t / ab_prev));
    }
    const double a = std::sqrt(ab_prev);
    const double b = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    LatentArray out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = a * z0_hat[i] + b * eps_hat[i];
        if (sigma > 0.0) v += sigma * (*fresh_noise)[i];
        out[i] = v;
    }
    return out;
}

LatentArray gaussian_latent(Shape3 shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    LatentArray out(shape);
    for (double& v : out.values()) v = normal(rng);
    return out;
}

namespace {
void require_finite(const LatentArray& eps, int step, const char* branch) {
    if (!eps.all_finite()) {
        throw BackendError("denoise", std::string("non-finite ") + branch + " noise prediction", step);
    }
}
}  // namespace

LatentArray ddim_sample_loop(const LatentArray& z_T, DenoiserBackend& denoiser, const ConditionEmbedding& cond,
                             const ConditionEmbedding& null_cond, const GuidanceSpec& guidance,
                             std::span<const int> steps, const NoiseSchedule& schedule,
                             const SamplerOptions& options) {
    if (!(guidance.scale >= 0.0)) throw ParameterError("guidance.scale", "must be >= 0");
    if (!guidance.use_null && guidance.scale != 1.0) {
        throw ParameterError("guidance.use_null", "the unconditional branch is required unless scale == 1");
    }
    for (std::size_t i = 1; i < steps.size(); ++i) {
        if (!(steps[i] < steps[i - 1])) throw ParameterError("steps", "must be strictly descending");
    }
    if (!steps.empty() && steps.back() <= 0) throw ParameterError("steps", "last step must be > 0");

    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    LatentArray z = z_T;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const int t = steps[i];
        const int t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
        const int step_index = static_cast<int>(i);

        LatentArray eps = denoiser.predict_noise(z, t, cond);
        require_same_shape(z, eps, "denoiser output");
        require_finite(eps, step_index, "conditional");
        if (guidance.use_null) {
            LatentArray eps_null = denoiser.predict_noise(z, t, null_cond);
            require_same_shape(z, eps_null, "denoiser output");
            require_finite(eps_null, step_index, "unconditional");
            eps = cfg_combine(eps, eps_null, guidance.scale);
        }

        if (options.eta > 0.0) {
            LatentArray noise(z.shape());
            for (double& v : noise.values()) v = normal(rng);
            z = ddim_step(z, eps, t, t_prev, schedule, options.eta, &noise);
        } else {
            z = ddim_step(z, eps, t, t_prev, schedule, 0.0, nullptr);
        }
    }
    return z;
}

}  // namespace sare
