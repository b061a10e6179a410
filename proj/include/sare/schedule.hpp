#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sare/conditioning.hpp"
#include "sare/tensor.hpp"

namespace sare {

enum class BetaKind { linear, scaled_linear };

/// Cumulative signal coefficients alpha_bar[0..t_max] (alpha_bar[0] = 1) and the per-step
/// betas they accumulate from. Indexed by training step.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    /// Wraps an explicit alpha_bar table. Requires alpha_bar[0] == 1, entries in [0, 1] and
    /// non-increasing; unlike build_schedule this admits flat and zero entries.
    static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar);

    int t_max() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
    double alpha_bar(int t) const;
    /// beta for step s in 1..t_max.
    double beta(int s) const;
    std::span<const double> alpha_bars() const noexcept { return alpha_bar_; }
    std::span<const double> betas() const noexcept { return beta_; }

private:
    friend NoiseSchedule build_schedule(int, double, double, BetaKind);
    std::vector<double> alpha_bar_;
    std::vector<double> beta_;
};

NoiseSchedule build_schedule(int t_max, double beta_start, double beta_end, BetaKind kind);
/// scaled_linear, beta in [0.00085, 0.012], 1000 training steps.
NoiseSchedule default_schedule();

/// sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps.
LatentArray forward_noise(const LatentArray& z0, int t, const LatentArray& eps, const NoiseSchedule& schedule);

struct StrengthSteps {
    int count = 0;                 ///< T = floor(strength * max_steps)
    std::vector<int> descending;   ///< T, T-1, ..., 1 (inference-step indices)
};

StrengthSteps timesteps_for_strength(double strength, int max_steps);

/// Training step of inference step k on a uniform grid of `max_steps` over `t_max`
/// (stride 20 for 50 over 1000). k = 0 maps to 0.
int train_step_for(int inference_step, int max_steps, int t_max);
/// Maps descending inference steps to descending training steps.
std::vector<int> train_steps_for(std::span<const int> inference_steps, int max_steps, int t_max);

/// w * eps_cond + (1 - w) * eps_uncond.
LatentArray cfg_combine(const LatentArray& eps_cond, const LatentArray& eps_uncond, double w);

/// One DDIM update from training step t to t_prev < t. With eta = 0 the update is deterministic
/// and `fresh_noise` must be null; with eta > 0 it is required.
LatentArray ddim_step(const LatentArray& z_t, const LatentArray& eps_hat, int t, int t_prev,
                      const NoiseSchedule& schedule, double eta = 0.0, const LatentArray* fresh_noise = nullptr);

/// Predicted clean latent (z_t - sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha_bar[t]).
LatentArray predict_clean(const LatentArray& z_t, const LatentArray& eps_hat, int t, const NoiseSchedule& schedule);

struct GuidanceSpec {
    double scale = 7.5;
    bool use_null = true;

    /// Queries the unconditional branch only when it can affect the result (scale != 1).
    static GuidanceSpec with_scale(double w) { return {w, w != 1.0}; }
};

class DenoiserBackend {
public:
    virtual ~DenoiserBackend() = default;
    virtual std::string identifier() const = 0;
    /// Schedule the network was trained with.
    virtual const NoiseSchedule& schedule() const = 0;
    virtual LatentArray predict_noise(const LatentArray& z_t, int t, const ConditionEmbedding& cond) = 0;
};

struct SamplerOptions {
    double eta = 0.0;
    std::uint64_t seed = 0;
};

/// Guided DDIM loop over descending training steps; the last step denoises to t_prev = 0.
/// An empty step list returns z_T unchanged.
LatentArray ddim_sample_loop(const LatentArray& z_T, DenoiserBackend& denoiser, const ConditionEmbedding& cond,
                             const ConditionEmbedding& null_cond, const GuidanceSpec& guidance,
                             std::span<const int> steps, const NoiseSchedule& schedule,
                             const SamplerOptions& options = {});

/// Standard-normal array drawn from a seeded generator.
LatentArray gaussian_latent(Shape3 shape, std::uint64_t seed);

}  // namespace sare
