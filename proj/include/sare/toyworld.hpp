#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sare/conditioning.hpp"
#include "sare/datasets.hpp"
#include "sare/schedule.hpp"
#include "sare/tensor.hpp"

namespace sare::toy {

enum class ShapeKind { circle, square, triangle };
enum class ColorName { red, green, blue, yellow, cyan, magenta, orange, purple };

inline constexpr int kShapeCount = 3;
inline constexpr int kColorCount = 8;

std::string to_string(ShapeKind s);
std::string to_string(ColorName c);
ShapeKind parse_shape(const std::string& s);
ColorName parse_color(const std::string& c);
/// Nominal RGB of a named color.
std::array<double, 3> rgb_of(ColorName c);

/// Detail present only in "real" scenes; no caption ever mentions it.
struct InvisibleDetail {
    std::uint64_t background_texture_seed = 0;
    int occluder_count = 0;
    double hue_jitter = 0.0;  ///< degrees of rotation about the gray axis

    friend bool operator==(const InvisibleDetail&, const InvisibleDetail&) = default;
};

struct SceneFactors {
    ShapeKind shape = ShapeKind::circle;
    ColorName color = ColorName::red;
    double x = 0.5;     ///< centre, unit square
    double y = 0.5;
    double size = 0.2;  ///< extent as a fraction of the side
    std::optional<InvisibleDetail> detail;

    bool is_real() const { return detail.has_value(); }
    /// Coarse position phrase, e.g. "upper left".
    std::string coarse_position() const;
    CaptionFactors caption_factors() const;

    friend bool operator==(const SceneFactors&, const SceneFactors&) = default;
};

inline constexpr double kBackgroundGray = 0.5;
inline constexpr double kTextureAmplitude = 0.1;

/// Deterministic raster on the 8-bit grid. `rng_seed` places the occluders of real scenes and has
/// no effect on fake scenes.
ImageArray gen_scene(const SceneFactors& factors, std::uint64_t rng_seed, int resolution = 64);

/// Pixels covered by the main shape (coverage > 0.5).
std::vector<bool> shape_mask(const SceneFactors& factors, int resolution = 64);

struct ToyItem {
    SceneFactors factors;
    std::uint64_t scene_seed = 0;
    ImageArray image;
    std::string digest;
    Caption caption;
    int label = 0;  ///< 1 = fake, 0 = real
};

struct ToyDataset {
    std::vector<ToyItem> items;
    double fidelity = 1.0;
    std::uint64_t seed = 0;
    std::string captioner_id;

    std::size_t count(int label) const;
};

struct DatasetOptions {
    int resolution = 64;
    bool mention_position = false;
    /// Captioner seed; defaults to the dataset seed.
    std::optional<std::uint64_t> caption_seed;
};

/// Factor draws are stratified over (shape, color) within each class. Captions come from a
/// SyntheticCaptioner at `fidelity`. Reals come first, then fakes.
ToyDataset make_dataset(int n_real, int n_fake, double fidelity, std::uint64_t rng_seed,
                        const DatasetOptions& options = {});

/// Registers every item's factors with `captioner` so it can describe them.
void register_dataset(SyntheticCaptioner& captioner, const ToyDataset& dataset);

/// Writes `<dir>/{real,fake}/<index>.png`, `<dir>/manifest.jsonl` (+ meta) and `<dir>/scenes.jsonl`.
data::Manifest write_dataset(const std::filesystem::path& dir, const ToyDataset& dataset,
                             data::Split split = data::Split::test, const std::string& subset = "toyworld");

/// Reads back a dataset written by write_dataset.
ToyDataset read_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

struct ToyDenoiserSpec {
    int hidden = 16;
    int image_channels = 3;
    int time_dim = 16;
    int cond_dim = 32;   ///< text-embedding width
    int embed_dim = 32;  ///< conditioning MLP width
    std::vector<int> dilations{2, 4, 8};
    /// Scalar data statistics for the preconditioning; training sets them from the data.
    double data_mean = 0.5;
    double data_std = 0.2;

    friend bool operator==(const ToyDenoiserSpec&, const ToyDenoiserSpec&) = default;
};

/// Dilated residual conv net predicting noise. A conditioning vector built from a sinusoidal
/// timestep embedding and the pooled caption embedding is mapped to a per-layer channel bias.
/// The net output F is preconditioned around the Gaussian optimum for data with the ToyDenoiserSpec
/// mean m and std s: with v = ab s^2 + 1 - ab,
///   eps_hat = sqrt(1 - ab) (z - sqrt(ab) m) / v + sqrt(ab) s / sqrt(v) * F((z - sqrt(ab) m) / sqrt(v)).
class ToyDenoiser final : public DenoiserBackend {
public:
    ToyDenoiser(ToyDenoiserSpec spec, NoiseSchedule schedule, std::uint64_t init_seed);
    ~ToyDenoiser() override;
    ToyDenoiser(ToyDenoiser&&) noexcept;
    ToyDenoiser& operator=(ToyDenoiser&&) noexcept;

    std::string identifier() const override;
    const NoiseSchedule& schedule() const override { return schedule_; }
    LatentArray predict_noise(const LatentArray& z_t, int t, const ConditionEmbedding& cond) override;

    const ToyDenoiserSpec& spec() const { return spec_; }
    std::size_t parameter_count() const;
    /// Digest of the weights; part of the identifier so retrained models never share cache entries.
    std::string weights_digest() const;

    void save(const std::filesystem::path& dir) const;
    static ToyDenoiser load(const std::filesystem::path& dir);

    struct Net;
    Net& net() { return *net_; }

private:
    ToyDenoiserSpec spec_;
    NoiseSchedule schedule_;
    std::unique_ptr<Net> net_;
};

struct ToyTrainOptions {
    int epochs = 20;
    int batch_size = 16;
    double learning_rate = 2e-3;
    double caption_dropout = 0.15;
    std::uint64_t seed = 0;
    ToyDenoiserSpec spec{};
};

struct ToyTrainResult {
    ToyDenoiser model;
    std::vector<double> loss_trace;  ///< mean loss per epoch
};

/// Noise-prediction MSE at uniformly drawn training steps, Adam with a cosine learning-rate decay.
/// Throws TrainingError on a non-finite loss.
ToyTrainResult train_toy_denoiser(const std::vector<ToyItem>& items, const TextEncoderBackend& encoder,
                                  const NoiseSchedule& schedule, const ToyTrainOptions& options);

struct PredictionError {
    double eps_mse = 0.0;  ///< noise-prediction error
    double x0_mse = 0.0;   ///< error of the implied clean estimate
};

/// Prediction errors at a fixed training step with full captions, averaged over items. Noise
/// draws are seeded per item.
PredictionError toy_prediction_error(ToyDenoiser& model, const std::vector<ToyItem>& items,
                                     const TextEncoderBackend& encoder, int t, std::uint64_t seed);

// ---------------------------------------------------------------------------

/// Exact noise prediction for z0 ~ N(mu0, sigma0^2 I).
class AnalyticGaussianDenoiser final : public DenoiserBackend {
public:
    AnalyticGaussianDenoiser(LatentArray mu0, double sigma0, NoiseSchedule schedule = default_schedule());

    std::string identifier() const override;
    const NoiseSchedule& schedule() const override { return schedule_; }
    LatentArray predict_noise(const LatentArray& z_t, int t, const ConditionEmbedding& cond) override;

    /// E[z0 | z_t].
    LatentArray posterior_mean(const LatentArray& z_t, int t) const;

private:
    LatentArray mu0_;
    double sigma0_;
    NoiseSchedule schedule_;
};

std::unique_ptr<DenoiserBackend> analytic_gaussian_denoiser(const LatentArray& mu0, double sigma0,
                                                            const NoiseSchedule& schedule = default_schedule());

}  // namespace sare::toy
