#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sare/image_ops.hpp"
#include "sare/sare_map.hpp"
#include "sare/tensor.hpp"

namespace sare::detect {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Origin { image, sare, fused };

/// (positions, dim) feature matrix.
struct FeatureSequence {
    Matrix data;
    Origin origin = Origin::image;

    int positions() const { return static_cast<int>(data.rows()); }
    int dim() const { return static_cast<int>(data.cols()); }
};

/// Patch encoder: box-average pooling, non-overlapping patches flattened into tokens, then a
/// two-layer ReLU MLP per token. With pool 8 and patch 4 the token stride is 32 pixels.
struct EncoderSpec {
    int channels = 3;
    int pool = 8;
    int patch = 4;
    int hidden = 128;
    int out_dim = 256;
    double input_scale = 1.0;  ///< multiplies the pixels before pooling

    int stride() const { return pool * patch; }
    int patch_dim() const { return channels * patch * patch; }
    friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

class PatchEncoder {
public:
    PatchEncoder() = default;
    PatchEncoder(EncoderSpec spec, std::uint64_t seed);

    const EncoderSpec& spec() const { return spec_; }
    int positions_for(int height, int width) const;

    /// (positions, patch_dim) token inputs of one image.
    Matrix tokens(const ImageArray& image) const;
    /// Token matrix -> features; `hidden` receives the pre-activation of the first layer.
    Matrix forward_tokens(const Matrix& tokens, Matrix* pre_activation = nullptr) const;
    FeatureSequence forward(const ImageArray& image, Origin origin) const;

    Matrix W1, W2;
    Vector b1, b2;

private:
    EncoderSpec spec_{};
};

struct FusionWeights {
    Matrix W_Q;  ///< (d_x, d)
    Matrix W_K;  ///< (d_S, d)
    Matrix W_V;  ///< (d_S, d)
    Matrix W_O;  ///< (d, d)
    int head_count = 8;
    bool residual = false;  ///< adds f_x to the projected output (requires d_x == d)

    int d() const { return static_cast<int>(W_Q.cols()); }
    void validate() const;
    static FusionWeights random(int d_x, int d_s, int d, int heads, std::uint64_t seed, bool residual = false);
};

/// Intermediate values of one fusion pass, kept for the backward pass.
struct FusionCache {
    Matrix Q, K, V;
    std::vector<Matrix> attention;  ///< per head, (queries, keys), rows sum to 1
    Matrix heads;                   ///< concatenated per-head outputs, (queries, d)
};

/// Multi-head cross-attention with queries from f_x and keys/values from f_S; output
/// positions follow the queries.
FeatureSequence cross_attention_fuse(const FeatureSequence& f_x, const FeatureSequence& f_s, const FusionWeights& w,
                                     FusionCache* cache = nullptr);

struct FusionGradients {
    Matrix W_Q, W_K, W_V, W_O;
    Matrix f_x, f_s;
};

FusionGradients cross_attention_backward(const FeatureSequence& f_x, const FeatureSequence& f_s, const FusionWeights& w,
                                         const FusionCache& cache, const Matrix& d_out);

struct ClassifierHead {
    Vector w;
    double b = 0.0;
};

/// Mean over positions, then w . pooled + b.
double classify_logit(const FeatureSequence& fused, const ClassifierHead& head);
/// sigmoid(classify_logit); 1 = fake.
double classify(const FeatureSequence& fused, const ClassifierHead& head);
double sigmoid(double x);
/// Binary cross-entropy on a logit, computed stably.
double bce_with_logit(double logit, int label);

struct DetectorSpec {
    int input_size = 224;
    EncoderSpec image_encoder{};
    EncoderSpec sare_encoder{};
    int fusion_dim = 256;
    int heads = 8;
    bool residual = false;
    bool image_encoder_frozen = true;
    bool sare_encoder_frozen = false;

    /// Small configuration for the 64x64 toy world.
    static DetectorSpec toy();
    nlohmann::json to_json() const;
    static DetectorSpec from_json(const nlohmann::json& j);
};

class DetectorModel {
public:
    DetectorModel() = default;
    DetectorModel(DetectorSpec spec, std::uint64_t seed);

    const DetectorSpec& spec() const { return spec_; }

    /// Fake probability for an (image, SARE) pair already at input_size x input_size.
    double predict(const ImageArray& image, const ImageArray& sare) const;
    double logit(const ImageArray& image, const ImageArray& sare) const;

    void save(const std::filesystem::path& dir, const nlohmann::json& training = nlohmann::json::object()) const;
    static DetectorModel load(const std::filesystem::path& dir);

    PatchEncoder image_encoder;
    PatchEncoder sare_encoder;
    FusionWeights fusion;
    ClassifierHead head;

private:
    DetectorSpec spec_{};
};

/// f_x from the image encoder and f_S from the SARE encoder. Throws ShapeError on inputs that are not
/// input_size square and NumericError naming the encoder on non-finite activations.
std::pair<FeatureSequence, FeatureSequence> extract_features(const ImageArray& image, const ImageArray& sare,
                                                             const DetectorModel& model);
/// Batched variant: all samples' tokens go through one matrix product per layer.
std::vector<std::pair<FeatureSequence, FeatureSequence>> extract_features_batch(const std::vector<ImageArray>& images,
                                                                               const std::vector<ImageArray>& sares,
                                                                               const DetectorModel& model);

// ---------------------------------------------------------------------------

struct AugmentationPolicy {
    int crop_size = 224;
    double crop_p = 1.0;  ///< random crop; otherwise centre crop
    double flip_p = 0.5;
    double noise_p = 0.5;
    double noise_sigma_min = 0.0;
    double noise_sigma_max = 0.05;
    double blur_p = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 1.0;
    double rotate_p = 0.5;
    double rotate_degrees = 10.0;
    /// Eval mode: centre crop only.
    bool training = true;

    void validate() const;
    static AugmentationPolicy eval(int crop_size = 224);
};

/// What one augmentation call did.
struct AugmentRecord {
    CropWindow crop;
    bool flipped = false;
    double noise_sigma = 0.0;  ///< 0 when not applied
    double blur_sigma = 0.0;
    double rotation = 0.0;
};

struct AugmentedPair {
    ImageArray image;
    ImageArray sare;
    AugmentRecord record;
};

/// crop -> flip -> noise -> blur -> rotate. Noise and blur touch the image only; crop, flip and
/// rotation are applied identically to the SARE map. Values are not re-clamped after noise.
AugmentedPair augment_pair(const ImageArray& image, const ImageArray& sare, const AugmentationPolicy& policy,
                           std::uint64_t seed);
/// Image-only augmentation with the same draws as augment_pair.
ImageArray augment(const ImageArray& image, const AugmentationPolicy& policy, std::uint64_t seed,
                   AugmentRecord* record = nullptr);

/// Bicubic resize of the image and of the SARE map onto a square canvas (default 256), the size
/// augmentation crops from.
std::pair<ImageArray, ImageArray> to_canvas(const ImageArray& image, const SareMap& sare, int canvas = 256);

// ---------------------------------------------------------------------------

struct TrainConfig {
    int batch_size = 512;
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int epochs = 17;
    AugmentationPolicy augmentation{};
    std::uint64_t seed = 0;
    int workers = 1;  ///< augmentation workers; results do not depend on this

    void validate() const;
    nlohmann::json to_json() const;
};

/// One training pair on the augmentation canvas.
struct LabeledSample {
    ImageArray image;
    ImageArray sare;
    int label = 0;  ///< 1 = fake
};

struct LossRecord {
    int epoch = 0;
    int step = 0;
    double loss = 0.0;
};

struct TrainResult {
    DetectorModel model;
    std::vector<double> epoch_loss;
    std::vector<LossRecord> steps;
};

/// Binary cross-entropy with decoupled weight decay; frozen components are left untouched.
/// Per-sample augmentation randomness is derived from (seed, epoch, sample index).
TrainResult train_detector(const std::vector<LabeledSample>& data, const TrainConfig& config, DetectorModel model);

/// Mean BCE of the model on `data` under eval-mode preprocessing.
double evaluate_loss(const DetectorModel& model, const std::vector<LabeledSample>& data, int crop_size);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& steps);

/// Gradients of the BCE loss of one (f_x, f_S, label) instance with respect to the fusion and head
/// parameters; used by training and exposed for gradient checks.
struct FusionHeadGradients {
    double loss = 0.0;
    FusionGradients fusion;
    Vector head_w;
    double head_b = 0.0;
};

FusionHeadGradients fusion_head_gradients(const FeatureSequence& f_x, const FeatureSequence& f_s,
                                          const FusionWeights& w, const ClassifierHead& head, int label);

}  // namespace sare::detect
