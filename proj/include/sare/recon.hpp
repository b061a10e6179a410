#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sare/conditioning.hpp"
#include "sare/schedule.hpp"
#include "sare/tensor.hpp"

namespace sare {

class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual std::string identifier() const = 0;
    virtual int downscale_factor() const = 0;
    virtual LatentArray encode(const ImageArray& image) const = 0;
    virtual ImageArray decode(const LatentArray& latent) const = 0;
};

/// Latents are the pixels themselves.
class IdentityCodec final : public LatentCodec {
public:
    std::string identifier() const override { return "identity-codec-v1"; }
    int downscale_factor() const override { return 1; }
    LatentArray encode(const ImageArray& image) const override;
    ImageArray decode(const LatentArray& latent) const override;
};

/// Box-average downsampling encoder with nearest-neighbour decoder.
class AvgPoolCodec final : public LatentCodec {
public:
    explicit AvgPoolCodec(int factor = 2);
    std::string identifier() const override { return "avgpool-codec-v1-x" + std::to_string(factor_); }
    int downscale_factor() const override { return factor_; }
    LatentArray encode(const ImageArray& image) const override;
    ImageArray decode(const LatentArray& latent) const override;

private:
    int factor_;
};

/// Wraps a denoiser and counts predict_noise calls.
class CountingDenoiser final : public DenoiserBackend {
public:
    explicit CountingDenoiser(DenoiserBackend& inner) : inner_(inner) {}
    std::string identifier() const override { return inner_.identifier(); }
    const NoiseSchedule& schedule() const override { return inner_.schedule(); }
    LatentArray predict_noise(const LatentArray& z_t, int t, const ConditionEmbedding& cond) override {
        ++calls_;
        return inner_.predict_noise(z_t, t, cond);
    }
    std::uint64_t calls() const { return calls_.load(); }

private:
    DenoiserBackend& inner_;
    std::atomic<std::uint64_t> calls_{0};
};

struct ReconstructionConfig {
    double strength = 0.5;
    double guidance_scale = 7.5;
    int max_steps = 50;
    double eta = 0.0;
    std::int64_t seed = 0;
    std::string codec_id;
    std::string denoiser_id;
    std::string captioner_id;
    std::string encoder_id;

    void validate() const;
    nlohmann::json to_json() const;
    static ReconstructionConfig from_json(const nlohmann::json& j);
    friend bool operator==(const ReconstructionConfig&, const ReconstructionConfig&) = default;
};

struct ReconstructionRecord {
    std::string input_digest;
    ReconstructionConfig config;
    Caption caption;
    ImageArray output;
    double wall_time = 0.0;
    std::string output_digest;
};

struct ReconBackends {
    const LatentCodec& codec;
    DenoiserBackend& denoiser;
    const TextEncoderBackend& encoder;
};

/// Copies the backend identifiers into `config`.
ReconstructionConfig with_backend_ids(ReconstructionConfig config, const ReconBackends& backends,
                                      const std::string& captioner_id);

/// Caption-guided partial-diffusion reconstruction of a preprocessed image. The output is
/// clamped to [0, 1] and lies on the 16-bit grid.
ReconstructionRecord reconstruct(const ImageArray& image, const Caption& caption, const ReconstructionConfig& config,
                                 const ReconBackends& backends);

/// SHA-256 over the canonical serialization of everything that determines a reconstruction.
std::string cache_key(const std::string& input_digest, const Caption& caption, const ReconstructionConfig& config);

/// Content-addressed store: `<dir>/<key[0:2]>/<key>.png` (16-bit) + `<key>.json` sidecar.
/// Writes go through a temporary file and an atomic rename; the sidecar is written last.
class ReconstructionCache {
public:
    explicit ReconstructionCache(std::filesystem::path dir);

    const std::filesystem::path& dir() const { return dir_; }
    std::filesystem::path image_path(const std::string& key) const;
    std::filesystem::path sidecar_path(const std::string& key) const;
    bool contains(const std::string& key) const;

    /// Returns the stored record, or nullopt on a miss. Corrupt entries (undecodable, or digest
    /// mismatch on read-back) are removed, logged, and reported as misses.
    std::optional<ReconstructionRecord> load(const std::string& key) const;
    void store(const std::string& key, const ReconstructionRecord& record) const;

private:
    std::filesystem::path dir_;
};

struct CacheStats {
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
};

/// Looks the reconstruction up in the cache; on a miss computes and persists it.
ReconstructionRecord cached_reconstruct(const ImageArray& image, const Caption& caption,
                                        const ReconstructionConfig& config, const ReconBackends& backends,
                                        const ReconstructionCache& cache, CacheStats* stats = nullptr);

/// Writes `bytes` to `target` via a uniquely named temporary file in the same directory.
void atomic_write(const std::filesystem::path& target, const std::string& bytes);

}  // namespace sare
