#include "sare/recon.hpp"

#include <unistd.h>

#include <chrono>
#include <fstream>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "sare/digest.hpp"
#include "sare/image_io.hpp"
#include "sare/image_ops.hpp"
#include "sare/version.hpp"

namespace sare {

namespace fs = std::filesystem;

LatentArray IdentityCodec::encode(const ImageArray& image) const { return retag<LatentTag>(image); }

ImageArray IdentityCodec::decode(const LatentArray& latent) const { return retag<ImageTag>(latent); }

AvgPoolCodec::AvgPoolCodec(int factor) : factor_(factor) {
    if (factor < 1) throw ParameterError("factor", "must be >= 1");
}

LatentArray AvgPoolCodec::encode(const ImageArray& image) const {
    if (image.height() % factor_ != 0 || image.width() % factor_ != 0) {
        throw ShapeError("image " + image.shape().str() + " is not divisible by codec factor " +
                         std::to_string(factor_));
    }
    return retag<LatentTag>(average_pool(image, factor_));
}

ImageArray AvgPoolCodec::decode(const LatentArray& latent) const {
    return retag<ImageTag>(upsample_nearest(latent, factor_));
}

// ---------------------------------------------------------------------------

void ReconstructionConfig::validate() const {
    if (!(strength >= 0.0 && strength <= 1.0)) throw ParameterError("strength", "must lie in [0, 1]");
    if (!(guidance_scale >= 0.0)) throw ParameterError("guidance_scale", "must be >= 0");
    if (max_steps < 1) throw ParameterError("max_steps", "must be >= 1");
    if (!(eta >= 0.0)) throw ParameterError("eta", "must be >= 0");
}

nlohmann::json ReconstructionConfig::to_json() const {
    return nlohmann::json{{"strength", strength},       {"guidance_scale", guidance_scale},
                          {"max_steps", max_steps},     {"eta", eta},
                          {"seed", seed},               {"codec_id", codec_id},
                          {"denoiser_id", denoiser_id}, {"captioner_id", captioner_id},
                          {"encoder_id", encoder_id}};
}

ReconstructionConfig ReconstructionConfig::from_json(const nlohmann::json& j) {
    ReconstructionConfig c;
    c.strength = j.value("strength", c.strength);
    c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.eta = j.value("eta", c.eta);
    c.seed = j.value("seed", c.seed);
    c.codec_id = j.value("codec_id", std::string());
    c.denoiser_id = j.value("denoiser_id", std::string());
    c.captioner_id = j.value("captioner_id", std::string());
    c.encoder_id = j.value("encoder_id", std::string());
    return c;
}

ReconstructionConfig with_backend_ids(ReconstructionConfig config, const ReconBackends& backends,
                                      const std::string& captioner_id) {
    config.codec_id = backends.codec.identifier();
    config.denoiser_id = backends.denoiser.identifier();
    config.encoder_id = backends.encoder.identifier();
    config.captioner_id = captioner_id;
    return config;
}

ReconstructionRecord reconstruct(const ImageArray& image, const Caption& caption, const ReconstructionConfig& config,
                                 const ReconBackends& backends) {
    config.validate();
    const auto started = std::chrono::steady_clock::now();
    ReconstructionRecord record;
    record.input_digest = image_digest(image);
    if (!caption.image_digest.empty() && caption.image_digest != record.input_digest) {
        throw ParameterError("caption.image_digest", "does not match the image being reconstructed");
    }
    record.config = config;
    record.caption = caption;

    LatentArray z0;
    try {
        z0 = backends.codec.encode(image);
    } catch (const BackendError&) {
        throw;
    } catch (const std::exception& e) {
        throw BackendError("encode", e.what());
    }

    const StrengthSteps steps = timesteps_for_strength(config.strength, config.max_steps);
    LatentArray z_hat = z0;
    if (steps.count > 0) {
        try {
            const NoiseSchedule& schedule = backends.denoiser.schedule();
            const int t_max = schedule.t_max();
            const int t_entry = train_step_for(steps.count, config.max_steps, t_max);
            const std::uint64_t seed = mix_seed(static_cast<std::uint64_t>(config.seed), record.input_digest);
            const LatentArray eps = gaussian_latent(z0.shape(), seed);
            const LatentArray z_T = forward_noise(z0, t_entry, eps, schedule);
            const std::vector<int> train_steps = train_steps_for(steps.descending, config.max_steps, t_max);

            const ConditionEmbedding cond = embed_caption(caption, backends.encoder);
            const ConditionEmbedding uncond = null_embedding(backends.encoder);
            const SamplerOptions options{config.eta, derive_seed(seed, 1)};
            z_hat = ddim_sample_loop(z_T, backends.denoiser, cond, uncond, GuidanceSpec::with_scale(config.guidance_scale),
                                     train_steps, schedule, options);
        } catch (const BackendError&) {
            throw;
        } catch (const ParameterError&) {
            throw;
        } catch (const std::exception& e) {
            throw BackendError("denoise", e.what());
        }
    }

    try {
        record.output = backends.codec.decode(z_hat);
    } catch (const std::exception& e) {
        throw BackendError("decode", e.what());
    }
    if (record.output.shape() != image.shape()) {
        throw BackendError("decode", "output shape " + record.output.shape().str() + " differs from input " +
                                         image.shape().str());
    }
    quantize16(record.output);
    record.output_digest = image_digest(record.output);
    record.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return record;
}

std::string cache_key(const std::string& input_digest, const Caption& caption, const ReconstructionConfig& config) {
    // nlohmann::json objects keep keys sorted, which makes the dump canonical.
    const nlohmann::json canonical{
        {"schema", "sare-recon-key-v1"},
        {"input_digest", input_digest},
        {"caption_text", caption.text},
        {"captioner_id", caption.captioner_id},
        {"encoder_id", config.encoder_id},
        {"codec_id", config.codec_id},
        {"denoiser_id", config.denoiser_id},
        {"strength", config.strength},
        {"guidance_scale", config.guidance_scale},
        {"max_steps", config.max_steps},
        {"eta", config.eta},
        {"seed", config.seed},
    };
    return sha256_hex(canonical.dump());
}

// ---------------------------------------------------------------------------

void atomic_write(const fs::path& target, const std::string& bytes) {
    static std::atomic<std::uint64_t> counter{0};
    fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot create " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed on " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("rename to " + target.string() + " failed: " + ec.message());
    }
}

ReconstructionCache::ReconstructionCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

fs::path ReconstructionCache::image_path(const std::string& key) const {
    return dir_ / key.substr(0, 2) / (key + ".png");
}

fs::path ReconstructionCache::sidecar_path(const std::string& key) const {
    return dir_ / key.substr(0, 2) / (key + ".json");
}

bool ReconstructionCache::contains(const std::string& key) const {
    return fs::exists(sidecar_path(key)) && fs::exists(image_path(key));
}

std::optional<ReconstructionRecord> ReconstructionCache::load(const std::string& key) const {
    const fs::path png = image_path(key);
    const fs::path side = sidecar_path(key);
    if (!fs::exists(side) || !fs::exists(png)) return std::nullopt;

    auto discard = [&](const std::string& why) -> std::optional<ReconstructionRecord> {
        spdlog::warn("discarding corrupt cache entry {}: {}", key, why);
        std::error_code ec;
        fs::remove(side, ec);
        fs::remove(png, ec);
        return std::nullopt;
    };

    ReconstructionRecord r;
    try {
        std::ifstream in(side, std::ios::binary);
        const auto j = nlohmann::json::parse(in);
        if (j.at("key").get<std::string>() != key) return discard("sidecar key mismatch");
        r.input_digest = j.at("input_digest").get<std::string>();
        r.config = ReconstructionConfig::from_json(j.at("config"));
        const auto& c = j.at("caption");
        r.caption = Caption{c.at("text").get<std::string>(), c.at("captioner_id").get<std::string>(),
                            c.at("image_digest").get<std::string>()};
        r.output_digest = j.at("output_digest").get<std::string>();
        r.wall_time = j.value("wall_time", 0.0);
    } catch (const nlohmann::json::exception& e) {
        return discard(std::string("unreadable sidecar: ") + e.what());
    }
    try {
        r.output = read_image(png);
    } catch (const IoError& e) {
        return discard(e.what());
    }
    if (image_digest(r.output) != r.output_digest) return discard("output digest mismatch");
    return r;
}

void ReconstructionCache::store(const std::string& key, const ReconstructionRecord& record) const {
    const fs::path png = image_path(key);
    fs::create_directories(png.parent_path());
    static std::atomic<std::uint64_t> counter{0};
    const fs::path tmp = png.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    write_png(tmp, record.output, 16);
    std::error_code ec;
    fs::rename(tmp, png, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("rename to " + png.string() + " failed: " + ec.message());
    }

    const nlohmann::json j{
        {"key", key},
        {"input_digest", record.input_digest},
        {"config", record.config.to_json()},
        {"caption",
         {{"text", record.caption.text},
          {"captioner_id", record.caption.captioner_id},
          {"image_digest", record.caption.image_digest}}},
        {"output_digest", record.output_digest},
        {"height", record.output.height()},
        {"width", record.output.width()},
        {"wall_time", record.wall_time},
        {"toolkit_version", kToolkitVersion},
    };
    atomic_write(sidecar_path(key), j.dump(2) + "\n");
}

ReconstructionRecord cached_reconstruct(const ImageArray& image, const Caption& caption,
                                        const ReconstructionConfig& config, const ReconBackends& backends,
                                        const ReconstructionCache& cache, CacheStats* stats) {
    const std::string key = cache_key(image_digest(image), caption, config);
    if (auto hit = cache.load(key)) {
        if (stats) ++stats->hits;
        return std::move(*hit);
    }
    if (stats) ++stats->misses;
    ReconstructionRecord record = reconstruct(image, caption, config, backends);
    cache.store(key, record);
    return record;
}

}  // namespace sare
