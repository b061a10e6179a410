#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sare/tensor.hpp"

namespace sare {

struct Caption {
    std::string text;
    std::string captioner_id;
    std::string image_digest;

    friend bool operator==(const Caption&, const Caption&) = default;
};

enum class EmbeddingSource { caption, null };

/// Text-condition embedding, shape (tokens, dim), row-major.
/// Carries the provenance chain (image digest, captioner, encoder) of the caption it encodes.
struct ConditionEmbedding {
    std::vector<double> data;
    int tokens = 0;
    int dim = 0;
    EmbeddingSource source = EmbeddingSource::caption;
    std::string encoder_id;
    std::string image_digest;
    std::string captioner_id;
    std::vector<std::string> warnings;

    double at(int token, int j) const { return data[static_cast<std::size_t>(token) * dim + j]; }
    /// Mean over tokens.
    std::vector<double> pooled() const;
    bool all_finite() const;
};

class CaptionerBackend {
public:
    virtual ~CaptionerBackend() = default;
    /// Backend name plus version and decoding mode.
    virtual std::string identifier() const = 0;
    virtual bool deterministic() const { return true; }
    /// Describes `image`; `image_digest` is its content hash, supplied for backends that key on it.
    virtual std::string describe(const ImageArray& image, const std::string& image_digest) = 0;
};

class TextEncoderBackend {
public:
    virtual ~TextEncoderBackend() = default;
    virtual std::string identifier() const = 0;
    virtual int token_limit() const = 0;
    virtual ConditionEmbedding embed(std::string_view text) const = 0;
    /// Embedding of the designated empty prompt.
    virtual ConditionEmbedding null_embedding() const = 0;
};

/// Captions `image` and stamps the caption with the image's content hash.
Caption generate_caption(const ImageArray& image, CaptionerBackend& backend);
ConditionEmbedding embed_caption(const Caption& caption, const TextEncoderBackend& encoder);
ConditionEmbedding null_embedding(const TextEncoderBackend& encoder);

/// Deterministic toy encoder: each token maps to a fixed pseudo-random vector seeded by the
/// hash of its text; the empty prompt maps to a reserved constant vector.
class HashTextEncoder final : public TextEncoderBackend {
public:
    explicit HashTextEncoder(int dim = 32, int token_limit = 77);

    std::string identifier() const override;
    int token_limit() const override { return token_limit_; }
    ConditionEmbedding embed(std::string_view text) const override;
    ConditionEmbedding null_embedding() const override;

    static std::vector<std::string> tokenize(std::string_view text);

private:
    std::vector<double> token_vector(std::string_view token) const;

    int dim_;
    int token_limit_;
};

/// Caption-eligible factors of a toy scene. Empty strings mean "not available".
struct CaptionFactors {
    std::string shape;
    std::string color;
    std::string position;
};

/// Oracle captioner for toy scenes. It knows each registered image's ground-truth factors and
/// reveals each eligible factor independently with probability `fidelity`, using a mask seeded
/// by (seed, image digest).
class SyntheticCaptioner final : public CaptionerBackend {
public:
    SyntheticCaptioner(double fidelity, std::uint64_t seed, bool mention_position = false);

    std::string identifier() const override;
    std::string describe(const ImageArray& image, const std::string& image_digest) override;

    void register_image(const std::string& image_digest, CaptionFactors factors);
    std::size_t registered() const { return factors_.size(); }
    double fidelity() const { return fidelity_; }

    /// Template text for a given set of revealed factors.
    static std::string compose(const CaptionFactors& revealed);
    /// Factors revealed for one image under this captioner's mask.
    CaptionFactors reveal(const CaptionFactors& all, const std::string& image_digest) const;

private:
    double fidelity_;
    std::uint64_t seed_;
    bool mention_position_;
    std::unordered_map<std::string, CaptionFactors> factors_;
};

/// File name for a caption batch: `captions.<captioner_id>.jsonl` with unsafe characters replaced.
std::string caption_file_name(const std::string& captioner_id);
/// Appends JSON-lines records {image_digest, captioner_id, text}.
void append_captions_jsonl(const std::filesystem::path& path, const std::vector<Caption>& captions);
/// Loads a caption file keyed by image digest. A missing file yields an empty map.
std::map<std::string, Caption> read_captions_jsonl(const std::filesystem::path& path);

}  // namespace sare
