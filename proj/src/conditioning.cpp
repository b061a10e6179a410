#include "sare/conditioning.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sare/digest.hpp"
#include "sare/errors.hpp"

namespace sare {

std::vector<double> ConditionEmbedding::pooled() const {
    std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
    if (tokens == 0) return out;
    for (int t = 0; t < tokens; ++t) {
        for (int j = 0; j < dim; ++j) out[j] += at(t, j);
    }
    for (double& v : out) v /= tokens;
    return out;
}

bool ConditionEmbedding::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Caption generate_caption(const ImageArray& image, CaptionerBackend& backend) {
    const std::string digest = image_digest(image);
    Caption caption;
    caption.captioner_id = backend.identifier();
    caption.image_digest = digest;
    try {
        caption.text = backend.describe(image, digest);
    } catch (const CaptioningError&) {
        throw;
    } catch (const std::exception& e) {
        throw CaptioningError(caption.captioner_id, digest, e.what());
    }
    return caption;
}

ConditionEmbedding embed_caption(const Caption& caption, const TextEncoderBackend& encoder) {
    ConditionEmbedding e = encoder.embed(caption.text);
    e.source = EmbeddingSource::caption;
    e.image_digest = caption.image_digest;
    e.captioner_id = caption.captioner_id;
    return e;
}

ConditionEmbedding null_embedding(const TextEncoderBackend& encoder) { return encoder.null_embedding(); }

// ---------------------------------------------------------------------------

HashTextEncoder::HashTextEncoder(int dim, int token_limit) : dim_(dim), token_limit_(token_limit) {
    if (dim < 1) throw ParameterError("dim", "must be >= 1");
    if (token_limit < 1) throw ParameterError("token_limit", "must be >= 1");
}

std::string HashTextEncoder::identifier() const {
    return "hash-encoder-v1-d" + std::to_string(dim_) + "-l" + std::to_string(token_limit_);
}

std::vector<std::string> HashTextEncoder::tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

std::vector<double> HashTextEncoder::token_vector(std::string_view token) const {
    std::mt19937_64 rng(mix_seed(static_cast<std::uint64_t>(dim_), sha256_hex(token)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(dim_));
    for (double& x : v) x = normal(rng);
    return v;
}

ConditionEmbedding HashTextEncoder::embed(std::string_view text) const {
    auto tokens = tokenize(text);
    if (tokens.empty()) return null_embedding();

    ConditionEmbedding e;
    e.encoder_id = identifier();
    e.source = EmbeddingSource::caption;
    if (static_cast<int>(tokens.size()) > token_limit_) {
        e.warnings.push_back("caption truncated from " + std::to_string(tokens.size()) + " to " +
                             std::to_string(token_limit_) + " tokens");
        tokens.resize(static_cast<std::size_t>(token_limit_));
    }
    e.tokens = static_cast<int>(tokens.size());
    e.dim = dim_;
    e.data.reserve(tokens.size() * static_cast<std::size_t>(dim_));
    for (const auto& tok : tokens) {
        const auto v = token_vector(tok);
        e.data.insert(e.data.end(), v.begin(), v.end());
    }
    return e;
}

ConditionEmbedding HashTextEncoder::null_embedding() const {
    ConditionEmbedding e;
    e.encoder_id = identifier();
    e.source = EmbeddingSource::null;
    e.tokens = 1;
    e.dim = dim_;
    // "<|empty|>" cannot come out of the tokenizer, so this vector is reserved.
    e.data = token_vector("<|empty|>");
    return e;
}

// ---------------------------------------------------------------------------

SyntheticCaptioner::SyntheticCaptioner(double fidelity, std::uint64_t seed, bool mention_position)
    : fidelity_(fidelity), seed_(seed), mention_position_(mention_position) {
    if (!(fidelity >= 0.0 && fidelity <= 1.0)) throw ParameterError("fidelity", "must lie in [0, 1]");
}

std::string SyntheticCaptioner::identifier() const {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "synthetic-v1-f%.3f-s%llu%s-greedy", fidelity_,
                  static_cast<unsigned long long>(seed_), mention_position_ ? "-pos" : "");
    return buf;
}

void SyntheticCaptioner::register_image(const std::string& image_digest, CaptionFactors factors) {
    factors_[image_digest] = std::move(factors);
}

namespace {

std::string with_article(const std::string& phrase) {
    const bool vowel = !phrase.empty() && std::string_view("aeiou").find(phrase.front()) != std::string_view::npos;
    return (vowel ? "an " : "a ") + phrase;
}

}  // namespace

std::string SyntheticCaptioner::compose(const CaptionFactors& revealed) {
    std::string text;
    if (!revealed.color.empty() && !revealed.shape.empty()) {
        text = with_article(revealed.color + " " + revealed.shape);
    } else if (!revealed.color.empty()) {
        text = with_article(revealed.color + " object");
    } else if (!revealed.shape.empty()) {
        text = with_article(revealed.shape);
    } else if (!revealed.position.empty()) {
        text = "an object";
    }
    if (!revealed.position.empty()) text += " in the " + revealed.position;
    return text;
}

CaptionFactors SyntheticCaptioner::reveal(const CaptionFactors& all, const std::string& image_digest) const {
    std::mt19937_64 rng(mix_seed(seed_, image_digest));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // Draw every mask bit unconditionally so the mask of one factor does not depend on another.
    const bool keep_shape = u(rng) < fidelity_;
    const bool keep_color = u(rng) < fidelity_;
    const bool keep_position = u(rng) < fidelity_;
    CaptionFactors out;
    if (keep_shape) out.shape = all.shape;
    if (keep_color) out.color = all.color;
    if (keep_position && mention_position_) out.position = all.position;
    return out;
}

std::string SyntheticCaptioner::describe(const ImageArray&, const std::string& image_digest) {
    const auto it = factors_.find(image_digest);
    if (it == factors_.end()) {
        throw CaptioningError(identifier(), image_digest, "image is not a registered toy scene");
    }
    return compose(reveal(it->second, image_digest));
}

// ---------------------------------------------------------------------------

std::string caption_file_name(const std::string& captioner_id) {
    std::string safe;
    for (char c : captioner_id) {
        const auto u = static_cast<unsigned char>(c);
        safe.push_back(std::isalnum(u) || c == '.' || c == '-' || c == '_' ? c : '_');
    }
    return "captions." + safe + ".jsonl";
}

void append_captions_jsonl(const std::filesystem::path& path, const std::vector<Caption>& captions) {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for appending");
    for (const auto& c : captions) {
        nlohmann::json j{{"image_digest", c.image_digest}, {"captioner_id", c.captioner_id}, {"text", c.text}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed on " + path.string());
}

std::map<std::string, Caption> read_captions_jsonl(const std::filesystem::path& path) {
    std::map<std::string, Caption> out;
    std::ifstream in(path, std::ios::binary);
    if (!in) return out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            Caption c{j.at("text").get<std::string>(), j.at("captioner_id").get<std::string>(),
                      j.at("image_digest").get<std::string>()};
            out[c.image_digest] = std::move(c);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace sare
