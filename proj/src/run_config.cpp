#include "sare/run_config.hpp"

#include <cstdlib>
#include <functional>
#include <map>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "sare/errors.hpp"
#include "sare/version.hpp"

namespace sare {

namespace {

template <class T>
T parse_value(const std::string& field, const std::string& text) {
    try {
        std::size_t used = 0;
        T v{};
        if constexpr (std::is_same_v<T, double>) {
            v = std::stod(text, &used);
        } else if constexpr (std::is_same_v<T, int>) {
            v = std::stoi(text, &used);
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
            v = std::stoll(text, &used);
        } else {
            v = std::stoull(text, &used);
        }
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ParameterError(field, "cannot parse '" + text + "'");
    }
}

bool parse_bool(const std::string& field, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ParameterError(field, "expected a boolean, got '" + text + "'");
}

}  // namespace

void RunConfig::apply_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ParameterError("config", "no such file: " + path.string());
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ParameterError("config", e.what());
    }
    using Setter = std::function<void(const std::string&, const std::string&)>;
    auto& a = train.augmentation;
    const std::map<std::string, Setter> setters{
        {"global.seed", [&](auto& f, auto& v) { seed = parse_value<std::uint64_t>(f, v); }},
        {"global.workers", [&](auto& f, auto& v) { workers = parse_value<int>(f, v); }},
        {"global.cache_dir", [&](auto&, auto& v) { cache_dir = v; }},
        {"recon.strength", [&](auto& f, auto& v) { recon.strength = parse_value<double>(f, v); }},
        {"recon.guidance_scale", [&](auto& f, auto& v) { recon.guidance_scale = parse_value<double>(f, v); }},
        {"recon.max_steps", [&](auto& f, auto& v) { recon.max_steps = parse_value<int>(f, v); }},
        {"recon.eta", [&](auto& f, auto& v) { recon.eta = parse_value<double>(f, v); }},
        {"recon.seed", [&](auto& f, auto& v) { recon.seed = parse_value<std::int64_t>(f, v); }},
        {"preprocess.long_side", [&](auto& f, auto& v) { preprocess.long_side = parse_value<int>(f, v); }},
        {"preprocess.multiple", [&](auto& f, auto& v) { preprocess.multiple = parse_value<int>(f, v); }},
        {"train.batch_size", [&](auto& f, auto& v) { train.batch_size = parse_value<int>(f, v); }},
        {"train.learning_rate", [&](auto& f, auto& v) { train.learning_rate = parse_value<double>(f, v); }},
        {"train.weight_decay", [&](auto& f, auto& v) { train.weight_decay = parse_value<double>(f, v); }},
        {"train.epochs", [&](auto& f, auto& v) { train.epochs = parse_value<int>(f, v); }},
        {"train.seed", [&](auto& f, auto& v) { train.seed = parse_value<std::uint64_t>(f, v); }},
        {"train.crop_size", [&](auto& f, auto& v) { a.crop_size = parse_value<int>(f, v); }},
        {"train.flip_p", [&](auto& f, auto& v) { a.flip_p = parse_value<double>(f, v); }},
        {"train.noise_p", [&](auto& f, auto& v) { a.noise_p = parse_value<double>(f, v); }},
        {"train.noise_sigma_max", [&](auto& f, auto& v) { a.noise_sigma_max = parse_value<double>(f, v); }},
        {"train.blur_p", [&](auto& f, auto& v) { a.blur_p = parse_value<double>(f, v); }},
        {"train.blur_sigma_max", [&](auto& f, auto& v) { a.blur_sigma_max = parse_value<double>(f, v); }},
        {"train.rotate_p", [&](auto& f, auto& v) { a.rotate_p = parse_value<double>(f, v); }},
        {"train.rotate_degrees", [&](auto& f, auto& v) { a.rotate_degrees = parse_value<double>(f, v); }},
        {"caption.fidelity", [&](auto& f, auto& v) { caption_fidelity = parse_value<double>(f, v); }},
        {"caption.seed", [&](auto& f, auto& v) { caption_seed = parse_value<std::uint64_t>(f, v); }},
        {"caption.mention_position", [&](auto& f, auto& v) { mention_position = parse_bool(f, v); }},
    };
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ParameterError("config", "key '" + section + "' is outside any section");
        for (const auto& [key, value] : body) {
            const std::string field = section + "." + key;
            const auto it = setters.find(field);
            if (it == setters.end()) throw ParameterError("config", "unknown key '" + field + "'");
            it->second(field, value.get_value<std::string>());
        }
    }
}

void RunConfig::validate() const {
    if (workers < 0) throw ParameterError("workers", "must be >= 0");
    recon.validate();
    if (preprocess.long_side < 1) throw ParameterError("long_side", "must be >= 1");
    if (preprocess.multiple < 1) throw ParameterError("multiple", "must be >= 1");
    train.validate();
    if (!(caption_fidelity >= 0.0 && caption_fidelity <= 1.0)) throw ParameterError("fidelity", "must lie in [0, 1]");
}

nlohmann::json RunConfig::to_json() const {
    return {{"global", {{"seed", seed}, {"workers", workers}, {"cache_dir", cache_dir}}},
            {"recon", recon.to_json()},
            {"preprocess", {{"long_side", preprocess.long_side}, {"multiple", preprocess.multiple}}},
            {"train", train.to_json()},
            {"caption", {{"fidelity", caption_fidelity}, {"seed", caption_seed}, {"mention_position", mention_position}}},
            {"toolkit_version", kToolkitVersion}};
}

std::string resolve_cache_dir(const std::string& explicit_dir) {
    if (!explicit_dir.empty()) return explicit_dir;
    if (const char* env = std::getenv("SARE_CACHE_DIR"); env && *env) return env;
    return "sare_cache";
}

}  // namespace sare
