#include "sare/datasets.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/image_io.hpp"
#include "sare/parallel.hpp"
#include "sare/recon.hpp"

namespace sare::data {

namespace fs = std::filesystem;

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val" || s == "valid" || s == "validation") return Split::val;
    if (s == "test") return Split::test;
    throw ParameterError("split", "unknown split '" + s + "'");
}

std::map<std::string, ClassCounts> Manifest::class_counts_by_split() const {
    std::map<std::string, ClassCounts> out;
    for (const auto& e : entries) {
        auto& c = out[to_string(e.split)];
        (e.label == Label::fake ? c.fake : c.real)++;
    }
    return out;
}

std::vector<std::string> Manifest::subsets() const {
    std::vector<std::string> out;
    for (const auto& e : entries) {
        if (std::find(out.begin(), out.end(), e.subset) == out.end()) out.push_back(e.subset);
    }
    return out;
}

bool is_image_file(const fs::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

namespace {

std::vector<fs::path> sorted_children(const fs::path& dir, bool directories) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (directories ? e.is_directory() : (e.is_regular_file() || e.is_symlink())) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string now_iso8601() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Shared assembly for every layout adapter: dedup by resolved path and optional decode check.
class Assembler {
public:
    Assembler(const fs::path& root, std::string layout, const IngestOptions& options) : options_(options) {
        manifest_.source_root = fs::absolute(root).lexically_normal().string();
        manifest_.layout = std::move(layout);
        manifest_.ingested_at = now_iso8601();
    }

    void add_class_dir(const fs::path& dir, Label label, const std::string& subset, Split split) {
        std::size_t added = 0;
        for (const auto& file : sorted_children(dir, false)) {
            if (!is_image_file(file)) continue;
            std::error_code ec;
            const fs::path resolved = fs::canonical(file, ec);
            if (ec) {
                manifest_.quarantine.push_back(file.string() + ": unresolvable path");
                continue;
            }
            if (!seen_.insert(resolved.string()).second) continue;
            if (options_.validate) {
                try {
                    (void)read_image(resolved);
                } catch (const std::exception& e) {
                    manifest_.quarantine.push_back(resolved.string() + ": " + e.what());
                    continue;
                }
            }
            manifest_.entries.push_back(ManifestEntry{resolved.string(), label, subset, split, {}});
            ++added;
        }
        if (added == 0) {
            const std::string msg = "no images in " + dir.string();
            spdlog::warn("{}", msg);
            manifest_.warnings.push_back(msg);
        }
    }

    void unmatched(const fs::path& p) { unmatched_.push_back(p.string()); }

    Manifest finish() {
        if (!unmatched_.empty()) {
            throw IngestionError("directory tree does not match the " + manifest_.layout + " layout",
                                 std::move(unmatched_));
        }
        if (!manifest_.quarantine.empty()) {
            spdlog::warn("{} file(s) quarantined during ingestion", manifest_.quarantine.size());
        }
        return std::move(manifest_);
    }

private:
    IngestOptions options_;
    Manifest manifest_;
    std::set<std::string> seen_;
    std::vector<std::string> unmatched_;
};

std::optional<Split> try_split(const std::string& name) {
    try {
        return parse_split(name);
    } catch (const ParameterError&) {
        return std::nullopt;
    }
}

void require_dir(const fs::path& root) {
    if (!fs::is_directory(root)) throw IngestionError("not a directory: " + root.string(), {root.string()});
}

}  // namespace

Manifest ingest_genimage_layout(const fs::path& root, const IngestOptions& options) {
    require_dir(root);
    Assembler a(root, "genimage", options);
    for (const auto& subset_dir : sorted_children(root, true)) {
        const std::string subset = subset_dir.filename().string();
        for (const auto& split_dir : sorted_children(subset_dir, true)) {
            const auto split = try_split(split_dir.filename().string());
            if (!split) {
                a.unmatched(split_dir);
                continue;
            }
            for (const auto& class_dir : sorted_children(split_dir, true)) {
                const std::string cls = class_dir.filename().string();
                if (cls == "ai") {
                    a.add_class_dir(class_dir, Label::fake, subset, *split);
                } else if (cls == "nature") {
                    a.add_class_dir(class_dir, Label::real, subset, *split);
                } else {
                    a.unmatched(class_dir);
                }
            }
        }
    }
    return a.finish();
}

Manifest ingest_forensynths_layout(const fs::path& root, const IngestOptions& options) {
    require_dir(root);
    Assembler a(root, "forensynths", options);
    auto visit_class_parent = [&](const fs::path& dir, const std::string& subset) -> bool {
        bool any = false;
        for (const auto& class_dir : sorted_children(dir, true)) {
            const std::string cls = class_dir.filename().string();
            if (cls == "0_real") {
                a.add_class_dir(class_dir, Label::real, subset, Split::test);
                any = true;
            } else if (cls == "1_fake") {
                a.add_class_dir(class_dir, Label::fake, subset, Split::test);
                any = true;
            }
        }
        return any;
    };
    for (const auto& subset_dir : sorted_children(root, true)) {
        const std::string subset = subset_dir.filename().string();
        if (visit_class_parent(subset_dir, subset)) continue;
        bool any_category = false;
        for (const auto& category : sorted_children(subset_dir, true)) {
            if (visit_class_parent(category, subset)) {
                any_category = true;
            } else {
                a.unmatched(category);
            }
        }
        if (!any_category) a.unmatched(subset_dir);
    }
    return a.finish();
}

Manifest ingest_community_forensics_layout(const fs::path& root, const IngestOptions& options) {
    require_dir(root);
    Assembler a(root, "community_forensics", options);
    for (const auto& subset_dir : sorted_children(root, true)) {
        const std::string subset = subset_dir.filename().string();
        for (const auto& split_dir : sorted_children(subset_dir, true)) {
            const auto split = try_split(split_dir.filename().string());
            if (!split) {
                a.unmatched(split_dir);
                continue;
            }
            for (const auto& class_dir : sorted_children(split_dir, true)) {
                const std::string cls = class_dir.filename().string();
                if (cls == "fake") {
                    a.add_class_dir(class_dir, Label::fake, subset, *split);
                } else if (cls == "real") {
                    a.add_class_dir(class_dir, Label::real, subset, *split);
                } else {
                    a.unmatched(class_dir);
                }
            }
        }
    }
    return a.finish();
}

Manifest select(const Manifest& manifest, const std::vector<std::string>& subsets, const std::vector<Split>& splits) {
    Manifest out = manifest;
    out.entries.clear();
    for (const auto& e : manifest.entries) {
        const bool subset_ok = subsets.empty() || std::find(subsets.begin(), subsets.end(), e.subset) != subsets.end();
        const bool split_ok = splits.empty() || std::find(splits.begin(), splits.end(), e.split) != splits.end();
        if (subset_ok && split_ok) out.entries.push_back(e);
    }
    if (out.entries.empty()) {
        std::string what = "selection matched no entries (subsets:";
        for (const auto& s : subsets) what += " " + s;
        what += "; splits:";
        for (auto s : splits) what += " " + to_string(s);
        throw EmptySelectionError(what + ")");
    }
    return out;
}

void ensure_digests(Manifest& manifest, int workers) {
    parallel_for(manifest.entries.size(), workers, [&](std::size_t i) {
        auto& e = manifest.entries[i];
        if (e.digest.empty()) e.digest = sha256_file(e.path);
    });
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
    std::string body;
    for (const auto& e : manifest.entries) {
        const nlohmann::json j{{"path", e.path},
                               {"label", static_cast<int>(e.label)},
                               {"subset", e.subset},
                               {"split", to_string(e.split)},
                               {"digest", e.digest}};
        body += j.dump() + "\n";
    }
    atomic_write(path, body);

    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [split, c] : manifest.class_counts_by_split()) counts[split] = {{"real", c.real}, {"fake", c.fake}};
    const nlohmann::json meta{{"source_root", manifest.source_root}, {"layout", manifest.layout},
                              {"ingested_at", manifest.ingested_at}, {"class_counts", counts},
                              {"quarantine", manifest.quarantine},   {"warnings", manifest.warnings}};
    atomic_write(path.string() + ".meta.json", meta.dump(2) + "\n");
}

Manifest read_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest " + path.string());
    Manifest m;
    std::string line;
    std::size_t lineno = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestEntry e;
            e.path = j.at("path").get<std::string>();
            const int label = j.at("label").get<int>();
            if (label != 0 && label != 1) throw ParameterError("label", "must be 0 or 1");
            e.label = static_cast<Label>(label);
            e.subset = j.at("subset").get<std::string>();
            e.split = parse_split(j.at("split").get<std::string>());
            e.digest = j.value("digest", std::string());
            if (!seen.insert(e.path).second) throw IoError("duplicate path " + e.path);
            m.entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    const fs::path meta_path = path.string() + ".meta.json";
    if (std::ifstream meta_in(meta_path); meta_in) {
        try {
            const auto meta = nlohmann::json::parse(meta_in);
            m.source_root = meta.value("source_root", std::string());
            m.layout = meta.value("layout", std::string());
            m.ingested_at = meta.value("ingested_at", std::string());
            m.quarantine = meta.value("quarantine", std::vector<std::string>{});
            m.warnings = meta.value("warnings", std::vector<std::string>{});
        } catch (const nlohmann::json::exception&) {
            spdlog::warn("ignoring unreadable manifest metadata {}", meta_path.string());
        }
    }
    return m;
}

}  // namespace sare::data
