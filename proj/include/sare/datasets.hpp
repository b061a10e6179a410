#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sare::data {

enum class Label { real = 0, fake = 1 };
enum class Split { train, val, test };

std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
    std::string path;
    Label label = Label::real;
    std::string subset;
    Split split = Split::train;
    std::string digest;  ///< file content hash; empty until computed

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct ClassCounts {
    std::size_t real = 0;
    std::size_t fake = 0;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::string source_root;
    std::string layout;
    std::string ingested_at;
    /// Files that failed to decode during validation, with the reason.
    std::vector<std::string> quarantine;
    std::vector<std::string> warnings;

    std::map<std::string, ClassCounts> class_counts_by_split() const;
    std::vector<std::string> subsets() const;
};

struct IngestOptions {
    /// Decode every file and quarantine the ones that fail.
    bool validate = true;
};

/// `<root>/<subset>/<split>/{ai,nature}/...`: ai -> fake, nature -> real.
Manifest ingest_genimage_layout(const std::filesystem::path& root, const IngestOptions& options = {});
/// `<root>/<subset>/[<category>/]{0_real,1_fake}/...`; every entry is a test-split entry.
Manifest ingest_forensynths_layout(const std::filesystem::path& root, const IngestOptions& options = {});
/// `<root>/<subset>/<split>/{real,fake}/...`.
Manifest ingest_community_forensics_layout(const std::filesystem::path& root, const IngestOptions& options = {});

/// Keeps entries whose subset is in `subsets` (all when empty) and whose split is in `splits`
/// (all when empty), preserving order. Throws EmptySelectionError when nothing matches.
Manifest select(const Manifest& manifest, const std::vector<std::string>& subsets, const std::vector<Split>& splits);

/// Computes missing file digests in place, hashing files on `workers` threads (0 = all cores).
void ensure_digests(Manifest& manifest, int workers = 1);

/// JSON-lines, one entry per line with fields path, label, subset, split, digest. Provenance,
/// quarantine and warnings go to `<path>.meta.json`.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

bool is_image_file(const std::filesystem::path& path);

}  // namespace sare::data
