#include <doctest.h>

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "sare/datasets.hpp"
#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/image_io.hpp"

using namespace sare;
using namespace sare::data;
namespace fs = std::filesystem;

namespace {

void put_image(const fs::path& p, std::uint64_t seed) {
    fs::create_directories(p.parent_path());
    write_png(p, sare::testing::random_array<ImageTag>({3, 8, 8}, seed, 0.0, 1.0));
}

// <root>/{SDv1.4,ADM}/{train,val}/{ai,nature}/{0,1}.png
fs::path genimage_fixture(const fs::path& root) {
    std::uint64_t seed = 0;
    for (const char* subset : {"SDv1.4", "ADM"}) {
        for (const char* split : {"train", "val"}) {
            for (const char* cls : {"ai", "nature"}) {
                for (int i = 0; i < 2; ++i) put_image(root / subset / split / cls / (std::to_string(i) + ".png"), ++seed);
            }
        }
    }
    return root;
}

std::size_t count_label(const Manifest& m, Label l) {
    return static_cast<std::size_t>(std::count_if(m.entries.begin(), m.entries.end(), [&](const ManifestEntry& e) { return e.label == l; }));
}

}  // namespace

TEST_CASE("genimage layout: labels, subsets, splits") {
    sare::testing::TempDir dir("ds");
    const auto root = genimage_fixture(dir / "gi");
    const auto m = ingest_genimage_layout(root);
    CHECK(m.entries.size() == 16);
    CHECK(count_label(m, Label::fake) == 8);
    CHECK(m.layout == "genimage");
    CHECK(m.quarantine.empty());
    CHECK(m.warnings.empty());
    for (const auto& e : m.entries) {
        CHECK(fs::exists(e.path));
        const bool in_ai = e.path.find("/ai/") != std::string::npos;
        CHECK((e.label == Label::fake) == in_ai);
        CHECK(e.path.find("/" + e.subset + "/" + to_string(e.split) + "/") != std::string::npos);
    }
    CHECK(m.subsets() == std::vector<std::string>{"ADM", "SDv1.4"});
    const auto counts = m.class_counts_by_split();
    CHECK(counts.at("train").real == 4);
    CHECK(counts.at("train").fake == 4);
    CHECK(counts.at("val").fake == 4);

    // Two subsets with two images each, one split.
    sare::testing::TempDir d2("ds2");
    for (const char* subset : {"A", "B"}) {
        for (const char* cls : {"ai", "nature"}) {
            for (int i = 0; i < 2; ++i) put_image(d2 / subset / "train" / cls / (std::to_string(i) + ".png"), 1);
        }
    }
    CHECK(ingest_genimage_layout(d2.path()).entries.size() == 8);
}

TEST_CASE("ingestion is idempotent modulo timestamp") {
    sare::testing::TempDir dir("ds");
    const auto root = genimage_fixture(dir / "gi");
    const auto a = ingest_genimage_layout(root);
    const auto b = ingest_genimage_layout(root);
    CHECK(a.entries == b.entries);
    CHECK(a.source_root == b.source_root);
}

TEST_CASE("empty class directory warns, symlinks dedupe, unmatched dirs fail") {
    sare::testing::TempDir dir("ds");
    const auto root = genimage_fixture(dir / "gi");
    fs::remove_all(root / "ADM" / "val" / "nature");
    fs::create_directories(root / "ADM" / "val" / "nature");
    auto m = ingest_genimage_layout(root);
    CHECK(m.entries.size() == 14);
    REQUIRE(m.warnings.size() == 1);
    CHECK(m.warnings[0].find("nature") != std::string::npos);

    fs::create_symlink(root / "ADM" / "train" / "ai" / "0.png", root / "ADM" / "train" / "ai" / "link.png");
    m = ingest_genimage_layout(root);
    CHECK(m.entries.size() == 14);

    fs::create_directories(root / "ADM" / "train" / "other");
    fs::create_directories(root / "ADM" / "holdout");
    try {
        ingest_genimage_layout(root);
        FAIL("expected IngestionError");
    } catch (const IngestionError& e) {
        CHECK(e.unmatched().size() == 2);
    }
    CHECK_THROWS_AS(ingest_genimage_layout(dir / "missing"), IngestionError);
}

TEST_CASE("undecodable files are quarantined, not dropped silently") {
    sare::testing::TempDir dir("ds");
    const auto root = genimage_fixture(dir / "gi");
    std::ofstream(root / "ADM" / "train" / "ai" / "bad.png") << "not a png";
    std::ofstream(root / "ADM" / "train" / "ai" / "notes.txt") << "ignored";
    const auto m = ingest_genimage_layout(root);
    CHECK(m.entries.size() == 16);
    REQUIRE(m.quarantine.size() == 1);
    CHECK(m.quarantine[0].find("bad.png") != std::string::npos);

    const auto unchecked = ingest_genimage_layout(root, IngestOptions{false});
    CHECK(unchecked.entries.size() == 17);
    CHECK(unchecked.quarantine.empty());
}

TEST_CASE("forensynths and community layouts") {
    sare::testing::TempDir dir("ds");
    put_image(dir / "fs" / "biggan" / "0_real" / "a.png", 1);
    put_image(dir / "fs" / "biggan" / "1_fake" / "a.png", 2);
    put_image(dir / "fs" / "progan" / "car" / "0_real" / "a.png", 3);
    put_image(dir / "fs" / "progan" / "car" / "1_fake" / "a.png", 4);
    put_image(dir / "fs" / "progan" / "cat" / "1_fake" / "a.png", 5);
    const auto f = ingest_forensynths_layout(dir / "fs");
    CHECK(f.entries.size() == 5);
    CHECK(count_label(f, Label::fake) == 3);
    for (const auto& e : f.entries) CHECK(e.split == Split::test);
    CHECK(f.subsets() == std::vector<std::string>{"biggan", "progan"});

    put_image(dir / "cf" / "gen1" / "train" / "real" / "a.png", 6);
    put_image(dir / "cf" / "gen1" / "test" / "fake" / "a.png", 7);
    put_image(dir / "cf" / "gen2" / "test" / "fake" / "a.png", 8);
    const auto c = ingest_community_forensics_layout(dir / "cf");
    CHECK(c.entries.size() == 3);
    CHECK(count_label(c, Label::real) == 1);
    CHECK(c.entries[0].split == Split::test);

    fs::create_directories(dir / "cf" / "gen2" / "test" / "mixed");
    CHECK_THROWS_AS(ingest_community_forensics_layout(dir / "cf"), IngestionError);
}

TEST_CASE("select filters, errors and commutes") {
    sare::testing::TempDir dir("ds");
    const auto m = ingest_genimage_layout(genimage_fixture(dir / "gi"));
    const auto sd_train = select(m, {"SDv1.4"}, {Split::train});
    CHECK(sd_train.entries.size() == 4);
    for (const auto& e : sd_train.entries) {
        CHECK(e.subset == "SDv1.4");
        CHECK(e.split == Split::train);
    }
    // Order preserved.
    std::vector<ManifestEntry> expected;
    for (const auto& e : m.entries) {
        if (e.subset == "SDv1.4" && e.split == Split::train) expected.push_back(e);
    }
    CHECK(sd_train.entries == expected);

    CHECK_THROWS_AS(select(m, {"Midjourney"}, {}), EmptySelectionError);
    CHECK_THROWS_AS(select(m, {}, {Split::test}), EmptySelectionError);

    const auto ab = select(select(m, {"ADM"}, {}), {}, {Split::val});
    const auto ba = select(select(m, {}, {Split::val}), {"ADM"}, {});
    CHECK(ab.entries == ba.entries);
    CHECK(select(m, {}, {}).entries == m.entries);
}

TEST_CASE("manifest JSONL round trip with digests") {
    sare::testing::TempDir dir("ds");
    auto m = ingest_genimage_layout(genimage_fixture(dir / "gi"));
    ensure_digests(m, 2);
    for (const auto& e : m.entries) CHECK(e.digest == sha256_file(e.path));
    write_manifest(dir / "manifest.jsonl", m);
    CHECK(fs::exists(dir / "manifest.jsonl.meta.json"));

    std::ifstream in(dir / "manifest.jsonl");
    std::string first;
    std::getline(in, first);
    const auto j = nlohmann::json::parse(first);
    std::vector<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    CHECK(keys == std::vector<std::string>{"digest", "label", "path", "split", "subset"});

    const auto back = read_manifest(dir / "manifest.jsonl");
    CHECK(back.entries == m.entries);
    CHECK(back.layout == "genimage");
    CHECK(back.ingested_at == m.ingested_at);

    std::ofstream(dir / "dup.jsonl") << first << "\n" << first << "\n";
    CHECK_THROWS_AS(read_manifest(dir / "dup.jsonl"), IoError);
    CHECK_THROWS_AS(read_manifest(dir / "absent.jsonl"), IoError);
    CHECK(parse_split("val") == Split::val);
    CHECK_THROWS_AS(parse_split("holdout"), ParameterError);
}
