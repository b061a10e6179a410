// Drives the built `sare` executable through every stage and checks exit codes and artifacts.
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "sare/image_io.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

Result run(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(SARE_BIN) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += line.empty() ? 0 : 1;
    return n;
}

fs::path only_file(const fs::path& dir, const std::string& prefix, const std::string& suffix) {
    fs::path found;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.starts_with(prefix) && name.ends_with(suffix)) {
            REQUIRE(found.empty());
            found = e.path();
        }
    }
    REQUIRE_FALSE(found.empty());
    return found;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
    sare::testing::TempDir dir("cli");
    const auto log = dir / "log.txt";
    CHECK(run("--version", log).code == 0);
    CHECK(run("--help", log).code == 0);
    CHECK(run("", log).code == 2);
    CHECK(run("frobnicate", log).code == 2);
    CHECK(run("caption --manifest nope.jsonl --out " + (dir / "c").string(), log).code == 2);
    CHECK(run("toy --scenario generate --strength 1.5 --out " + (dir / "t").string(), log).code == 2);
    CHECK(run("toy --scenario dream --out " + (dir / "t").string(), log).code == 2);
}

TEST_CASE("ingest a genimage tree") {
    sare::testing::TempDir dir("cli");
    const auto log = dir / "log.txt";
    for (const char* cls : {"ai", "nature"}) {
        fs::create_directories(dir / "gi" / "SDv1.4" / "train" / cls);
        sare::write_png(dir / "gi" / "SDv1.4" / "train" / cls / "0.png", sare::ImageArray(3, 8, 8, 0.5));
    }
    const auto r = run("ingest --layout genimage --root " + (dir / "gi").string() + " --out " + (dir / "m.jsonl").string(), log);
    CHECK(r.code == 0);
    CHECK(line_count(dir / "m.jsonl") == 2);
    std::ifstream in(dir / "m.jsonl");
    std::string line;
    std::getline(in, line);
    const auto first = nlohmann::json::parse(line);
    CHECK(first.at("digest").get<std::string>().size() == 64);

    fs::create_directories(dir / "gi" / "SDv1.4" / "train" / "other");
    CHECK(run("ingest --layout genimage --root " + (dir / "gi").string() + " --out " + (dir / "m2.jsonl").string(), log).code == 1);
    CHECK(run("ingest --layout imagenet --root " + (dir / "gi").string() + " --out " + (dir / "m2.jsonl").string(), log).code == 2);
}

TEST_CASE("toy data through caption, reconstruct, train, eval, ablate") {
    sare::testing::TempDir dir("cli");
    const auto log = dir / "log.txt";
    const std::string data = (dir / "data").string();
    const std::string manifest = (dir / "data" / "manifest.jsonl").string();
    const std::string cache = (dir / "cache").string();

    REQUIRE(run("toy --scenario generate --n-real 6 --n-fake 6 --seed 3 --out " + data, log).code == 0);
    CHECK(line_count(manifest) == 12);
    REQUIRE(run("toy --scenario denoiser --denoiser-scenes 16 --denoiser-epochs 1 --out " + (dir / "den").string(), log).code == 0);
    const std::string denoiser = (dir / "den" / "denoiser").string();
    CHECK(fs::exists(dir / "den" / "denoiser" / "model.json"));

    auto r = run("caption --manifest " + manifest + " --long-side 64 --multiple 8 --out " + (dir / "caps").string(), log);
    REQUIRE(r.code == 0);
    const fs::path captions = only_file(dir / "caps", "captions.", ".jsonl");
    CHECK(line_count(captions) == 12);
    CHECK(fs::exists(captions.string() + ".run.json"));
    // A second run skips every captioned image.
    r = run("caption --manifest " + manifest + " --long-side 64 --multiple 8 --out " + (dir / "caps").string(), log);
    CHECK(r.code == 0);
    CHECK(r.out.find("captioned 0 new") != std::string::npos);
    CHECK(line_count(captions) == 12);

    const std::string stage = " --manifest " + manifest + " --captions " + captions.string() + " --denoiser " + denoiser +
                              " --cache-dir " + cache + " --long-side 64 --multiple 8 --steps 10";
    r = run("reconstruct" + stage, log);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("misses 12") != std::string::npos);
    r = run("reconstruct" + stage, log);
    CHECK(r.code == 0);
    CHECK(r.out.find("cache hits 12") != std::string::npos);
    const auto run_json = nlohmann::json::parse(std::ifstream(dir / "cache" / "last_reconstruct.run.json"));
    CHECK(run_json.at("recon").at("max_steps") == 10);
    CHECK(run_json.contains("toolkit_version"));

    // Config file layering: the file sets strength and seed; a flag overrides the seed.
    std::ofstream(dir / "run.ini") << "[recon]\nstrength = 0.3\nseed = 5\n";
    r = run("reconstruct" + stage + " --config " + (dir / "run.ini").string() + " --recon-seed 6", log);
    CHECK(r.code == 0);
    const auto layered = nlohmann::json::parse(std::ifstream(dir / "cache" / "last_reconstruct.run.json"));
    CHECK(layered.at("recon").at("strength") == 0.3);
    CHECK(layered.at("recon").at("seed") == 6);
    std::ofstream(dir / "bad.ini") << "[recon]\nstrenght = 0.3\n";
    CHECK(run("reconstruct" + stage + " --config " + (dir / "bad.ini").string(), log).code == 2);

    r = run("eval" + stage + " --scorer mean-sare --offline --report " + (dir / "rep" / "report.json").string(), log);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "rep" / "report.md"));
    const auto report = nlohmann::json::parse(std::ifstream(dir / "rep" / "report.json"));
    CHECK(report.at("config").contains("run"));

    // Offline with an unseen seed: every reconstruction is missing.
    r = run("eval" + stage + " --scorer mean-sare --offline --recon-seed 99 --report " + (dir / "rep2" / "report.json").string(), log);
    CHECK(r.code == 1);
    CHECK(r.out.find("missing") != std::string::npos);

    r = run("train" + stage + " --spec toy --epochs 1 --batch-size 4 --out " + (dir / "det").string(), log);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "det" / "weights.bin"));
    CHECK(fs::exists(dir / "det" / "loss.csv"));
    r = run("eval" + stage + " --checkpoint " + (dir / "det").string() + " --offline --report " + (dir / "rep3" / "report.json").string(),
            log);
    CHECK(r.code == 0);

    r = run("ablate" + stage + " --scorer mean-sare --strength-grid 0.1,0.2 --guidance-grid 1,3 --out " + (dir / "abl").string(), log);
    CHECK(r.code == 0);
    CHECK(line_count(dir / "abl" / "ablation.csv") == 5);
    CHECK(fs::exists(dir / "abl" / "run.json"));

    // A caption file missing some images stops reconstruction with a stage failure.
    {
        std::ifstream in(captions);
        std::string first;
        std::getline(in, first);
        std::ofstream(dir / "partial.jsonl") << first << "\n";
    }
    const std::string partial = " --manifest " + manifest + " --captions " + (dir / "partial.jsonl").string() + " --denoiser " +
                                denoiser + " --cache-dir " + (dir / "cache2").string() + " --long-side 64 --steps 10";
    CHECK(run("reconstruct" + partial, log).code == 1);
}
