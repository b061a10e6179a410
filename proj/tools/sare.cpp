// sare: batch command-line front end. Exit codes: 0 success, 1 stage failure, 2 usage error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "sare/conditioning.hpp"
#include "sare/datasets.hpp"
#include "sare/detector.hpp"
#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/evalkit.hpp"
#include "sare/image_io.hpp"
#include "sare/parallel.hpp"
#include "sare/recon.hpp"
#include "sare/run_config.hpp"
#include "sare/sare_map.hpp"
#include "sare/toy_pipeline.hpp"
#include "sare/toyworld.hpp"
#include "sare/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sare;

namespace {

constexpr int kStageFailure = 1;
constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flags are bound into `flags`; merge() replays only the ones given on the command line on top of
// defaults plus the config file.
struct Layered {
    RunConfig flags;
    std::string config_path;
    std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&, RunConfig&)>>> overrides;

    template <class Access>
    CLI::Option* add(CLI::App* app, const std::string& name, Access access, const std::string& help) {
        CLI::Option* opt = app->add_option(name, access(flags), help)->capture_default_str();
        overrides.emplace_back(opt, [access](RunConfig& dst, RunConfig& src) { access(dst) = access(src); });
        return opt;
    }

    RunConfig merge() {
        RunConfig c;
        if (!config_path.empty()) c.apply_file(config_path);
        for (auto& [opt, copy] : overrides) {
            if (opt->count() > 0) copy(c, flags);
        }
        c.cache_dir = resolve_cache_dir(c.cache_dir);
        c.validate();
        return c;
    }
};

void add_common(CLI::App* app, Layered& L) {
    app->add_option("--config", L.config_path, "INI config file; flags override it");
    L.add(app, "--seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }, "global seed");
    L.add(app, "--workers", [](RunConfig& c) -> int& { return c.workers; }, "worker threads (0 = all cores)");
}

void add_cache(CLI::App* app, Layered& L) {
    L.add(app, "--cache-dir", [](RunConfig& c) -> std::string& { return c.cache_dir; },
          "reconstruction cache (default $SARE_CACHE_DIR)");
}

void add_preprocess(CLI::App* app, Layered& L) {
    L.add(app, "--long-side", [](RunConfig& c) -> int& { return c.preprocess.long_side; }, "resize target, longer side");
    L.add(app, "--multiple", [](RunConfig& c) -> int& { return c.preprocess.multiple; }, "round sizes to this multiple");
}

void add_recon(CLI::App* app, Layered& L) {
    L.add(app, "--strength", [](RunConfig& c) -> double& { return c.recon.strength; }, "noising strength")
        ->check(CLI::Range(0.0, 1.0));
    L.add(app, "--guidance", [](RunConfig& c) -> double& { return c.recon.guidance_scale; }, "guidance scale");
    L.add(app, "--steps", [](RunConfig& c) -> int& { return c.recon.max_steps; }, "sampler steps")
        ->check(CLI::PositiveNumber);
    L.add(app, "--eta", [](RunConfig& c) -> double& { return c.recon.eta; }, "DDIM eta");
    L.add(app, "--recon-seed", [](RunConfig& c) -> std::int64_t& { return c.recon.seed; }, "reconstruction seed");
}

data::Manifest load_manifest(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("manifest not found: " + path);
    return data::read_manifest(path);
}

void write_run_json(const fs::path& path, const RunConfig& run, const std::string& command) {
    json j = run.to_json();
    j["command"] = command;
    atomic_write(path, j.dump(2) + "\n");
}

std::unique_ptr<LatentCodec> make_codec(const std::string& name) {
    if (name == "identity") return std::make_unique<IdentityCodec>();
    if (name == "avgpool2") return std::make_unique<AvgPoolCodec>(2);
    throw UsageError("unknown codec '" + name + "' (expected identity or avgpool2)");
}

/// Serves captions from a caption file; an image without one is a CaptioningError.
class CaptionFileBackend final : public CaptionerBackend {
public:
    explicit CaptionFileBackend(std::string id) : id_(std::move(id)) {}
    std::string identifier() const override { return id_; }
    std::string describe(const ImageArray&, const std::string& digest) override {
        throw CaptioningError(id_, digest, "no caption in the caption file");
    }

private:
    std::string id_;
};

std::map<std::string, Caption> load_captions(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("caption file not found: " + path);
    return read_captions_jsonl(path);
}

/// Denoiser, codec, encoder and caption source shared by every stage that touches the cache.
struct StageBackends {
    toy::ToyDenoiser denoiser;
    std::unique_ptr<LatentCodec> codec;
    HashTextEncoder encoder;
    std::map<std::string, Caption> captions;
    CaptionFileBackend captioner{"caption-file"};

    StageBackends(const std::string& denoiser_dir, const std::string& codec_name, const std::string& caption_path)
        : denoiser(load_denoiser(denoiser_dir)), codec(make_codec(codec_name)), captions(load_captions(caption_path)) {}

    eval::PipelineBackends pipeline() { return {captioner, ReconBackends{*codec, denoiser, encoder}}; }

    static toy::ToyDenoiser load_denoiser(const std::string& dir) {
        if (!fs::exists(dir)) throw UsageError("denoiser checkpoint not found: " + dir);
        return toy::ToyDenoiser::load(dir);
    }
};

struct StagePaths {
    std::string manifest;
    std::string captions;
    std::string denoiser;
    std::string codec = "identity";
};

void add_stage_inputs(CLI::App* app, StagePaths& p) {
    app->add_option("--manifest", p.manifest, "manifest JSONL")->required();
    app->add_option("--captions", p.captions, "caption JSONL from the caption stage")->required();
    app->add_option("--denoiser", p.denoiser, "denoiser checkpoint directory")->required();
    app->add_option("--codec", p.codec, "latent codec: identity or avgpool2")->capture_default_str();
}

// ---------------------------------------------------------------------------

struct IngestArgs {
    std::string layout;
    std::string root;
    std::string out;
    bool no_validate = false;
};

int cmd_ingest(const IngestArgs& a, Layered& L) {
    const RunConfig run = L.merge();
    if (!fs::is_directory(a.root)) throw UsageError("dataset root not found: " + a.root);
    data::IngestOptions opt;
    opt.validate = !a.no_validate;
    data::Manifest m;
    if (a.layout == "genimage") {
        m = data::ingest_genimage_layout(a.root, opt);
    } else if (a.layout == "forensynths") {
        m = data::ingest_forensynths_layout(a.root, opt);
    } else if (a.layout == "community") {
        m = data::ingest_community_forensics_layout(a.root, opt);
    } else {
        throw UsageError("unknown layout '" + a.layout + "' (expected genimage, forensynths or community)");
    }
    data::ensure_digests(m, run.workers);
    data::write_manifest(a.out, m);
    std::cout << "ingested " << m.entries.size() << " entries, " << m.quarantine.size() << " quarantined, "
              << m.warnings.size() << " warnings -> " << a.out << "\n";
    for (const auto& [split, counts] : m.class_counts_by_split()) {
        std::cout << "  " << split << ": " << counts.real << " real, " << counts.fake << " fake\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct CaptionArgs {
    std::string manifest;
    std::string backend = "synthetic";
    std::string out;
    std::string toy_dataset;
};

int cmd_caption(const CaptionArgs& a, Layered& L) {
    const RunConfig run = L.merge();
    const data::Manifest m = load_manifest(a.manifest);
    if (a.backend != "synthetic") throw UsageError("unknown caption backend '" + a.backend + "' (available: synthetic)");

    SyntheticCaptioner captioner(run.caption_fidelity, run.caption_seed, run.mention_position);
    const fs::path scenes_dir = a.toy_dataset.empty() ? fs::path(a.manifest).parent_path() : fs::path(a.toy_dataset);
    if (!fs::exists(scenes_dir / "scenes.jsonl")) throw UsageError("no toy scene file in " + scenes_dir.string());
    for (const auto& item : toy::read_dataset(scenes_dir).items) {
        captioner.register_image(image_digest(preprocess_for_recon(item.image, run.preprocess)),
                                 item.factors.caption_factors());
    }

    const fs::path out_file = fs::path(a.out) / caption_file_name(captioner.identifier());
    fs::create_directories(a.out);
    const auto existing = read_captions_jsonl(out_file);

    const std::size_t n = m.entries.size();
    std::vector<std::optional<Caption>> fresh(n);
    std::vector<std::string> failures(n);
    std::vector<char> skipped(n, 0);
    parallel_for(n, run.workers, [&](std::size_t i) {
        const auto& e = m.entries[i];
        try {
            const ImageArray img = preprocess_for_recon(read_image(e.path), run.preprocess);
            if (existing.count(image_digest(img))) {
                skipped[i] = 1;
                return;
            }
            fresh[i] = generate_caption(img, captioner);
        } catch (const std::exception& ex) {
            failures[i] = e.path + ": " + ex.what();
        }
    });

    std::vector<Caption> batch;
    std::set<std::string> seen;
    std::size_t n_skipped = 0;
    for (std::size_t i = 0; i < n; ++i) {
        n_skipped += skipped[i];
        if (fresh[i] && seen.insert(fresh[i]->image_digest).second) batch.push_back(*fresh[i]);
    }
    append_captions_jsonl(out_file, batch);
    write_run_json(out_file.string() + ".run.json", run, "caption");

    std::size_t n_failed = 0;
    for (const auto& f : failures) {
        if (f.empty()) continue;
        if (n_failed++ == 0) std::cerr << "caption failures:\n";
        std::cerr << "  " << f << "\n";
    }
    std::cout << "captioned " << batch.size() << " new, skipped " << n_skipped << " already captioned, failed "
              << n_failed << " -> " << out_file.string() << "\n";
    return n_failed == 0 ? 0 : kStageFailure;
}

// ---------------------------------------------------------------------------

int cmd_reconstruct(const StagePaths& p, Layered& L) {
    const RunConfig run = L.merge();
    const data::Manifest m = load_manifest(p.manifest);
    StageBackends b(p.denoiser, p.codec, p.captions);
    auto backends = b.pipeline();
    const ReconstructionCache cache(run.cache_dir);
    eval::EvalOptions opt;
    opt.preprocess = run.preprocess;
    opt.captions = &b.captions;

    const std::size_t n = m.entries.size();
    std::vector<CacheStats> stats(n);
    std::vector<std::string> missing(n), failures(n);
    parallel_for(n, run.workers, [&](std::size_t i) {
        try {
            eval::run_pipeline(m.entries[i], backends, run.recon, cache, opt, &stats[i]);
        } catch (const CaptioningError&) {
            missing[i] = m.entries[i].path;
        } catch (const std::exception& ex) {
            failures[i] = m.entries[i].path + ": " + ex.what();
        }
    });
    CacheStats total;
    std::size_t n_missing = 0, n_failed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total.hits += stats[i].hits;
        total.misses += stats[i].misses;
        if (!missing[i].empty() && n_missing++ == 0) std::cerr << "missing captions (skipped):\n";
        if (!missing[i].empty()) std::cerr << "  " << missing[i] << "\n";
    }
    for (const auto& f : failures) {
        if (!f.empty() && n_failed++ == 0) std::cerr << "reconstruction failures:\n";
        if (!f.empty()) std::cerr << "  " << f << "\n";
    }
    write_run_json(fs::path(run.cache_dir) / "last_reconstruct.run.json", run, "reconstruct");
    std::cout << "cache hits " << total.hits << ", misses " << total.misses << ", skipped " << n_missing
              << ", failed " << n_failed << "\n";
    return n_missing + n_failed == 0 ? 0 : kStageFailure;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    StagePaths paths;
    std::string out;
    std::string spec = "full";
    bool offline = false;
};

int cmd_train(const TrainArgs& a, Layered& L) {
    RunConfig run = L.merge();
    const data::Manifest m = load_manifest(a.paths.manifest);
    if (a.spec != "full" && a.spec != "toy") throw UsageError("unknown detector spec '" + a.spec + "' (expected full or toy)");
    const detect::DetectorSpec spec = a.spec == "toy" ? detect::DetectorSpec::toy() : detect::DetectorSpec{};
    if (run.train.augmentation.crop_size != spec.input_size) throw UsageError("train.crop_size must equal the detector input size");

    StageBackends b(a.paths.denoiser, a.paths.codec, a.paths.captions);
    auto backends = b.pipeline();
    const ReconstructionCache cache(run.cache_dir);
    eval::EvalOptions opt;
    opt.preprocess = run.preprocess;
    opt.captions = &b.captions;
    opt.offline = a.offline;

    std::vector<detect::LabeledSample> samples(m.entries.size());
    parallel_for(samples.size(), run.workers, [&](std::size_t i) {
        const auto& e = m.entries[i];
        const eval::PipelineSample p = eval::run_pipeline(e, backends, run.recon, cache, opt);
        auto [img, s] = detect::to_canvas(p.image, p.sare);
        samples[i] = detect::LabeledSample{std::move(img), std::move(s), static_cast<int>(e.label)};
    });
    run.train.workers = run.workers;
    if (run.train.seed == 0) run.train.seed = run.seed;
    const detect::TrainResult r = detect::train_detector(samples, run.train, detect::DetectorModel(spec, run.seed));
    json training = run.to_json();
    training["recon"] = with_backend_ids(run.recon, backends.recon, "caption-file").to_json();
    r.model.save(a.out, training);
    detect::write_loss_csv(fs::path(a.out) / "loss.csv", r.steps);
    std::cout << "trained " << r.epoch_loss.size() << " epochs on " << samples.size() << " samples, final loss "
              << r.epoch_loss.back() << " -> " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    StagePaths paths;
    std::string checkpoint;
    std::string scorer = "detector";
    std::string report = "report.json";
    bool offline = false;
};

std::unique_ptr<detect::DetectorModel> load_checkpoint(const std::string& scorer, const std::string& dir) {
    if (scorer == "mean-sare") return nullptr;
    if (scorer != "detector") throw UsageError("unknown scorer '" + scorer + "' (expected detector or mean-sare)");
    if (dir.empty()) throw UsageError("--checkpoint is required for the detector scorer");
    if (!fs::exists(dir)) throw UsageError("checkpoint not found: " + dir);
    return std::make_unique<detect::DetectorModel>(detect::DetectorModel::load(dir));
}

std::unique_ptr<eval::SampleScorer> make_scorer(const detect::DetectorModel* model, const std::string& checkpoint) {
    if (!model) return std::make_unique<eval::MeanSareScorer>();
    return std::make_unique<eval::DetectorScorer>(*model, fs::path(checkpoint).filename().string());
}

int cmd_eval(const EvalArgs& a, Layered& L) {
    const RunConfig run = L.merge();
    const data::Manifest m = load_manifest(a.paths.manifest);
    const auto model = load_checkpoint(a.scorer, a.checkpoint);
    StageBackends b(a.paths.denoiser, a.paths.codec, a.paths.captions);
    auto backends = b.pipeline();
    const ReconstructionCache cache(run.cache_dir);
    eval::EvalOptions opt;
    opt.preprocess = run.preprocess;
    opt.captions = &b.captions;
    opt.offline = a.offline;
    opt.workers = run.workers;

    const auto scorer = make_scorer(model.get(), a.checkpoint);
    eval::EvalReport report = eval::evaluate(*scorer, m, backends, run.recon, cache, opt);
    report.config["run"] = run.to_json();
    report.write(a.report);
    std::cout << report.to_markdown();
    return 0;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
    StagePaths paths;
    std::string checkpoint;
    std::string scorer = "mean-sare";
    std::vector<double> strengths = eval::default_strength_grid();
    std::vector<double> guidances = eval::default_guidance_grid();
    std::string out = "ablation";
};

int cmd_ablate(const AblateArgs& a, Layered& L) {
    const RunConfig run = L.merge();
    const data::Manifest m = load_manifest(a.paths.manifest);
    for (double s : a.strengths) {
        if (!(s > 0.0 && s <= 1.0)) throw UsageError("strength grid value out of (0, 1]: " + std::to_string(s));
    }
    const auto model = load_checkpoint(a.scorer, a.checkpoint);
    StageBackends b(a.paths.denoiser, a.paths.codec, a.paths.captions);
    auto backends = b.pipeline();
    const ReconstructionCache cache(run.cache_dir);
    eval::AblationOptions opt;
    opt.eval.preprocess = run.preprocess;
    opt.eval.captions = &b.captions;
    opt.eval.workers = run.workers;

    const auto factory = [&](const ReconstructionConfig&) { return make_scorer(model.get(), a.checkpoint); };
    const auto cells = eval::ablation_grid(a.strengths, a.guidances, run.recon, m, backends, cache, factory, opt);
    eval::write_ablation_outputs(a.out, cells, m.subsets());
    write_run_json(fs::path(a.out) / "run.json", run, "ablate");
    std::size_t failed = 0;
    for (const auto& c : cells) failed += c.ok() ? 0 : 1;
    std::cout << cells.size() - failed << "/" << cells.size() << " cells ok -> " << a.out << "\n";
    return failed == 0 ? 0 : kStageFailure;
}

// ---------------------------------------------------------------------------

struct ToyArgs {
    std::string scenario = "separability";
    std::string out = "toy_run";
    std::string denoiser;
    int n_real = 200;
    int n_fake = 200;
    int denoiser_scenes = 500;
    int denoiser_epochs = 20;
    double fidelity = 1.0;
    double strength = 0.5;
    double guidance = 3.0;
};

void print_check(bool ok, const std::string& what) { std::cout << (ok ? "PASS " : "FAIL ") << what << "\n"; }

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

toy::ToyDenoiser toy_denoiser(const ToyArgs& a, std::uint64_t seed) {
    if (!a.denoiser.empty()) return StageBackends::load_denoiser(a.denoiser);
    const toy::ToyDataset scenes = toy::make_dataset(0, a.denoiser_scenes, 1.0, derive_seed(seed, 1));
    toy::ToyTrainOptions opt;
    opt.epochs = a.denoiser_epochs;
    opt.seed = derive_seed(seed, 4);
    auto r = toy::train_toy_denoiser(scenes.items, HashTextEncoder{}, default_schedule(), opt);
    r.model.save(fs::path(a.out) / "denoiser");
    return std::move(r.model);
}

int cmd_toy(const ToyArgs& a, Layered& L) {
    const RunConfig run = L.merge();
    fs::create_directories(a.out);
    write_run_json(fs::path(a.out) / "run.json", run, "toy " + a.scenario);

    if (a.scenario == "generate") {
        toy::DatasetOptions dopt;
        dopt.caption_seed = run.caption_seed;
        dopt.mention_position = run.mention_position;
        const auto ds = toy::make_dataset(a.n_real, a.n_fake, a.fidelity, run.seed, dopt);
        const auto m = toy::write_dataset(a.out, ds);
        std::cout << "wrote " << m.entries.size() << " scenes -> " << a.out << "\n";
        return 0;
    }
    if (a.scenario == "denoiser") {
        const toy::ToyDenoiser d = toy_denoiser(a, run.seed);
        std::cout << "denoiser " << d.identifier() << " -> " << (fs::path(a.out) / "denoiser").string() << "\n";
        return 0;
    }
    if (a.scenario == "separability") {
        toy::ToyPipelineOptions o;
        o.work_dir = a.out;
        o.seed = run.seed;
        o.fidelity = a.fidelity;
        o.denoiser_scenes = a.denoiser_scenes;
        o.denoiser.epochs = a.denoiser_epochs;
        o.test_per_class = a.n_real;
        o.strength = a.strength;
        o.guidance_scale = a.guidance;
        o.max_steps = run.recon.max_steps;
        o.workers = run.workers;
        const auto r = toy::run_toy_pipeline(o);
        const double sare_auc = r.mean_sare_report.avg_auc.value_or(0.0);
        const double det_acc = r.detector_report.avg_acc;
        const double cpu_min = r.cpu_seconds / 60.0;
        print_check(sare_auc >= 0.9, "mean-SARE AUC " + fmt(sare_auc) + " >= 0.9");
        print_check(det_acc >= 0.9, "detector ACC " + fmt(det_acc) + " >= 0.9");
        print_check(cpu_min <= 15.0, "pipeline CPU minutes " + fmt(cpu_min) + " <= 15");
        return sare_auc >= 0.9 && det_acc >= 0.9 && cpu_min <= 15.0 ? 0 : kStageFailure;
    }
    if (a.scenario == "ablation" || a.scenario == "fidelity") {
        toy::ToyDenoiser d = toy_denoiser(a, run.seed);
        IdentityCodec codec;
        HashTextEncoder encoder;
        const ReconBackends recon{codec, d, encoder};
        const ReconstructionCache cache(fs::path(a.out) / "cache");
        ReconstructionConfig cfg = run.recon;
        cfg.strength = a.strength;
        cfg.guidance_scale = a.guidance;
        if (a.scenario == "fidelity") {
            const auto test = toy::make_dataset(a.n_real, a.n_fake, 1.0, derive_seed(run.seed, 3));
            const auto sweep = toy::fidelity_sweep(test, recon, cfg, cache, {1.0, 0.5, 0.0}, run.seed, run.workers);
            bool ok = true;
            for (std::size_t i = 0; i < sweep.points.size(); ++i) {
                const auto& p = sweep.points[i];
                std::cout << "fidelity " << fmt(p.fidelity) << " AUC " << fmt(p.auc) << " +- " << fmt(p.auc_se) << "\n";
                if (i > 0) {
                    const auto& q = sweep.points[i - 1];
                    const bool mono = p.auc <= q.auc + 2.0 * std::hypot(p.auc_se, q.auc_se);
                    print_check(mono, "AUC nonincreasing from fidelity " + fmt(q.fidelity) + " to " + fmt(p.fidelity));
                    ok = ok && mono;
                }
            }
            const auto& zero = sweep.points.back();
            const double gap = std::abs(zero.auc - sweep.control.auc);
            const bool compat = gap <= 2.0 * std::hypot(zero.auc_se, sweep.control.auc_se);
            print_check(compat, "fidelity 0 AUC " + fmt(zero.auc) + " compatible with no-caption control " +
                                    fmt(sweep.control.auc));
            return ok && compat ? 0 : kStageFailure;
        }
        toy::DatasetOptions dopt;
        dopt.caption_seed = run.seed;
        const auto test = toy::make_dataset(a.n_real, a.n_fake, a.fidelity, derive_seed(run.seed, 3), dopt);
        const data::Manifest m = toy::write_dataset(fs::path(a.out) / "test", test);
        SyntheticCaptioner captioner(a.fidelity, run.seed);
        toy::register_dataset(captioner, test);
        eval::PipelineBackends backends{captioner, recon};
        eval::AblationOptions opt;
        opt.eval.preprocess = toy::toy_preprocess(test.items.front().image.height());
        opt.eval.workers = run.workers;
        const auto cells = eval::ablation_grid(eval::default_strength_grid(), {cfg.guidance_scale}, cfg, m, backends, cache,
                                               [](const ReconstructionConfig&) { return std::make_unique<eval::MeanSareScorer>(); },
                                               opt);
        eval::write_ablation_outputs(a.out, cells, m.subsets());
        double lo = 1.0, hi = 0.0;
        bool all_ok = true;
        for (const auto& c : cells) {
            all_ok = all_ok && c.ok() && c.report->avg_auc;
            if (!c.ok() || !c.report->avg_auc) continue;
            lo = std::min(lo, *c.report->avg_auc);
            hi = std::max(hi, *c.report->avg_auc);
            std::cout << "strength " << fmt(c.strength) << " AUC " << fmt(*c.report->avg_auc) << "\n";
        }
        print_check(all_ok, "every ablation cell produced a report");
        print_check(hi - lo <= 0.15, "AUC spread " + fmt(hi - lo) + " <= 0.15");
        return all_ok && hi - lo <= 0.15 ? 0 : kStageFailure;
    }
    throw UsageError("unknown scenario '" + a.scenario + "' (expected generate, denoiser, separability, ablation or fidelity)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Caption-guided reconstruction-error toolkit"};
    app.set_version_flag("--version", std::string(kToolkitVersion));
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "debug logging");

    std::function<int()> run;
    Layered L;

    IngestArgs ingest;
    auto* c_ingest = app.add_subcommand("ingest", "build a manifest from a benchmark directory layout");
    c_ingest->add_option("--layout", ingest.layout, "genimage, forensynths or community")->required();
    c_ingest->add_option("--root", ingest.root, "dataset root")->required();
    c_ingest->add_option("--out", ingest.out, "manifest JSONL to write")->required();
    c_ingest->add_flag("--no-validate", ingest.no_validate, "skip decoding every file");
    add_common(c_ingest, L);
    c_ingest->callback([&] { run = [&] { return cmd_ingest(ingest, L); }; });

    CaptionArgs caption;
    auto* c_caption = app.add_subcommand("caption", "caption every manifest image");
    c_caption->add_option("--manifest", caption.manifest, "manifest JSONL")->required();
    c_caption->add_option("--backend", caption.backend, "caption backend")->capture_default_str();
    c_caption->add_option("--out", caption.out, "directory for captions.<backend>.jsonl")->required();
    c_caption->add_option("--toy-dataset", caption.toy_dataset, "toy dataset dir (default: the manifest's dir)");
    L.add(c_caption, "--fidelity", [](RunConfig& c) -> double& { return c.caption_fidelity; }, "synthetic caption fidelity")
        ->check(CLI::Range(0.0, 1.0));
    L.add(c_caption, "--caption-seed", [](RunConfig& c) -> std::uint64_t& { return c.caption_seed; }, "caption mask seed");
    add_common(c_caption, L);
    add_preprocess(c_caption, L);
    c_caption->callback([&] { run = [&] { return cmd_caption(caption, L); }; });

    StagePaths recon;
    auto* c_recon = app.add_subcommand("reconstruct", "fill the reconstruction cache");
    add_stage_inputs(c_recon, recon);
    add_common(c_recon, L);
    add_cache(c_recon, L);
    add_recon(c_recon, L);
    add_preprocess(c_recon, L);
    c_recon->callback([&] { run = [&] { return cmd_reconstruct(recon, L); }; });

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "train the fusion detector");
    add_stage_inputs(c_train, train.paths);
    c_train->add_option("--out", train.out, "checkpoint directory")->required();
    c_train->add_option("--spec", train.spec, "detector size: full or toy")->capture_default_str();
    c_train->add_flag("--offline", train.offline, "fail on cache misses instead of reconstructing");
    L.add(c_train, "--epochs", [](RunConfig& c) -> int& { return c.train.epochs; }, "training epochs");
    L.add(c_train, "--batch-size", [](RunConfig& c) -> int& { return c.train.batch_size; }, "batch size");
    L.add(c_train, "--lr", [](RunConfig& c) -> double& { return c.train.learning_rate; }, "learning rate");
    L.add(c_train, "--crop-size", [](RunConfig& c) -> int& { return c.train.augmentation.crop_size; }, "training crop");
    add_common(c_train, L);
    add_cache(c_train, L);
    add_recon(c_train, L);
    add_preprocess(c_train, L);
    c_train->callback([&] { run = [&] { return cmd_train(train, L); }; });

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "score a manifest and write report.json + report.md");
    add_stage_inputs(c_eval, ev.paths);
    c_eval->add_option("--checkpoint", ev.checkpoint, "detector checkpoint directory");
    c_eval->add_option("--scorer", ev.scorer, "detector or mean-sare")->capture_default_str();
    c_eval->add_option("--report", ev.report, "report JSON path")->capture_default_str();
    c_eval->add_flag("--offline", ev.offline, "fail on cache misses instead of reconstructing");
    add_common(c_eval, L);
    add_cache(c_eval, L);
    add_recon(c_eval, L);
    add_preprocess(c_eval, L);
    c_eval->callback([&] { run = [&] { return cmd_eval(ev, L); }; });

    AblateArgs ab;
    auto* c_ablate = app.add_subcommand("ablate", "strength x guidance grid: ablation.csv and plots");
    add_stage_inputs(c_ablate, ab.paths);
    c_ablate->add_option("--checkpoint", ab.checkpoint, "detector checkpoint directory");
    c_ablate->add_option("--scorer", ab.scorer, "detector or mean-sare")->capture_default_str();
    c_ablate->add_option("--strength-grid", ab.strengths, "comma-separated strengths")->delimiter(',');
    c_ablate->add_option("--guidance-grid", ab.guidances, "comma-separated guidance scales")->delimiter(',');
    c_ablate->add_option("--out", ab.out, "output directory")->capture_default_str();
    add_common(c_ablate, L);
    add_cache(c_ablate, L);
    add_recon(c_ablate, L);
    add_preprocess(c_ablate, L);
    c_ablate->callback([&] { run = [&] { return cmd_ablate(ab, L); }; });

    ToyArgs toy;
    auto* c_toy = app.add_subcommand("toy", "toy-world scenarios");
    c_toy->add_option("--scenario", toy.scenario, "generate, denoiser, separability, ablation or fidelity")
        ->capture_default_str();
    c_toy->add_option("--out", toy.out, "output directory")->capture_default_str();
    c_toy->add_option("--denoiser", toy.denoiser, "reuse a trained toy denoiser");
    c_toy->add_option("--n-real", toy.n_real, "real scenes (test set for evaluation scenarios)")->capture_default_str();
    c_toy->add_option("--n-fake", toy.n_fake, "fake scenes")->capture_default_str();
    c_toy->add_option("--denoiser-scenes", toy.denoiser_scenes, "denoiser training scenes")->capture_default_str();
    c_toy->add_option("--denoiser-epochs", toy.denoiser_epochs, "denoiser training epochs")->capture_default_str();
    c_toy->add_option("--fidelity", toy.fidelity, "caption fidelity")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    c_toy->add_option("--strength", toy.strength, "reconstruction strength")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    c_toy->add_option("--guidance", toy.guidance, "guidance scale")->capture_default_str();
    L.add(c_toy, "--steps", [](RunConfig& c) -> int& { return c.recon.max_steps; }, "sampler steps")
        ->check(CLI::PositiveNumber);
    add_common(c_toy, L);
    c_toy->callback([&] { run = [&] { return cmd_toy(toy, L); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsageError;
    }
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::warn);

    try {
        return run();
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsageError;
    } catch (const ParameterError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsageError;
    } catch (const CacheMissError& e) {
        std::cerr << "error: " << e.what() << "\n";
        for (const auto& k : e.keys()) std::cerr << "  " << k << "\n";
        return kStageFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kStageFailure;
    }
}
