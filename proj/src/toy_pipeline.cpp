#include "sare/toy_pipeline.hpp"

#include <chrono>
#include <ctime>

#include <spdlog/spdlog.h>

#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/parallel.hpp"

namespace sare::toy {

namespace fs = std::filesystem;

detect::TrainConfig ToyPipelineOptions::toy_detector_config() {
    detect::TrainConfig c;
    c.batch_size = 32;
    c.learning_rate = 1e-3;
    c.epochs = 12;
    return c;
}

ReconstructionConfig toy_recon_config(const ToyPipelineOptions& o) {
    ReconstructionConfig c;
    c.strength = o.strength;
    c.guidance_scale = o.guidance_scale;
    c.max_steps = o.max_steps;
    c.seed = static_cast<std::int64_t>(o.seed);
    return c;
}

PreprocessOptions toy_preprocess(int resolution) { return PreprocessOptions{resolution, 1}; }

namespace {

class Stopwatch {
public:
    double lap() {
        const auto now = std::chrono::steady_clock::now();
        const double s = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        return s;
    }

private:
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

}  // namespace

ToyPipelineResult run_toy_pipeline(const ToyPipelineOptions& o) {
    if (o.work_dir.empty()) throw ParameterError("work_dir", "must be set");
    const std::clock_t cpu0 = std::clock();
    Stopwatch sw;
    ToyPipelineResult result;
    fs::create_directories(o.work_dir);

    DatasetOptions dopt;
    dopt.caption_seed = o.seed;
    const ToyDataset denoise_set = make_dataset(0, o.denoiser_scenes, 1.0, derive_seed(o.seed, 1), dopt);
    const ToyDataset train_set =
        make_dataset(o.detector_train_per_class, o.detector_train_per_class, o.fidelity, derive_seed(o.seed, 2), dopt);
    const ToyDataset test_set = make_dataset(o.test_per_class, o.test_per_class, o.fidelity, derive_seed(o.seed, 3), dopt);
    const data::Manifest train_manifest = write_dataset(o.work_dir / "train", train_set, data::Split::train);
    const data::Manifest test_manifest = write_dataset(o.work_dir / "test", test_set, data::Split::test);
    result.wall.generate = sw.lap();

    HashTextEncoder encoder;
    ToyTrainOptions dn = o.denoiser;
    dn.seed = derive_seed(o.seed, 4);
    ToyTrainResult trained = train_toy_denoiser(denoise_set.items, encoder, default_schedule(), dn);
    trained.model.save(o.work_dir / "denoiser");
    result.denoiser_loss = trained.loss_trace;
    result.wall.train_denoiser = sw.lap();
    spdlog::info("toy denoiser trained: loss {:.4f} -> {:.4f}", result.denoiser_loss.front(), result.denoiser_loss.back());

    SyntheticCaptioner captioner(o.fidelity, o.seed);
    register_dataset(captioner, train_set);
    register_dataset(captioner, test_set);
    IdentityCodec codec;
    eval::PipelineBackends backends{captioner, ReconBackends{codec, trained.model, encoder}};
    const ReconstructionCache cache(o.work_dir / "cache");
    const ReconstructionConfig cfg = toy_recon_config(o);
    eval::EvalOptions eopt;
    eopt.workers = o.workers;
    eopt.preprocess = toy_preprocess(train_set.items.front().image.height());

    std::vector<detect::LabeledSample> samples(train_manifest.entries.size());
    std::vector<CacheStats> per(samples.size());
    parallel_for(samples.size(), o.workers, [&](std::size_t i) {
        const auto& e = train_manifest.entries[i];
        const eval::PipelineSample p = eval::run_pipeline(e, backends, cfg, cache, eopt, &per[i]);
        auto [img, s] = detect::to_canvas(p.image, p.sare);
        samples[i] = detect::LabeledSample{std::move(img), std::move(s), static_cast<int>(e.label)};
    });
    for (const auto& s : per) {
        result.cache.hits += s.hits;
        result.cache.misses += s.misses;
    }
    result.wall.reconstruct_train = sw.lap();

    detect::TrainConfig tc = o.detector;
    tc.seed = derive_seed(o.seed, 5);
    tc.workers = o.workers;
    detect::TrainResult det =
        detect::train_detector(samples, tc, detect::DetectorModel(detect::DetectorSpec::toy(), derive_seed(o.seed, 6)));
    det.model.save(o.work_dir / "detector", tc.to_json());
    detect::write_loss_csv(o.work_dir / "detector" / "loss.csv", det.steps);
    result.detector_loss = det.epoch_loss;
    result.wall.train_detector = sw.lap();

    const eval::DetectorScorer det_scorer(det.model, "toy-detector");
    const eval::MeanSareScorer sare_scorer;
    result.detector_report = eval::evaluate(det_scorer, test_manifest, backends, cfg, cache, eopt, &result.cache);
    result.mean_sare_report = eval::evaluate(sare_scorer, test_manifest, backends, cfg, cache, eopt, &result.cache);
    result.detector_report.write(o.work_dir / "report_detector.json");
    result.mean_sare_report.write(o.work_dir / "report_mean_sare.json");
    result.wall.evaluate = sw.lap();
    result.cpu_seconds = static_cast<double>(std::clock() - cpu0) / CLOCKS_PER_SEC;
    return result;
}

namespace {

FidelityPoint score_captions(const ToyDataset& test_set, const std::vector<Caption>& captions, double fidelity,
                             const ReconBackends& backends, const ReconstructionConfig& config,
                             const ReconstructionCache& cache, int workers) {
    const PreprocessOptions pre = toy_preprocess(test_set.items.front().image.height());
    eval::ScoreSet set;
    set.scores.resize(test_set.items.size());
    set.labels.resize(test_set.items.size());
    parallel_for(test_set.items.size(), workers, [&](std::size_t i) {
        const ImageArray x = preprocess_for_recon(test_set.items[i].image, pre);
        const ReconstructionConfig cfg = with_backend_ids(config, backends, captions[i].captioner_id);
        const ReconstructionRecord rec = cached_reconstruct(x, captions[i], cfg, backends, cache);
        set.scores[i] = 1.0 - mean_sare(compute_sare(x, rec));
        set.labels[i] = test_set.items[i].label;
    });
    FidelityPoint p;
    p.fidelity = fidelity;
    for (std::size_t i = 0; i < set.scores.size(); ++i) (set.labels[i] == 1 ? p.mean_sare_fake : p.mean_sare_real) += 1.0 - set.scores[i];
    p.mean_sare_fake /= static_cast<double>(set.count(1));
    p.mean_sare_real /= static_cast<double>(set.count(0));
    p.auc = eval::auc(set);
    p.auc_se = eval::auc_standard_error(p.auc, set.count(1), set.count(0));
    return p;
}

}  // namespace

FidelitySweep fidelity_sweep(const ToyDataset& test_set, const ReconBackends& backends, const ReconstructionConfig& config,
                             const ReconstructionCache& cache, const std::vector<double>& fidelities,
                             std::uint64_t caption_seed, int workers) {
    if (test_set.items.empty()) throw EmptySelectionError("fidelity sweep needs a nonempty test set");
    const PreprocessOptions pre = toy_preprocess(test_set.items.front().image.height());
    std::vector<std::string> digests;
    for (const auto& item : test_set.items) digests.push_back(image_digest(preprocess_for_recon(item.image, pre)));

    const SyntheticCaptioner full(1.0, caption_seed);
    FidelitySweep sweep;
    for (double f : fidelities) {
        const SyntheticCaptioner partial(f, caption_seed);
        std::vector<Caption> captions;
        for (std::size_t i = 0; i < test_set.items.size(); ++i) {
            const auto& item = test_set.items[i];
            const SyntheticCaptioner& c = item.label == 1 ? partial : full;
            const std::string text = SyntheticCaptioner::compose(c.reveal(item.factors.caption_factors(), digests[i]));
            // Real captions are the same at every point and share cache entries.
            const std::string id = item.label == 1 ? full.identifier() + "/fake:" + partial.identifier() : full.identifier();
            captions.push_back(Caption{text, id, digests[i]});
        }
        sweep.points.push_back(score_captions(test_set, captions, f, backends, config, cache, workers));
    }
    std::vector<Caption> empty;
    for (const auto& d : digests) empty.push_back(Caption{"", "no-caption", d});
    sweep.control = score_captions(test_set, empty, -1.0, backends, config, cache, workers);
    return sweep;
}

}  // namespace sare::toy
