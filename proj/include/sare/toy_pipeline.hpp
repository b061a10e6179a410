#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sare/detector.hpp"
#include "sare/evalkit.hpp"
#include "sare/toyworld.hpp"

namespace sare::toy {

struct ToyPipelineOptions {
    std::filesystem::path work_dir;
    std::uint64_t seed = 7;
    double fidelity = 1.0;

    int denoiser_scenes = 500;
    ToyTrainOptions denoiser{};

    int detector_train_per_class = 200;
    int test_per_class = 200;
    detect::TrainConfig detector = toy_detector_config();

    double strength = 0.5;
    double guidance_scale = 3.0;
    int max_steps = 50;
    int workers = 0;

    /// Small-batch settings suited to a few hundred toy pairs.
    static detect::TrainConfig toy_detector_config();
};

struct StageTimes {
    double generate = 0.0;
    double train_denoiser = 0.0;
    double reconstruct_train = 0.0;
    double train_detector = 0.0;
    double evaluate = 0.0;
};

struct ToyPipelineResult {
    std::vector<double> denoiser_loss;
    std::vector<double> detector_loss;
    eval::EvalReport mean_sare_report;
    eval::EvalReport detector_report;
    StageTimes wall;
    double cpu_seconds = 0.0;
    CacheStats cache;
};

/// The reconstruction configuration the toy pipeline runs with.
ReconstructionConfig toy_recon_config(const ToyPipelineOptions& options);
/// Preprocessing that leaves 64x64 toy scenes at their native size.
PreprocessOptions toy_preprocess(int resolution = 64);

/// generate -> train denoiser -> reconstruct -> train detector -> evaluate. Artifacts (datasets,
/// manifests, checkpoints, cache, reports, loss CSVs) land under work_dir.
ToyPipelineResult run_toy_pipeline(const ToyPipelineOptions& options);

struct FidelityPoint {
    double fidelity = 0.0;  ///< negative for the no-caption control
    double auc = 0.0;
    double auc_se = 0.0;
    double mean_sare_real = 0.0;
    double mean_sare_fake = 0.0;
};

struct FidelitySweep {
    std::vector<FidelityPoint> points;
    FidelityPoint control;  ///< every image reconstructed from the empty prompt
};

/// Mean-SARE AUC on `test_set` when fake captions reveal factors at each fidelity while real
/// captions stay at fidelity 1.0.
FidelitySweep fidelity_sweep(const ToyDataset& test_set, const ReconBackends& backends, const ReconstructionConfig& config,
                             const ReconstructionCache& cache, const std::vector<double>& fidelities,
                             std::uint64_t caption_seed, int workers = 0);

}  // namespace sare::toy
