#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sare/conditioning.hpp"
#include "sare/datasets.hpp"
#include "sare/detector.hpp"
#include "sare/recon.hpp"
#include "sare/sare_map.hpp"

namespace sare::eval {

struct ScoreSet {
    std::vector<double> scores;
    std::vector<int> labels;  ///< 1 = fake
    std::string subset;

    void validate() const;
    std::size_t count(int label) const;
};

/// Fraction of samples with (score >= threshold) == (label == 1).
double accuracy(const ScoreSet& s, double threshold = 0.5);
/// Mann-Whitney AUC with half credit for ties, via sort and average ranks.
/// Throws UndefinedMetricError unless both classes are present.
double auc(const ScoreSet& s);
/// Hanley-McNeil standard error of an AUC estimate from n_pos positives and n_neg negatives.
double auc_standard_error(double auc, std::size_t n_pos, std::size_t n_neg);

struct SubsetResult {
    std::string subset;
    std::size_t n_samples = 0;
    std::size_t n_real = 0;
    std::size_t n_fake = 0;
    double acc = 0.0;
    std::optional<double> auc;  ///< empty when only one class is present
};

struct EvalReport {
    std::vector<SubsetResult> subsets;
    double avg_acc = 0.0;
    std::optional<double> avg_auc;  ///< mean over subsets whose AUC is defined
    nlohmann::json config;          ///< scorer id, reconstruction config, ...
    std::string toolkit_version;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    /// Table with one column per subset plus the average, rows ACC and AUC in percent.
    std::string to_markdown() const;
    void write(const std::filesystem::path& json_path) const;
};

/// Per-subset metrics plus macro averages, subsets in the given order.
EvalReport assemble_report(const std::vector<ScoreSet>& sets, nlohmann::json config, double threshold = 0.5);

/// Maps a preprocessed image and its SARE map to a fake score.
class SampleScorer {
public:
    virtual ~SampleScorer() = default;
    virtual std::string identifier() const = 0;
    virtual double score(const ImageArray& image, const SareMap& sare) const = 0;
};

/// Trained fusion detector under eval-mode preprocessing (canvas resize, centre crop).
class DetectorScorer final : public SampleScorer {
public:
    DetectorScorer(const detect::DetectorModel& model, std::string checkpoint_id, int canvas = 256);
    std::string identifier() const override { return "detector:" + checkpoint_id_; }
    double score(const ImageArray& image, const SareMap& sare) const override;

private:
    const detect::DetectorModel& model_;
    std::string checkpoint_id_;
    int canvas_;
};

/// Single-feature score 1 - mean(SARE): higher for better-reconstructed (more fake-like) images.
class MeanSareScorer final : public SampleScorer {
public:
    std::string identifier() const override { return "mean-sare-v1"; }
    double score(const ImageArray& image, const SareMap& sare) const override;
};

struct PipelineBackends {
    CaptionerBackend& captioner;
    ReconBackends recon;
};

struct EvalOptions {
    /// Never reconstruct; every reconstruction must already be cached.
    bool offline = false;
    int workers = 1;
    PreprocessOptions preprocess{};
    /// Precomputed captions keyed by image digest; missing ones are generated.
    const std::map<std::string, Caption>* captions = nullptr;
};

/// One manifest entry carried through caption -> cached reconstruction -> SARE.
struct PipelineSample {
    ImageArray image;  ///< preprocessed
    Caption caption;
    SareMap sare;
};

/// Runs the pipeline for one entry.
PipelineSample run_pipeline(const data::ManifestEntry& entry, PipelineBackends& backends,
                            const ReconstructionConfig& config, const ReconstructionCache& cache,
                            const EvalOptions& options, CacheStats* stats = nullptr);

/// Scores every entry through the full pipeline and assembles a per-subset report.
/// In offline mode, missing cache entries raise CacheMissError listing every missing key.
EvalReport evaluate(const SampleScorer& scorer, const data::Manifest& manifest, PipelineBackends& backends,
                    const ReconstructionConfig& config, const ReconstructionCache& cache, const EvalOptions& options = {},
                    CacheStats* stats = nullptr);

// ---------------------------------------------------------------------------

std::vector<double> default_strength_grid();  ///< 0.1, 0.2, ..., 0.8
std::vector<double> default_guidance_grid();  ///< 1, 3, 5, 7.5, 10

struct AblationCell {
    double strength = 0.0;
    double guidance_scale = 0.0;
    std::optional<EvalReport> report;
    std::string error;  ///< set when the cell failed

    bool ok() const { return report.has_value(); }
};

/// Builds the scorer for one cell (e.g. a detector trained at that cell's configuration).
using ScorerFactory = std::function<std::unique_ptr<SampleScorer>(const ReconstructionConfig&)>;

struct AblationOptions {
    EvalOptions eval{};
    int cell_workers = 1;
};

/// Evaluates the Cartesian product of strengths and guidance scales (strength-major order). A failing
/// cell is recorded and does not stop the grid.
std::vector<AblationCell> ablation_grid(const std::vector<double>& strengths, const std::vector<double>& guidance_scales,
                                        const ReconstructionConfig& fixed, const data::Manifest& manifest,
                                        PipelineBackends& backends, const ReconstructionCache& cache,
                                        const ScorerFactory& scorer_factory, const AblationOptions& options = {});

/// Long-format CSV with columns strength, guidance_scale, subset, acc, auc, n_samples, status;
/// one row per (cell, subset).
std::string ablation_csv(const std::vector<AblationCell>& cells, const std::vector<std::string>& subsets);
void write_ablation_outputs(const std::filesystem::path& dir, const std::vector<AblationCell>& cells,
                            const std::vector<std::string>& subsets);
/// Line plot of the macro-average metric versus strength, one series per guidance scale.
std::string ablation_svg(const std::vector<AblationCell>& cells, bool use_auc);

}  // namespace sare::eval
