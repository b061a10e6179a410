#include "sare/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "sare/digest.hpp"
#include "sare/errors.hpp"
#include "sare/image_io.hpp"
#include "sare/parallel.hpp"
#include "sare/version.hpp"

namespace sare::eval {

namespace fs = std::filesystem;

void ScoreSet::validate() const {
    if (scores.empty()) throw ParameterError("scores", "score set is empty");
    if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
    for (int l : labels) {
        if (l != 0 && l != 1) throw ParameterError("labels", "must be 0 or 1");
    }
    for (double s : scores) {
        if (!std::isfinite(s)) throw NumericError("non-finite score in subset " + subset);
    }
}

std::size_t ScoreSet::count(int label) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

double accuracy(const ScoreSet& s, double threshold) {
    s.validate();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) correct += (s.scores[i] >= threshold) == (s.labels[i] == 1) ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(s.scores.size());
}

double auc(const ScoreSet& s) {
    s.validate();
    const std::size_t n = s.scores.size();
    const std::size_t n_fake = s.count(1), n_real = n - n_fake;
    if (n_fake == 0 || n_real == 0) {
        throw UndefinedMetricError("AUC needs both classes in subset '" + s.subset + "' (" + std::to_string(n_fake) +
                                   " fake, " + std::to_string(n_real) + " real)");
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
    // Sum of fake ranks with ties sharing their average rank; ranks are doubled to stay integral.
    std::uint64_t rank2_sum = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && s.scores[idx[j]] == s.scores[idx[i]]) ++j;
        const std::uint64_t avg_rank2 = static_cast<std::uint64_t>(i + 1 + j);  // 2 * mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (s.labels[idx[k]] == 1) rank2_sum += avg_rank2;
        }
        i = j;
    }
    // U = R_fake - n_fake (n_fake + 1) / 2, counted in halves.
    const std::uint64_t u2 = rank2_sum - static_cast<std::uint64_t>(n_fake) * (n_fake + 1);
    return static_cast<double>(u2) / (2.0 * static_cast<double>(n_fake) * static_cast<double>(n_real));
}

double auc_standard_error(double a, std::size_t n_pos, std::size_t n_neg) {
    if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("AUC standard error needs both classes");
    const double q1 = a / (2.0 - a), q2 = 2.0 * a * a / (1.0 + a);
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    const double var = (a * (1.0 - a) + (np - 1.0) * (q1 - a * a) + (nn - 1.0) * (q2 - a * a)) / (np * nn);
    return std::sqrt(std::max(var, 0.0));
}

// ---------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
    nlohmann::json subs = nlohmann::json::array();
    for (const auto& s : subsets) {
        subs.push_back({{"subset", s.subset},
                        {"n_samples", s.n_samples},
                        {"n_real", s.n_real},
                        {"n_fake", s.n_fake},
                        {"acc", s.acc},
                        {"auc", s.auc ? nlohmann::json(*s.auc) : nlohmann::json(nullptr)}});
    }
    return {{"subsets", subs},
            {"average", {{"acc", avg_acc}, {"auc", avg_auc ? nlohmann::json(*avg_auc) : nlohmann::json(nullptr)}}},
            {"config", config},
            {"toolkit_version", toolkit_version}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    for (const auto& s : j.at("subsets")) {
        SubsetResult x;
        x.subset = s.at("subset").get<std::string>();
        x.n_samples = s.at("n_samples").get<std::size_t>();
        x.n_real = s.at("n_real").get<std::size_t>();
        x.n_fake = s.at("n_fake").get<std::size_t>();
        x.acc = s.at("acc").get<double>();
        if (!s.at("auc").is_null()) x.auc = s.at("auc").get<double>();
        r.subsets.push_back(std::move(x));
    }
    r.avg_acc = j.at("average").at("acc").get<double>();
    if (!j.at("average").at("auc").is_null()) r.avg_auc = j.at("average").at("auc").get<double>();
    r.config = j.at("config");
    r.toolkit_version = j.at("toolkit_version").get<std::string>();
    return r;
}

std::string EvalReport::to_markdown() const {
    auto pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
        return std::string(buf);
    };
    std::string header = "| Metric |", rule = "|---|", acc = "| ACC (%) |", au = "| AUC (%) |";
    for (const auto& s : subsets) {
        header += " " + s.subset + " |";
        rule += "---|";
        acc += " " + pct(s.acc) + " |";
        au += " " + (s.auc ? pct(*s.auc) : std::string("undefined")) + " |";
    }
    header += " Avg |";
    rule += "---|";
    acc += " " + pct(avg_acc) + " |";
    au += " " + (avg_auc ? pct(*avg_auc) : std::string("undefined")) + " |";
    std::string out = header + "\n" + rule + "\n" + acc + "\n" + au + "\n";
    out += "\nScorer: `" + config.value("scorer", std::string("?")) + "`, toolkit " + toolkit_version + "\n";
    return out;
}

void EvalReport::write(const fs::path& json_path) const {
    atomic_write(json_path, to_json().dump(2) + "\n");
    fs::path md = json_path;
    md.replace_extension(".md");
    atomic_write(md, to_markdown());
}

EvalReport assemble_report(const std::vector<ScoreSet>& sets, nlohmann::json config, double threshold) {
    if (sets.empty()) throw ParameterError("sets", "report needs at least one subset");
    EvalReport r;
    r.config = std::move(config);
    r.toolkit_version = kToolkitVersion;
    double acc_sum = 0.0, auc_sum = 0.0;
    std::size_t auc_n = 0;
    for (const auto& s : sets) {
        SubsetResult x;
        x.subset = s.subset;
        x.n_samples = s.scores.size();
        x.n_fake = s.count(1);
        x.n_real = x.n_samples - x.n_fake;
        x.acc = accuracy(s, threshold);
        if (x.n_fake > 0 && x.n_real > 0) {
            x.auc = auc(s);
            auc_sum += *x.auc;
            ++auc_n;
        }
        acc_sum += x.acc;
        r.subsets.push_back(std::move(x));
    }
    r.avg_acc = acc_sum / static_cast<double>(sets.size());
    if (auc_n > 0) r.avg_auc = auc_sum / static_cast<double>(auc_n);
    return r;
}

// ---------------------------------------------------------------------------

DetectorScorer::DetectorScorer(const detect::DetectorModel& model, std::string checkpoint_id, int canvas)
    : model_(model), checkpoint_id_(std::move(checkpoint_id)), canvas_(canvas) {
    if (canvas < model.spec().input_size) throw ParameterError("canvas", "smaller than the detector input size");
}

double DetectorScorer::score(const ImageArray& image, const SareMap& sare) const {
    const auto [img, s] = detect::to_canvas(image, sare, canvas_);
    const auto pair = detect::augment_pair(img, s, detect::AugmentationPolicy::eval(model_.spec().input_size), 0);
    return model_.predict(pair.image, pair.sare);
}

double MeanSareScorer::score(const ImageArray&, const SareMap& sare) const { return 1.0 - mean_sare(sare); }

PipelineSample run_pipeline(const data::ManifestEntry& entry, PipelineBackends& backends, const ReconstructionConfig& config,
                            const ReconstructionCache& cache, const EvalOptions& options, CacheStats* stats) {
    PipelineSample out;
    out.image = preprocess_for_recon(read_image(entry.path), options.preprocess);
    const std::string digest = image_digest(out.image);
    if (options.captions) {
        const auto it = options.captions->find(digest);
        out.caption = it != options.captions->end() ? it->second : generate_caption(out.image, backends.captioner);
    } else {
        out.caption = generate_caption(out.image, backends.captioner);
    }
    const ReconstructionConfig cfg = with_backend_ids(config, backends.recon, out.caption.captioner_id);
    if (options.offline) {
        const std::string key = cache_key(digest, out.caption, cfg);
        auto rec = cache.load(key);
        if (!rec) throw CacheMissError({key});
        if (stats) ++stats->hits;
        out.sare = compute_sare(out.image, *rec);
    } else {
        out.sare = compute_sare(out.image, cached_reconstruct(out.image, out.caption, cfg, backends.recon, cache, stats));
    }
    return out;
}

EvalReport evaluate(const SampleScorer& scorer, const data::Manifest& manifest, PipelineBackends& backends,
                    const ReconstructionConfig& config, const ReconstructionCache& cache, const EvalOptions& options,
                    CacheStats* stats) {
    if (manifest.entries.empty()) throw EmptySelectionError("manifest has no entries to evaluate");
    config.validate();
    const std::size_t n = manifest.entries.size();
    std::vector<double> scores(n);
    std::vector<std::string> missing(n);
    std::mutex stats_mutex;
    parallel_for(n, options.workers, [&](std::size_t i) {
        CacheStats local;
        try {
            const PipelineSample p = run_pipeline(manifest.entries[i], backends, config, cache, options, &local);
            scores[i] = scorer.score(p.image, p.sare);
        } catch (const CacheMissError& e) {
            if (!options.offline) throw;
            missing[i] = e.keys().front();
        }
        if (stats) {
            std::lock_guard lock(stats_mutex);
            stats->hits += local.hits;
            stats->misses += local.misses;
        }
    });
    std::vector<std::string> missing_keys;
    for (auto& k : missing) {
        if (!k.empty()) missing_keys.push_back(std::move(k));
    }
    if (!missing_keys.empty()) throw CacheMissError(std::move(missing_keys));

    std::vector<ScoreSet> sets;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& e = manifest.entries[i];
        auto [it, fresh] = index.try_emplace(e.subset, sets.size());
        if (fresh) sets.push_back(ScoreSet{{}, {}, e.subset});
        sets[it->second].scores.push_back(scores[i]);
        sets[it->second].labels.push_back(static_cast<int>(e.label));
    }
    nlohmann::json snapshot{{"scorer", scorer.identifier()},
                            {"reconstruction", with_backend_ids(config, backends.recon, backends.captioner.identifier()).to_json()},
                            {"threshold", 0.5},
                            {"preprocess", {{"long_side", options.preprocess.long_side}, {"multiple", options.preprocess.multiple}}}};
    return assemble_report(sets, std::move(snapshot));
}

// ---------------------------------------------------------------------------

std::vector<double> default_strength_grid() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8}; }
std::vector<double> default_guidance_grid() { return {1.0, 3.0, 5.0, 7.5, 10.0}; }

std::vector<AblationCell> ablation_grid(const std::vector<double>& strengths, const std::vector<double>& guidance_scales,
                                        const ReconstructionConfig& fixed, const data::Manifest& manifest,
                                        PipelineBackends& backends, const ReconstructionCache& cache,
                                        const ScorerFactory& scorer_factory, const AblationOptions& options) {
    if (strengths.empty() || guidance_scales.empty()) throw ParameterError("grid", "strength and guidance grids must be nonempty");
    std::vector<AblationCell> cells;
    for (double s : strengths) {
        for (double g : guidance_scales) cells.push_back(AblationCell{s, g, std::nullopt, {}});
    }
    parallel_for(cells.size(), options.cell_workers, [&](std::size_t i) {
        AblationCell& cell = cells[i];
        try {
            ReconstructionConfig cfg = fixed;
            cfg.strength = cell.strength;
            cfg.guidance_scale = cell.guidance_scale;
            cfg.validate();
            const auto scorer = scorer_factory(cfg);
            cell.report = evaluate(*scorer, manifest, backends, cfg, cache, options.eval);
        } catch (const std::exception& e) {
            cell.error = e.what();
            spdlog::warn("ablation cell (strength {}, guidance {}) failed: {}", cell.strength, cell.guidance_scale, e.what());
        }
    });
    return cells;
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

std::string ablation_csv(const std::vector<AblationCell>& cells, const std::vector<std::string>& subsets) {
    std::string out = "strength,guidance_scale,subset,acc,auc,n_samples,status\n";
    for (const auto& cell : cells) {
        for (const auto& subset : subsets) {
            std::string acc, au, n = "0", status;
            if (!cell.ok()) {
                status = "failed: " + cell.error;
            } else {
                const auto it = std::find_if(cell.report->subsets.begin(), cell.report->subsets.end(),
                                             [&](const SubsetResult& r) { return r.subset == subset; });
                if (it == cell.report->subsets.end()) {
                    status = "failed: subset not evaluated";
                } else {
                    acc = fmt(it->acc);
                    n = std::to_string(it->n_samples);
                    if (it->auc) {
                        au = fmt(*it->auc);
                        status = "ok";
                    } else {
                        status = "auc_undefined";
                    }
                }
            }
            out += fmt(cell.strength) + "," + fmt(cell.guidance_scale) + "," + csv_field(subset) + "," + acc + "," + au + "," +
                   n + "," + csv_field(status) + "\n";
        }
    }
    return out;
}

std::string ablation_svg(const std::vector<AblationCell>& cells, bool use_auc) {
    constexpr double W = 640, H = 400, L = 60, R = 150, T = 30, B = 50;
    std::set<double> strengths, guidances;
    for (const auto& c : cells) {
        strengths.insert(c.strength);
        guidances.insert(c.guidance_scale);
    }
    const double s_lo = strengths.empty() ? 0.0 : *strengths.begin();
    const double s_hi = strengths.empty() ? 1.0 : *strengths.rbegin();
    auto px = [&](double s) { return L + (s_hi > s_lo ? (s - s_lo) / (s_hi - s_lo) : 0.5) * (W - L - R); };
    auto py = [&](double v) { return T + (1.0 - v) * (H - T - B); };
    static constexpr const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" font-size=\"12\">\n",
                  W, H);
    out += buf;
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof(buf), "<text x=\"%.0f\" y=\"18\">%s vs strength</text>\n", L, use_auc ? "AUC" : "ACC");
    out += buf;
    for (int k = 0; k <= 4; ++k) {
        const double v = k / 4.0;
        std::snprintf(buf, sizeof(buf),
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/><text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.2f</text>\n",
                      L, py(v), W - R, py(v), L - 6, py(v) + 4, v);
        out += buf;
    }
    for (double s : strengths) {
        std::snprintf(buf, sizeof(buf), "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%g</text>\n", px(s), H - B + 18, s);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">strength</text>\n", (L + W - R) / 2, H - 10);
    out += buf;
    int series = 0;
    for (double g : guidances) {
        const char* color = palette[series % 7];
        std::string pts;
        for (const auto& c : cells) {
            if (c.guidance_scale != g || !c.ok()) continue;
            const auto v = use_auc ? c.report->avg_auc : std::optional<double>(c.report->avg_acc);
            if (!v) continue;
            std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", px(c.strength), py(*v));
            pts += buf;
            std::snprintf(buf, sizeof(buf), "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"%s\"/>\n", px(c.strength), py(*v), color);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "<polyline fill=\"none\" stroke=\"%s\" stroke-width=\"2\" points=\"%s\"/>\n", color, pts.c_str());
        out += buf;
        std::snprintf(buf, sizeof(buf), "<text x=\"%.1f\" y=\"%.1f\" fill=\"%s\">guidance %g</text>\n", W - R + 10, T + 16.0 * series + 10, color, g);
        out += buf;
        ++series;
    }
    out += "</svg>\n";
    return out;
}

void write_ablation_outputs(const fs::path& dir, const std::vector<AblationCell>& cells, const std::vector<std::string>& subsets) {
    fs::create_directories(dir);
    atomic_write(dir / "ablation.csv", ablation_csv(cells, subsets));
    atomic_write(dir / "ablation_acc.svg", ablation_svg(cells, false));
    atomic_write(dir / "ablation_auc.svg", ablation_svg(cells, true));
    nlohmann::json reports = nlohmann::json::array();
    for (const auto& c : cells) {
        reports.push_back({{"strength", c.strength},
                           {"guidance_scale", c.guidance_scale},
                           {"status", c.ok() ? "ok" : "failed"},
                           {"error", c.error},
                           {"report", c.ok() ? c.report->to_json() : nlohmann::json(nullptr)}});
    }
    atomic_write(dir / "ablation_reports.json", reports.dump(2) + "\n");
}

}  // namespace sare::eval
