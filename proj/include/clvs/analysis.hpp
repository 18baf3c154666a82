#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clvs/errors.hpp"
#include "clvs/trace.hpp"

namespace clvs {

// Mechanism-level metrics over traces: key-object attention per layer, peak
// layers, relative-increase curves, convergence layers, and the
// uncertainty/convergence statistics. All functions here are pure.

struct ObjectOverlap {
    std::string name;
    std::vector<double> overlap; // N_v entries in [0,1]: fraction of each patch covered
};

struct Scene {
    int grid_rows = 0;
    int grid_cols = 0;
    std::vector<ObjectOverlap> objects;

    int n_patches() const { return grid_rows * grid_cols; }

    void validate() const {
        if (grid_rows < 1 || grid_cols < 1) throw ConfigError("scene.grid: must be at least 1x1");
        for (const auto& obj : objects) {
            if (static_cast<int>(obj.overlap.size()) != n_patches())
                throw ValidationError("scene object '" + obj.name + "': expected " +
                                      std::to_string(n_patches()) + " overlap entries");
            for (double x : obj.overlap)
                if (!(x >= 0.0 && x <= 1.0))
                    throw ValidationError("scene object '" + obj.name +
                                          "': overlap entries must be in [0,1]");
        }
    }
};

// Overlap-weighted attention mass on one object: sum_i a[i] * overlap[i].
inline double key_object_attention(std::span<const double> avg_attention,
                                   const ObjectOverlap& overlap) {
    if (avg_attention.size() != overlap.overlap.size())
        throw InputError("key_object_attention: attention/overlap length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < avg_attention.size(); ++i)
        acc += avg_attention[i] * overlap.overlap[i];
    return acc;
}

// 1-based argmax over a per-layer series; ties break to the lowest layer.
inline int peak_layer(std::span<const double> series) {
    if (series.empty()) throw InputError("peak_layer: empty series");
    int best = 0;
    for (int i = 1; i < static_cast<int>(series.size()); ++i)
        if (series[i] > series[best]) best = i;
    return best + 1;
}

// Per-layer 100*(clvs - vanilla)/vanilla, clipped above at clip_pct. A zero
// vanilla entry reports clip_pct when clvs is positive there, else 0.
inline std::vector<double> relative_increase(std::span<const double> clvs,
                                             std::span<const double> vanilla, double clip_pct) {
    if (clvs.size() != vanilla.size())
        throw InputError("relative_increase: series length mismatch");
    if (!(clip_pct > 0.0)) throw InputError("relative_increase: clip_pct must be positive");
    std::vector<double> out(clvs.size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (vanilla[i] == 0.0)
            out[i] = clvs[i] > 0.0 ? clip_pct : 0.0;
        else
            out[i] = std::min(clip_pct, 100.0 * (clvs[i] - vanilla[i]) / vanilla[i]);
    }
    return out;
}

// Point-biserial correlation with the population standard deviation:
// r = (M1 - M0) / s_n * sqrt(p*q). Requires both classes and nonzero spread.
inline double point_biserial(std::span<const double> u_values, std::span<const int> flags) {
    if (u_values.size() != flags.size()) throw InputError("point_biserial: length mismatch");
    const size_t n = u_values.size();
    if (n == 0) throw StatError("point_biserial: empty sample");
    double sum1 = 0.0, sum0 = 0.0;
    size_t n1 = 0, n0 = 0;
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mean += u_values[i];
        if (flags[i] != 0) {
            sum1 += u_values[i];
            ++n1;
        } else {
            sum0 += u_values[i];
            ++n0;
        }
    }
    if (n1 == 0 || n0 == 0) throw StatError("point_biserial: only one class present");
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double u : u_values) var += (u - mean) * (u - mean);
    var /= static_cast<double>(n);
    if (!(var > 0.0)) throw StatError("point_biserial: zero variance in u");
    const double m1 = sum1 / static_cast<double>(n1);
    const double m0 = sum0 / static_cast<double>(n0);
    const double p = static_cast<double>(n1) / static_cast<double>(n);
    const double q = static_cast<double>(n0) / static_cast<double>(n);
    return (m1 - m0) / std::sqrt(var) * std::sqrt(p * q);
}

struct LogisticFit {
    double intercept = 0.0;
    double coefficient = 0.0;
    int iterations = 0;
    double log_likelihood = 0.0;
};

// Univariate maximum-likelihood logistic regression via iteratively
// reweighted least squares on the centered predictor. Stops when the
// log-likelihood improves by less than 1e-10 or after 100 iterations.
// Perfectly separating data has no finite MLE and is rejected up front.
inline LogisticFit logistic_fit(std::span<const double> u_values, std::span<const int> flags) {
    if (u_values.size() != flags.size()) throw InputError("logistic_fit: length mismatch");
    const size_t n = u_values.size();
    size_t n1 = 0;
    for (int f : flags) n1 += (f != 0);
    if (n1 == 0 || n1 == n) throw StatError("logistic_fit: only one class present");

    double min1 = 1e300, max1 = -1e300, min0 = 1e300, max0 = -1e300;
    for (size_t i = 0; i < n; ++i) {
        if (flags[i] != 0) {
            min1 = std::min(min1, u_values[i]);
            max1 = std::max(max1, u_values[i]);
        } else {
            min0 = std::min(min0, u_values[i]);
            max0 = std::max(max0, u_values[i]);
        }
    }
    if (max0 < min1 || max1 < min0)
        throw StatError("logistic_fit: perfect separation, coefficient diverges");

    double xbar = 0.0;
    for (double u : u_values) xbar += u;
    xbar /= static_cast<double>(n);
    std::vector<double> xc(n);
    for (size_t i = 0; i < n; ++i) xc[i] = u_values[i] - xbar;

    double a = 0.0, b = 0.0;
    double ll_prev = -1e300;
    LogisticFit fit;
    for (int iter = 1; iter <= 100; ++iter) {
        double ll = 0.0, g0 = 0.0, g1 = 0.0, s0 = 0.0, s1 = 0.0, s2 = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double z = a + b * xc[i];
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double y = flags[i] != 0 ? 1.0 : 0.0;
            const double pc = std::clamp(p, 1e-300, 1.0 - 1e-16);
            ll += y * std::log(pc) + (1.0 - y) * std::log1p(-std::clamp(p, 0.0, 1.0 - 1e-16));
            const double r = y - p;
            const double w = p * (1.0 - p);
            g0 += r;
            g1 += r * xc[i];
            s0 += w;
            s1 += w * xc[i];
            s2 += w * xc[i] * xc[i];
        }
        fit.iterations = iter;
        fit.log_likelihood = ll;
        if (ll - ll_prev < 1e-10 && iter > 1) break;
        ll_prev = ll;

        const double det = s0 * s2 - s1 * s1;
        if (s2 <= 0.0 || std::abs(det) < 1e-12 * std::max(1.0, s0 * s2)) {
            // Constant (or numerically constant) predictor: fit the intercept
            // alone and leave the coefficient at zero.
            a += g0 / s0;
        } else {
            a += (s2 * g0 - s1 * g1) / det;
            b += (s0 * g1 - s1 * g0) / det;
        }
    }
    fit.intercept = a - b * xbar;
    fit.coefficient = b;
    return fit;
}

// Earliest layer from which the per-layer argmax agrees with the final token
// through the end of the stack.
struct ConvergenceProfile {
    std::vector<int> layer_argmax; // one per layer
    int final_token = 0;
    int convergence_layer = 0; // 1-based; always exists (trivially L)
};

inline ConvergenceProfile convergence_profile(std::span<const int> layer_argmax) {
    if (layer_argmax.empty()) throw InputError("convergence_profile: empty input");
    ConvergenceProfile prof;
    prof.layer_argmax.assign(layer_argmax.begin(), layer_argmax.end());
    prof.final_token = layer_argmax.back();
    int l = static_cast<int>(layer_argmax.size());
    while (l > 1 && layer_argmax[l - 2] == prof.final_token) --l;
    prof.convergence_layer = l;
    return prof;
}

// ---------------------------------------------------------------------------
// Trace-level aggregation
// ---------------------------------------------------------------------------

// Head-mean of the post-intervention visual attention in one record. Vanilla
// traces carry post == pre, so this is the raw attention there and the
// smoothed attention on smoothing runs: in both cases what the model used.
inline std::vector<double> head_mean_visual(const TraceRecord& rec) {
    const auto& heads = rec.post_visual_attention;
    if (heads.empty()) throw InputError("head_mean_visual: no heads");
    std::vector<double> mean(heads[0].size(), 0.0);
    for (const auto& h : heads)
        for (size_t i = 0; i < mean.size(); ++i) mean[i] += h[i];
    for (double& m : mean) m /= static_cast<double>(heads.size());
    return mean;
}

// Per-layer object attention, averaged over decoding steps.
inline std::vector<double> object_attention_series(const TraceFile& trace,
                                                   const ObjectOverlap& overlap) {
    const int L = trace.header.model.n_layers;
    std::vector<double> series(L, 0.0);
    if (trace.records.empty()) return series;
    const int steps = static_cast<int>(trace.records.size()) / L;
    for (const TraceRecord& rec : trace.records)
        series[rec.layer - 1] += key_object_attention(head_mean_visual(rec), overlap);
    for (double& s : series) s /= static_cast<double>(steps);
    return series;
}

// Pooled (uncertainty, converged-at-this-layer) pairs across all steps and
// all layers where uncertainty was recorded.
inline void uncertainty_convergence_pairs(const TraceFile& trace, std::vector<double>& u_out,
                                          std::vector<int>& flag_out) {
    const int L = trace.header.model.n_layers;
    const int steps = static_cast<int>(trace.records.size()) / L;
    for (int t = 0; t < steps; ++t) {
        std::vector<int> argmax(L);
        for (int l = 0; l < L; ++l) argmax[l] = trace.records[t * L + l].layer_argmax_token;
        const auto prof = convergence_profile(argmax);
        for (int l = 0; l < L; ++l) {
            const TraceRecord& rec = trace.records[t * L + l];
            if (!rec.uncertainty) continue;
            u_out.push_back(*rec.uncertainty);
            flag_out.push_back(rec.layer >= prof.convergence_layer ? 1 : 0);
        }
    }
}

// ---------------------------------------------------------------------------
// Scene file I/O (JSON: patch grid plus one overlap vector per object)
// ---------------------------------------------------------------------------

inline nlohmann::json scene_to_json(const Scene& scene) {
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& obj : scene.objects)
        objects.push_back({{"name", obj.name}, {"overlap", obj.overlap}});
    return {{"grid", {{"rows", scene.grid_rows}, {"cols", scene.grid_cols}}},
            {"objects", objects}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene scene;
    scene.grid_rows = j.at("grid").at("rows").get<int>();
    scene.grid_cols = j.at("grid").at("cols").get<int>();
    for (const auto& obj : j.at("objects")) {
        ObjectOverlap o;
        o.name = obj.at("name").get<std::string>();
        o.overlap = obj.at("overlap").get<std::vector<double>>();
        scene.objects.push_back(std::move(o));
    }
    scene.validate();
    return scene;
}

inline void save_scene(const std::string& path, const Scene& scene) {
    scene.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << scene_to_json(scene).dump() << "\n";
    if (!out) throw IoError("failed to write '" + path + "'");
}

inline Scene load_scene(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open scene file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("scene file '") + path + "': " + e.what());
    }
    try {
        return scene_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("scene file '") + path + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Paired-run report
// ---------------------------------------------------------------------------

struct AnalysisReport {
    int n_layers = 0;
    double clip_pct = 100.0;
    // Mean over objects; empty when no scene was given.
    std::vector<double> a_obj_vanilla;
    std::vector<double> a_obj_clvs;
    std::vector<double> relative_increase_pct;
    int peak_layer_vanilla = 0;
    int peak_layer_clvs = 0;
    std::vector<std::string> object_names;
    std::vector<std::vector<double>> per_object_vanilla;
    std::vector<std::vector<double>> per_object_clvs;
    std::vector<int> convergence_vanilla; // per step
    std::vector<int> convergence_clvs;
    std::optional<double> point_biserial_r;
    std::optional<double> logistic_intercept;
    std::optional<double> logistic_coefficient;
    std::string stats_note;
};

namespace detail {

inline std::vector<int> convergence_layers(const TraceFile& trace) {
    const int L = trace.header.model.n_layers;
    const int steps = static_cast<int>(trace.records.size()) / L;
    std::vector<int> out;
    out.reserve(steps);
    for (int t = 0; t < steps; ++t) {
        std::vector<int> argmax(L);
        for (int l = 0; l < L; ++l) argmax[l] = trace.records[t * L + l].layer_argmax_token;
        out.push_back(convergence_profile(argmax).convergence_layer);
    }
    return out;
}

} // namespace detail

inline AnalysisReport build_report(const TraceFile& vanilla, const TraceFile& clvs,
                                   const Scene* scene, double clip_pct = 100.0) {
    if (vanilla.header.model.n_layers != clvs.header.model.n_layers ||
        vanilla.header.layout.n_vis != clvs.header.layout.n_vis)
        throw InputError("build_report: traces come from different shapes");

    AnalysisReport rep;
    rep.n_layers = vanilla.header.model.n_layers;
    rep.clip_pct = clip_pct;
    rep.convergence_vanilla = detail::convergence_layers(vanilla);
    rep.convergence_clvs = detail::convergence_layers(clvs);

    if (scene != nullptr) {
        scene->validate();
        if (scene->n_patches() != vanilla.header.layout.n_vis)
            throw InputError("build_report: scene patch count does not match n_vis");
        rep.a_obj_vanilla.assign(rep.n_layers, 0.0);
        rep.a_obj_clvs.assign(rep.n_layers, 0.0);
        for (const auto& obj : scene->objects) {
            auto sv = object_attention_series(vanilla, obj);
            auto sc = object_attention_series(clvs, obj);
            for (int l = 0; l < rep.n_layers; ++l) {
                rep.a_obj_vanilla[l] += sv[l];
                rep.a_obj_clvs[l] += sc[l];
            }
            rep.object_names.push_back(obj.name);
            rep.per_object_vanilla.push_back(std::move(sv));
            rep.per_object_clvs.push_back(std::move(sc));
        }
        if (!scene->objects.empty()) {
            const double k = static_cast<double>(scene->objects.size());
            for (int l = 0; l < rep.n_layers; ++l) {
                rep.a_obj_vanilla[l] /= k;
                rep.a_obj_clvs[l] /= k;
            }
        }
        rep.relative_increase_pct = relative_increase(rep.a_obj_clvs, rep.a_obj_vanilla, clip_pct);
        rep.peak_layer_vanilla = peak_layer(rep.a_obj_vanilla);
        rep.peak_layer_clvs = peak_layer(rep.a_obj_clvs);
    }

    // Uncertainty/convergence statistics come from the vanilla trace: it
    // carries observational uncertainty for every gate layer.
    std::vector<double> u;
    std::vector<int> flags;
    uncertainty_convergence_pairs(vanilla, u, flags);
    try {
        rep.point_biserial_r = point_biserial(u, flags);
        const auto fit = logistic_fit(u, flags);
        rep.logistic_intercept = fit.intercept;
        rep.logistic_coefficient = fit.coefficient;
    } catch (const StatError& e) {
        rep.stats_note = e.what();
    }
    return rep;
}

inline nlohmann::json report_to_json(const AnalysisReport& rep) {
    nlohmann::json j;
    j["n_layers"] = rep.n_layers;
    j["clip_pct"] = rep.clip_pct;
    j["convergence_layers"] = {{"vanilla", rep.convergence_vanilla},
                               {"clvs", rep.convergence_clvs}};
    if (!rep.a_obj_vanilla.empty()) {
        j["a_obj"] = {{"vanilla", rep.a_obj_vanilla},
                      {"clvs", rep.a_obj_clvs},
                      {"relative_increase_pct", rep.relative_increase_pct}};
        j["peak_layer"] = {{"vanilla", rep.peak_layer_vanilla}, {"clvs", rep.peak_layer_clvs}};
        nlohmann::json per_obj = nlohmann::json::object();
        for (size_t i = 0; i < rep.object_names.size(); ++i)
            per_obj[rep.object_names[i]] = {{"vanilla", rep.per_object_vanilla[i]},
                                            {"clvs", rep.per_object_clvs[i]}};
        j["a_obj_per_object"] = per_obj;
    }
    if (rep.point_biserial_r) {
        j["uncertainty_convergence"] = {{"point_biserial_r", *rep.point_biserial_r},
                                        {"logistic_intercept", *rep.logistic_intercept},
                                        {"logistic_coefficient", *rep.logistic_coefficient}};
    } else {
        j["uncertainty_convergence"] = {{"note", rep.stats_note}};
    }
    return j;
}

// Per-layer CSV: layer, a_obj_vanilla, a_obj_clvs, relative_increase.
inline std::string report_to_csv(const AnalysisReport& rep) {
    std::string csv = "layer,a_obj_vanilla,a_obj_clvs,relative_increase\n";
    auto num = [](double x) { return nlohmann::json(x).dump(); };
    for (int l = 0; l < rep.n_layers; ++l) {
        csv += std::to_string(l + 1);
        csv += ',';
        csv += rep.a_obj_vanilla.empty() ? "" : num(rep.a_obj_vanilla[l]);
        csv += ',';
        csv += rep.a_obj_clvs.empty() ? "" : num(rep.a_obj_clvs[l]);
        csv += ',';
        csv += rep.relative_increase_pct.empty() ? "" : num(rep.relative_increase_pct[l]);
        csv += '\n';
    }
    return csv;
}

} // namespace clvs
