#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "clvs/errors.hpp"
#include "clvs/model.hpp"
#include "clvs/smoothing.hpp"

namespace clvs {

// Trace persistence: one record per (step, layer), JSON-Lines, line 1 is the
// header. Only the visual slice of attention is persisted (H x N_v per
// record); every downstream observable is over visual tokens and full rows
// would grow quadratically with context. nlohmann::json gives sorted keys
// and shortest round-trip doubles, so files are canonical: writing the same
// trace twice yields identical bytes. Extension: .clvstrace.jsonl
//
// For vanilla runs post equals pre, memory is all zeros and terminated stays
// false; uncertainty, when present, is observational.

struct TraceRecord {
    int step = 0;  // 0-based decoding step
    int layer = 0; // 1-based
    std::vector<std::vector<double>> pre_visual_attention;  // H x N_v
    std::vector<std::vector<double>> post_visual_attention; // H x N_v
    std::vector<double> memory;                             // N_v
    std::optional<double> uncertainty; // only for layers >= gate_start_layer
    bool terminated = false;
    int layer_argmax_token = 0;

    bool operator==(const TraceRecord&) const = default;
};

struct TraceHeader {
    ModelConfig model;
    TokenLayout layout;
    ClvsConfig clvs;
    std::string engine_version = kEngineVersion;
    std::uint64_t seed = 0;
    std::string mode = "vanilla"; // "vanilla" | "clvs"
    bool scripted = false;

    bool operator==(const TraceHeader&) const = default;
};

struct TraceFile {
    TraceHeader header;
    std::vector<TraceRecord> records; // sorted by (step, layer), L per step

    bool operator==(const TraceFile&) const = default;
};

namespace detail {

inline nlohmann::json layout_to_json(const TokenLayout& l) {
    return {{"n_sys", l.n_sys},
            {"n_vis", l.n_vis},
            {"n_usr", l.n_usr},
            {"generated_so_far", l.generated_so_far}};
}

inline TokenLayout layout_from_json(const nlohmann::json& j) {
    TokenLayout l;
    l.n_sys = j.at("n_sys").get<int>();
    l.n_vis = j.at("n_vis").get<int>();
    l.n_usr = j.at("n_usr").get<int>();
    l.generated_so_far = j.at("generated_so_far").get<int>();
    return l;
}

inline nlohmann::json clvs_to_json(const ClvsConfig& c) {
    return {{"beta", c.beta},
            {"gamma", c.gamma},
            {"delta", c.delta},
            {"gate_start_layer", c.gate_start_layer},
            {"topk", c.topk}};
}

inline ClvsConfig clvs_from_json(const nlohmann::json& j) {
    ClvsConfig c;
    c.beta = j.at("beta").get<double>();
    c.gamma = j.at("gamma").get<double>();
    c.delta = j.at("delta").get<double>();
    c.gate_start_layer = j.at("gate_start_layer").get<int>();
    c.topk = j.at("topk").get<int>();
    return c;
}

} // namespace detail

inline nlohmann::json trace_record_to_json(const TraceRecord& r) {
    nlohmann::json j{{"step", r.step},
                     {"layer", r.layer},
                     {"pre_visual_attention", r.pre_visual_attention},
                     {"post_visual_attention", r.post_visual_attention},
                     {"memory", r.memory},
                     {"terminated", r.terminated},
                     {"layer_argmax_token", r.layer_argmax_token}};
    if (r.uncertainty) j["uncertainty"] = *r.uncertainty;
    return j;
}

inline TraceRecord trace_record_from_json(const nlohmann::json& j) {
    TraceRecord r;
    r.step = j.at("step").get<int>();
    r.layer = j.at("layer").get<int>();
    r.pre_visual_attention = j.at("pre_visual_attention").get<std::vector<std::vector<double>>>();
    r.post_visual_attention = j.at("post_visual_attention").get<std::vector<std::vector<double>>>();
    r.memory = j.at("memory").get<std::vector<double>>();
    r.terminated = j.at("terminated").get<bool>();
    r.layer_argmax_token = j.at("layer_argmax_token").get<int>();
    if (j.contains("uncertainty")) r.uncertainty = j.at("uncertainty").get<double>();
    return r;
}

namespace detail {

inline void validate_slice(const std::vector<std::vector<double>>& slice, int n_heads, int n_vis,
                           int step, int layer, const char* what) {
    if (static_cast<int>(slice.size()) != n_heads)
        throw ValidationError(std::string(what) + " at (step " + std::to_string(step) +
                              ", layer " + std::to_string(layer) + "): expected " +
                              std::to_string(n_heads) + " heads");
    for (const auto& head : slice) {
        if (static_cast<int>(head.size()) != n_vis)
            throw ValidationError(std::string(what) + " at (step " + std::to_string(step) +
                                  ", layer " + std::to_string(layer) + "): expected " +
                                  std::to_string(n_vis) + " entries per head");
        double sum = 0.0;
        for (double x : head) {
            if (!(x >= 0.0))
                throw ValidationError(std::string(what) + " at (step " + std::to_string(step) +
                                      ", layer " + std::to_string(layer) + "): negative entry");
            sum += x;
        }
        // Slices of normalized rows: each head's visual mass is at most 1.
        if (sum > 1.0 + 1e-6)
            throw ValidationError(std::string(what) + " at (step " + std::to_string(step) +
                                  ", layer " + std::to_string(layer) + "): visual mass " +
                                  std::to_string(sum) + " exceeds 1");
    }
}

} // namespace detail

inline void validate_trace(const TraceFile& trace) {
    const int L = trace.header.model.n_layers;
    const int H = trace.header.model.n_heads;
    const int nv = trace.header.layout.n_vis;
    if (trace.records.size() % static_cast<size_t>(L) != 0)
        throw ValidationError("record count " + std::to_string(trace.records.size()) +
                              " is not a multiple of n_layers = " + std::to_string(L));
    for (size_t i = 0; i < trace.records.size(); ++i) {
        const TraceRecord& r = trace.records[i];
        const int expect_step = static_cast<int>(i) / L;
        const int expect_layer = static_cast<int>(i) % L + 1;
        if (r.step != expect_step || r.layer != expect_layer)
            throw ValidationError("records out of order at index " + std::to_string(i) +
                                  ": got (step " + std::to_string(r.step) + ", layer " +
                                  std::to_string(r.layer) + "), expected (step " +
                                  std::to_string(expect_step) + ", layer " +
                                  std::to_string(expect_layer) + ")");
        detail::validate_slice(r.pre_visual_attention, H, nv, r.step, r.layer, "pre attention");
        detail::validate_slice(r.post_visual_attention, H, nv, r.step, r.layer, "post attention");
        if (static_cast<int>(r.memory.size()) != nv)
            throw ValidationError("memory at (step " + std::to_string(r.step) + ", layer " +
                                  std::to_string(r.layer) + "): expected " + std::to_string(nv) +
                                  " entries");
        if (r.uncertainty && r.layer < trace.header.clvs.gate_start_layer)
            throw ValidationError("uncertainty present below gate_start_layer at (step " +
                                  std::to_string(r.step) + ", layer " + std::to_string(r.layer) +
                                  ")");
    }
}

inline nlohmann::json trace_header_to_json(const TraceHeader& h) {
    return {{"model", config_to_json(h.model)},
            {"layout", detail::layout_to_json(h.layout)},
            {"clvs", detail::clvs_to_json(h.clvs)},
            {"engine_version", h.engine_version},
            {"seed", h.seed},
            {"mode", h.mode},
            {"scripted", h.scripted}};
}

inline TraceHeader trace_header_from_json(const nlohmann::json& j) {
    TraceHeader h;
    h.model = config_from_json(j.at("model"));
    h.layout = detail::layout_from_json(j.at("layout"));
    h.clvs = detail::clvs_from_json(j.at("clvs"));
    h.engine_version = j.at("engine_version").get<std::string>();
    h.seed = j.at("seed").get<std::uint64_t>();
    h.mode = j.at("mode").get<std::string>();
    h.scripted = j.at("scripted").get<bool>();
    return h;
}

inline std::string trace_to_string(const TraceFile& trace) {
    validate_trace(trace);
    std::string out = trace_header_to_json(trace.header).dump();
    out += '\n';
    for (const TraceRecord& r : trace.records) {
        out += trace_record_to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline void write_trace(const std::string& path, const TraceFile& trace) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << trace_to_string(trace);
    if (!out) throw IoError("failed to write '" + path + "'");
}

inline TraceFile read_trace(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open trace file '" + path + "'");

    TraceFile trace;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) throw ParseError("empty line", line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
        try {
            if (line_no == 1)
                trace.header = trace_header_from_json(j);
            else
                trace.records.push_back(trace_record_from_json(j));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    if (line_no == 0) throw ParseError("missing header", 1);
    validate_trace(trace);
    return trace;
}

// FNV-1a 64-bit over raw bytes; used for golden-file checks and run summaries.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for checksum");
    std::ostringstream ss;
    ss << in.rdbuf();
    return fnv1a64(ss.str());
}

} // namespace clvs
