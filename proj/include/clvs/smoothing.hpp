#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "clvs/errors.hpp"
#include "clvs/model.hpp"

namespace clvs {

// Cross-layer vision smoothing primitives. A vision memory carries smoothed
// visual-attention mass across layers within one decoding step: it is
// initialized from the first layer's head-max visual attention, interpolated
// into each later layer's visual attention, and updated from each layer's
// original (pre-smoothing) visual attention.

struct ClvsConfig {
    double beta = 0.8;        // smoothing weight on the current layer's attention
    double gamma = 0.8;       // memory retention (soft window size)
    double delta = 0.5;       // uncertainty threshold for termination
    int gate_start_layer = 0; // first layer at which uncertainty is evaluated; 0 = default
    int topk = 10;            // entropy is computed over the top-k tokens

    static int default_gate_start(int n_layers) {
        return static_cast<int>(std::ceil((n_layers + 1) / 2.0));
    }

    // Resolves the gate start for a concrete depth (ceil((L+1)/2) unless set).
    ClvsConfig resolved(int n_layers) const {
        ClvsConfig c = *this;
        if (c.gate_start_layer == 0) c.gate_start_layer = default_gate_start(n_layers);
        return c;
    }

    void validate(int n_layers) const {
        if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("clvs.beta: must be in [0,1]");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("clvs.gamma: must be in [0,1]");
        if (!(delta >= 0.0 && delta <= 1.0)) throw ConfigError("clvs.delta: must be in [0,1]");
        if (gate_start_layer < 1 || gate_start_layer > n_layers)
            throw ConfigError("clvs.gate_start_layer: must be in [1, n_layers]");
        if (topk < 1) throw ConfigError("clvs.topk: must be >= 1");
    }
};

struct VisionMemory {
    std::vector<double> values; // length N_v, entries in [0, 1]
    int layer_of_last_update = 0;

    bool initialized() const { return !values.empty(); }
};

// Position indices for layer 1 under unified visual positions: system tokens
// keep 0..N_s-1, every visual token is pinned to index N_s, user tokens
// continue at N_s+1..N_s+N_i, and generated tokens (when present) continue
// consecutively after the user span. The index range stays contiguous: the
// maximum prompt index is N_s + N_i.
inline std::vector<long> unified_positions(const TokenLayout& layout) {
    layout.validate();
    std::vector<long> pos;
    pos.reserve(layout.prompt_len() + layout.generated_so_far);
    for (int i = 0; i < layout.n_sys; ++i) pos.push_back(i);
    for (int i = 0; i < layout.n_vis; ++i) pos.push_back(layout.n_sys);
    for (int i = 0; i < layout.n_usr; ++i) pos.push_back(layout.n_sys + 1 + i);
    for (int g = 0; g < layout.generated_so_far; ++g)
        pos.push_back(layout.n_sys + layout.n_usr + 1 + g);
    return pos;
}

// The vanilla counterpart: consecutive indices 0..N-1 (+ generated).
inline std::vector<long> original_positions(const TokenLayout& layout) {
    layout.validate();
    std::vector<long> pos(layout.prompt_len() + layout.generated_so_far);
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<long>(i);
    return pos;
}

// m[i] = max over heads of the layer-1 visual attention at i.
inline VisionMemory init_memory(std::span<const std::vector<double>> layer1_visual_attention) {
    if (layer1_visual_attention.empty()) throw ConfigError("init_memory: no attention heads");
    const size_t nv = layer1_visual_attention[0].size();
    VisionMemory m;
    m.values.assign(nv, 0.0);
    for (const auto& head : layer1_visual_attention) {
        if (head.size() != nv) throw InputError("init_memory: head length mismatch");
        for (size_t i = 0; i < nv; ++i) m.values[i] = std::max(m.values[i], head[i]);
    }
    m.layer_of_last_update = 1;
    return m;
}

// Elementwise convex combination: beta * lambda + (1 - beta) * memory.
inline std::vector<double> smooth(std::span<const double> lambda_h, const VisionMemory& memory,
                                  double beta) {
    if (lambda_h.size() != memory.values.size())
        throw InputError("smooth: attention/memory length mismatch");
    std::vector<double> out(lambda_h.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = beta * lambda_h[i] + (1.0 - beta) * memory.values[i];
    return out;
}

// Rescales a nonnegative row to sum 1, preserving proportions. An all-zero
// row cannot come out of a softmax; hitting one means the hook state is
// corrupted.
inline void renormalize_in_place(std::span<double> row) {
    double sum = 0.0;
    for (double x : row) {
        if (!(x >= 0.0)) throw InputError("renormalize: negative entry");
        sum += x;
    }
    if (!(sum > 0.0)) throw ValidationError("renormalize: all-zero attention row");
    for (double& x : row) x /= sum;
}

inline std::vector<double> renormalize(std::vector<double> row) {
    renormalize_in_place(row);
    return row;
}

// m <- gamma * m + (1 - gamma) * max over heads of the current layer's
// ORIGINAL (pre-smoothing) visual attention.
inline VisionMemory update_memory(const VisionMemory& memory,
                                  std::span<const std::vector<double>> current_visual_attention,
                                  double gamma, int layer) {
    if (current_visual_attention.empty()) throw ConfigError("update_memory: no attention heads");
    const size_t nv = memory.values.size();
    std::vector<double> head_max(nv, 0.0);
    for (const auto& head : current_visual_attention) {
        if (head.size() != nv) throw InputError("update_memory: attention/memory length mismatch");
        for (size_t i = 0; i < nv; ++i) head_max[i] = std::max(head_max[i], head[i]);
    }
    VisionMemory out;
    out.values.resize(nv);
    for (size_t i = 0; i < nv; ++i)
        out.values[i] = gamma * memory.values[i] + (1.0 - gamma) * head_max[i];
    out.layer_of_last_update = layer;
    return out;
}

// Normalized top-k entropy: select the k largest probabilities, renormalize
// them to sum 1, and divide their Shannon entropy by log k. Result is in
// [0, 1]; k = 1 is defined as 0.
inline double uncertainty(std::span<const double> probs, int topk) {
    if (topk < 1) throw ConfigError("uncertainty: topk must be >= 1");
    if (topk > static_cast<int>(probs.size()))
        throw InputError("uncertainty: topk exceeds vocabulary size");
    if (topk == 1) return 0.0;

    std::vector<double> top(probs.begin(), probs.end());
    std::nth_element(top.begin(), top.begin() + (topk - 1), top.end(), std::greater<double>());
    top.resize(topk);

    double sum = 0.0;
    for (double p : top) sum += p;
    double entropy = 0.0;
    for (double p : top) {
        const double q = p / sum;
        if (q > 0.0) entropy -= q * std::log(q);
    }
    return entropy / std::log(static_cast<double>(topk));
}

} // namespace clvs
