#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clvs/engine.hpp"
#include "clvs/session.hpp"
#include "clvs/trace.hpp"

namespace clvs {

// What a generation run applies on top of the plain forward pass. With a
// null session the run is vanilla; trace_config still fills the trace header
// and drives observational uncertainty recording.
struct Intervention {
    ClvsSession* session = nullptr;
    const AttentionOverride* row_override = nullptr;
    ClvsConfig trace_config{};
    bool scripted = false;
};

struct GenerateResult {
    std::vector<int> tokens;
    TraceFile trace;
    std::vector<StepOutput> steps; // one per generated token
};

namespace detail {

inline std::vector<std::vector<double>> visual_heads(const AttentionSnapshot& snap) {
    std::vector<std::vector<double>> heads(snap.n_heads);
    for (int h = 0; h < snap.n_heads; ++h) {
        auto s = snap.visual_slice(h);
        heads[h].assign(s.begin(), s.end());
    }
    return heads;
}

} // namespace detail

// Greedy decoding with per-step tracing. `layer1_positions` holds the RoPE
// indices layer 1 sees for each prompt token (unified or original); layers
// 2..L always see consecutive indices. Generated tokens continue both
// sequences past their last prompt value. Each step that produces a token
// emits one TraceRecord per layer; interventions apply from the final prompt
// position onward, never to earlier prefill positions.
inline GenerateResult generate(const Model& model, const std::vector<int>& prompt_tokens,
                               const TokenLayout& layout,
                               const std::vector<long>& layer1_positions, int max_new,
                               const Intervention& iv = {}) {
    model.validate();
    layout.validate();
    if (layout.generated_so_far != 0)
        throw InputError("generate: layout.generated_so_far must be 0 at the start of a run");
    const int n = layout.prompt_len();
    if (static_cast<int>(prompt_tokens.size()) != n)
        throw InputError("generate: prompt length " + std::to_string(prompt_tokens.size()) +
                         " does not match layout N = " + std::to_string(n));
    if (static_cast<int>(layer1_positions.size()) != n)
        throw InputError("generate: positions length " + std::to_string(layer1_positions.size()) +
                         " does not match prompt length " + std::to_string(n));
    if (max_new < 0) throw InputError("generate: max_new must be >= 0");

    const ClvsConfig trace_cfg = (iv.session != nullptr)
                                     ? iv.session->config()
                                     : iv.trace_config.resolved(model.config.n_layers);
    trace_cfg.validate(model.config.n_layers);

    GenerateResult result;
    result.trace.header.model = model.config;
    result.trace.header.layout = layout;
    result.trace.header.clvs = trace_cfg;
    result.trace.header.seed = model.config.seed;
    result.trace.header.mode = (iv.session != nullptr) ? "clvs" : "vanilla";
    result.trace.header.scripted = iv.scripted;

    KvCache cache(model.config);
    const SliceBounds visual{layout.vis_begin(), layout.vis_end()};

    // Prefill: all prompt positions except the last are processed without any
    // intervention. With max_new = 0 the last position is prefilled too and
    // the trace stays header-only.
    const int prefill_end = (max_new == 0) ? n : n - 1;
    for (int j = 0; j < prefill_end; ++j)
        forward_step(model, cache, prompt_tokens[j], {layer1_positions[j], j}, visual, nullptr);

    const long last_layer1 = layer1_positions.empty() ? -1 : layer1_positions.back();
    const int nv = layout.n_vis;

    for (int t = 0; t < max_new; ++t) {
        const int cur_token = (t == 0) ? prompt_tokens[n - 1] : result.tokens[t - 1];
        const StepPositions pos{(t == 0) ? last_layer1 : last_layer1 + t,
                                static_cast<long>(n - 1 + t)};

        if (iv.session != nullptr) iv.session->begin_step();
        StepOutput out =
            forward_step(model, cache, cur_token, pos, visual, iv.session, iv.row_override);
        if (iv.session != nullptr) out.termination_layer = iv.session->termination_layer();

        result.tokens.push_back(argmax_lowest(out.logits));

        for (int layer = 1; layer <= model.config.n_layers; ++layer) {
            TraceRecord rec;
            rec.step = t;
            rec.layer = layer;
            rec.pre_visual_attention = detail::visual_heads(out.pre[layer - 1]);
            rec.post_visual_attention = detail::visual_heads(out.post[layer - 1]);

            const auto probs = layer_probe(out.layer_hidden[layer - 1], model);
            rec.layer_argmax_token = argmax_lowest(probs);

            if (iv.session != nullptr) {
                rec.memory = iv.session->memory_log()[layer - 1];
                if (rec.memory.empty()) rec.memory.assign(nv, 0.0);
                rec.uncertainty = iv.session->uncertainty_log()[layer - 1];
                rec.terminated =
                    out.termination_layer.has_value() && layer >= *out.termination_layer;
            } else {
                rec.memory.assign(nv, 0.0);
                if (layer >= trace_cfg.gate_start_layer)
                    rec.uncertainty = uncertainty(probs, trace_cfg.topk);
            }
            result.trace.records.push_back(std::move(rec));
        }
        result.steps.push_back(std::move(out));
    }
    return result;
}

} // namespace clvs
