#pragma once

#include <optional>
#include <span>
#include <vector>

#include "clvs/engine.hpp"
#include "clvs/smoothing.hpp"

namespace clvs {

// Per-step smoothing state driven by the engine hook, layer by layer:
//
//   layer 1           record the memory from head-max visual attention;
//                     the attention itself is not modified (there is no
//                     previous memory to smooth with).
//   layers 2..L       while not terminated: per head, substitute the
//                     smoothed visual slice, renormalize the full row, then
//                     update the memory from the pre-smoothing attention.
//   gate layers       after the block output is available, probe the hidden
//                     state and evaluate uncertainty; once it falls below
//                     delta, smoothing (and memory updates) stop for the
//                     rest of the step. Layer l is smoothed using the
//                     pre-l decision, so termination takes effect at l+1.
//
// The memory is reinitialized at layer 1 of every decoding step; state never
// crosses steps. A session is owned by exactly one generation loop.
class ClvsSession final : public LayerHook {
public:
    ClvsSession(const Model& model, const ClvsConfig& config)
        : model_(&model), config_(config.resolved(model.config.n_layers)) {
        config_.validate(model.config.n_layers);
    }

    const ClvsConfig& config() const { return config_; }

    void begin_step() {
        memory_ = VisionMemory{};
        terminated_ = false;
        termination_layer_.reset();
        last_attention_layer_ = 0;
        const size_t L = static_cast<size_t>(model_->config.n_layers);
        memory_log_.assign(L, {});
        uncertainty_log_.assign(L, std::nullopt);
    }

    void on_attention(AttentionRows& rows) override {
        if (rows.layer != last_attention_layer_ + 1)
            throw ProtocolError("clvs hook invoked at layer " + std::to_string(rows.layer) +
                                " after layer " + std::to_string(last_attention_layer_));
        last_attention_layer_ = rows.layer;

        const int nv = rows.visual.size();
        if (rows.layer == 1) {
            std::vector<std::vector<double>> heads(rows.n_heads);
            for (int h = 0; h < rows.n_heads; ++h) heads[h] = visual_slice(rows, h);
            memory_ = init_memory(heads);
        } else if (!terminated_) {
            // Original visual attention, captured before any head is smoothed.
            std::vector<std::vector<double>> pre(rows.n_heads);
            for (int h = 0; h < rows.n_heads; ++h) pre[h] = visual_slice(rows, h);

            for (int h = 0; h < rows.n_heads; ++h) {
                auto smoothed = smooth(pre[h], memory_, config_.beta);
                auto row = rows.row(h);
                for (int i = 0; i < nv; ++i) row[rows.visual.begin + i] = smoothed[i];
                renormalize_in_place(row);
            }
            memory_ = update_memory(memory_, pre, config_.gamma, rows.layer);
        }
        memory_log_[rows.layer - 1] = memory_.values;
    }

    void on_layer_end(int layer, std::span<const double> hidden) override {
        if (terminated_ || layer < config_.gate_start_layer) return;
        const double u = uncertainty(layer_probe(hidden, *model_), config_.topk);
        uncertainty_log_[layer - 1] = u;
        if (u < config_.delta) {
            terminated_ = true;
            termination_layer_ = layer;
        }
    }

    bool terminated() const { return terminated_; }
    std::optional<int> termination_layer() const { return termination_layer_; }
    const VisionMemory& memory() const { return memory_; }

    // Per-layer logs for the step in progress (index = layer - 1). Memory
    // entries after termination hold the frozen value.
    const std::vector<std::vector<double>>& memory_log() const { return memory_log_; }
    const std::vector<std::optional<double>>& uncertainty_log() const { return uncertainty_log_; }

private:
    static std::vector<double> visual_slice(const AttentionRows& rows, int h) {
        auto row = rows.row(h);
        return {row.begin() + rows.visual.begin, row.begin() + rows.visual.end};
    }

    const Model* model_;
    ClvsConfig config_;
    VisionMemory memory_;
    bool terminated_ = false;
    std::optional<int> termination_layer_;
    int last_attention_layer_ = 0;
    std::vector<std::vector<double>> memory_log_;
    std::vector<std::optional<double>> uncertainty_log_;
};

} // namespace clvs
