#pragma once

#include <vector>

#include "clvs/engine.hpp"
#include "clvs/model.hpp"

namespace clvs {

// Scripted attention: per-layer, per-head visual rows injected in place of
// the computed attention of the generating token. QK is bypassed for that
// row but value mixing and the feed-forward still run, so probes and
// uncertainty gating stay meaningful. The schedule models a decay scenario:
// a designated key token whose raw weight collapses at `decay_layer`.
struct ScriptedSchedule {
    int key_token = 0;   // visual index in [0, N_v)
    int decay_layer = 0; // 1-based
    std::vector<std::vector<std::vector<double>>> rows; // L x H x N_v

    void validate(const ModelConfig& model, const TokenLayout& layout) const {
        if (static_cast<int>(rows.size()) != model.n_layers)
            throw ConfigError("scripted.rows: expected one entry per layer (" +
                              std::to_string(model.n_layers) + ")");
        for (size_t l = 0; l < rows.size(); ++l) {
            if (static_cast<int>(rows[l].size()) != model.n_heads)
                throw ConfigError("scripted.rows[" + std::to_string(l) +
                                  "]: expected one row per head (" +
                                  std::to_string(model.n_heads) + ")");
            for (size_t h = 0; h < rows[l].size(); ++h) {
                const auto& slice = rows[l][h];
                if (static_cast<int>(slice.size()) != layout.n_vis)
                    throw ConfigError("scripted.rows[" + std::to_string(l) + "][" +
                                      std::to_string(h) + "]: expected n_vis = " +
                                      std::to_string(layout.n_vis) + " entries");
                double sum = 0.0;
                for (double x : slice) {
                    if (!(x >= 0.0))
                        throw ConfigError("scripted.rows[" + std::to_string(l) + "][" +
                                          std::to_string(h) + "]: negative entry");
                    sum += x;
                }
                if (sum > 1.0)
                    throw ConfigError("scripted.rows[" + std::to_string(l) + "][" +
                                      std::to_string(h) + "]: visual mass " +
                                      std::to_string(sum) + " exceeds 1");
            }
        }
        if (key_token < 0 || key_token >= layout.n_vis)
            throw ConfigError("scripted.key_token: must be a visual index in [0, n_vis)");
        if (decay_layer < 1 || decay_layer > model.n_layers)
            throw ConfigError("scripted.decay_layer: must be in [1, n_layers]");
        // The remaining mass goes to non-visual positions, so at least one
        // must exist in every context.
        if (layout.n_sys + layout.n_usr < 1)
            throw ConfigError("scripted mode requires n_sys + n_usr >= 1");
    }
};

// Engine-side injector: visual positions take the scheduled slice, the
// remaining mass is spread uniformly over the non-visual context.
class ScriptedInjector final : public AttentionOverride {
public:
    ScriptedInjector(const ScriptedSchedule& schedule, const TokenLayout& layout)
        : schedule_(&schedule), vis_begin_(layout.vis_begin()), vis_end_(layout.vis_end()) {}

    bool fill_row(int layer, int head, std::span<double> row) const override {
        const auto& slice = schedule_->rows[layer - 1][head];
        double vis_sum = 0.0;
        for (double x : slice) vis_sum += x;
        const int ctx = static_cast<int>(row.size());
        const int n_nonvis = ctx - static_cast<int>(slice.size());
        const double fill = (1.0 - vis_sum) / static_cast<double>(n_nonvis);
        for (int j = 0; j < ctx; ++j) {
            if (j >= vis_begin_ && j < vis_end_)
                row[j] = slice[j - vis_begin_];
            else
                row[j] = fill;
        }
        return true;
    }

private:
    const ScriptedSchedule* schedule_;
    int vis_begin_;
    int vis_end_;
};

} // namespace clvs
