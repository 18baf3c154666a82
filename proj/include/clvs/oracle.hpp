#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "clvs/errors.hpp"
#include "clvs/model.hpp"
#include "clvs/scripted.hpp"
#include "clvs/smoothing.hpp"

namespace clvs {

// Independent reference decoder. No KV cache, no hooks: every step recomputes
// the whole sequence layer by layer, and smoothing (when configured) is a
// literal transcription of the interpolation/renormalization/memory-update
// equations applied to every generating position. It deliberately shares no
// numeric kernels with the engine; agreement between the two is the
// equivalence check, so this file keeps its own naive helpers.
//
// Replay detail: attention modifications at earlier generating positions
// changed those positions' hidden states (and so their cached keys/values)
// when they were processed live. A faithful recompute therefore replays a
// fresh smoothing state for EVERY position from the final prompt token
// onward, each evolving independently across layers.

struct OracleResult {
    std::vector<int> tokens;
    // memory_trajectory[step][layer-1] = memory after that layer's update for
    // the step's generating position (empty unless smoothing is configured).
    std::vector<std::vector<std::vector<double>>> memory_trajectory;
};

namespace oracle_detail {

using Vec = std::vector<double>;

inline Vec o_matvec(const Matrix& m, const Vec& x) {
    Vec y(m.rows, 0.0);
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c) y[r] += m.at(r, c) * x[c];
    return y;
}

inline Vec o_rmsnorm(const Vec& x, const Vec& gain) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + 1e-6);
    Vec y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gain[i];
    return y;
}

inline void o_softmax(Vec& v) {
    double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

inline void o_rope(Vec& vec, int head, int head_dim, long position, double base) {
    for (int i = 0; i < head_dim; i += 2) {
        const double inv_freq =
            std::pow(base, -static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(position) * inv_freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const int idx = head * head_dim + i;
        const double v0 = vec[idx];
        const double v1 = vec[idx + 1];
        vec[idx] = v0 * c - v1 * s;
        vec[idx + 1] = v0 * s + v1 * c;
    }
}

inline double o_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double o_uncertainty(Vec probs, int topk) {
    if (topk == 1) return 0.0;
    std::sort(probs.begin(), probs.end(), std::greater<double>());
    probs.resize(topk);
    double sum = 0.0;
    for (double p : probs) sum += p;
    double ent = 0.0;
    for (double p : probs) {
        const double q = p / sum;
        if (q > 0.0) ent -= q * std::log(q);
    }
    return ent / std::log(static_cast<double>(topk));
}

// Smoothing state of one generating position within one step's recompute.
struct PositionState {
    Vec memory;
    bool terminated = false;
};

} // namespace oracle_detail

inline OracleResult oracle_forward(const Model& model, const std::vector<int>& prompt,
                                   const TokenLayout& layout,
                                   const std::vector<long>& layer1_positions, int max_new,
                                   const std::optional<ClvsConfig>& clvs_config,
                                   const ScriptedSchedule* scripted = nullptr) {
    using namespace oracle_detail;

    model.validate();
    layout.validate();
    const int n = layout.prompt_len();
    if (static_cast<int>(prompt.size()) != n) throw InputError("oracle: prompt/layout mismatch");
    if (static_cast<int>(layer1_positions.size()) != n)
        throw InputError("oracle: positions/prompt mismatch");
    for (int tok : prompt)
        if (tok < 0 || tok >= model.config.vocab) throw InputError("oracle: token out of vocabulary");

    const ModelConfig& cfg = model.config;
    const int L = cfg.n_layers;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim;
    const int d = cfg.hidden;
    const int vb = layout.vis_begin();
    const int ve = layout.vis_end();
    const int nv = layout.n_vis;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::optional<ClvsConfig> clvs = clvs_config;
    if (clvs) {
        clvs = clvs->resolved(L);
        clvs->validate(L);
    }

    std::vector<int> seq = prompt;
    std::vector<long> pos1 = layer1_positions;

    OracleResult result;

    for (int t = 0; t < max_new; ++t) {
        const int total = n + t;

        // Hidden states of the full sequence, recomputed from scratch.
        std::vector<Vec> hidden(total);
        for (int p = 0; p < total; ++p) {
            auto row = model.weights.embedding.row(seq[p]);
            hidden[p].assign(row.begin(), row.end());
        }

        // One smoothing state per generating position (final prompt token and
        // every generated token), replayed from layer 1.
        std::vector<PositionState> state(total);
        std::vector<std::vector<double>> mem_log(L);

        for (int l = 1; l <= L; ++l) {
            const LayerWeights& lw = model.weights.layers[l - 1];

            std::vector<Vec> q(total), k(total), v(total);
            for (int p = 0; p < total; ++p) {
                Vec xa = o_rmsnorm(hidden[p], lw.attn_norm_gain);
                q[p] = o_matvec(lw.wq, xa);
                k[p] = o_matvec(lw.wk, xa);
                v[p] = o_matvec(lw.wv, xa);
                const long pp = (l == 1) ? pos1[p] : static_cast<long>(p);
                for (int h = 0; h < H; ++h) {
                    o_rope(q[p], h, dh, pp, cfg.rope_base);
                    o_rope(k[p], h, dh, pp, cfg.rope_base);
                }
            }

            for (int p = 0; p < total; ++p) {
                const int ctx = p + 1;
                const bool generating = p >= n - 1;

                // Per-head causal attention rows for position p.
                std::vector<Vec> rows(H);
                for (int h = 0; h < H; ++h) {
                    if (scripted != nullptr && generating) {
                        const auto& slice = scripted->rows[l - 1][h];
                        double vis_sum = 0.0;
                        for (double x : slice) vis_sum += x;
                        const double fill = (1.0 - vis_sum) / static_cast<double>(ctx - nv);
                        rows[h].assign(ctx, fill);
                        for (int i = 0; i < nv; ++i) rows[h][vb + i] = slice[i];
                    } else {
                        rows[h].resize(ctx);
                        for (int j = 0; j < ctx; ++j) {
                            double acc = 0.0;
                            for (int c = 0; c < dh; ++c)
                                acc += q[p][h * dh + c] * k[j][h * dh + c];
                            rows[h][j] = acc * scale;
                        }
                        o_softmax(rows[h]);
                    }
                }

                if (clvs && generating) {
                    PositionState& st = state[p];
                    if (l == 1) {
                        st.memory.assign(nv, 0.0);
                        for (int h = 0; h < H; ++h)
                            for (int i = 0; i < nv; ++i)
                                st.memory[i] = std::max(st.memory[i], rows[h][vb + i]);
                    } else if (!st.terminated) {
                        std::vector<Vec> pre(H, Vec(nv));
                        for (int h = 0; h < H; ++h)
                            for (int i = 0; i < nv; ++i) pre[h][i] = rows[h][vb + i];
                        for (int h = 0; h < H; ++h) {
                            for (int i = 0; i < nv; ++i)
                                rows[h][vb + i] = clvs->beta * pre[h][i] +
                                                  (1.0 - clvs->beta) * st.memory[i];
                            double sum = 0.0;
                            for (double x : rows[h]) sum += x;
                            for (double& x : rows[h]) x /= sum;
                        }
                        for (int i = 0; i < nv; ++i) {
                            double mx = 0.0;
                            for (int h = 0; h < H; ++h) mx = std::max(mx, pre[h][i]);
                            st.memory[i] = clvs->gamma * st.memory[i] + (1.0 - clvs->gamma) * mx;
                        }
                    }
                    if (p == total - 1) mem_log[l - 1] = st.memory;
                }

                // Value mixing and output projection.
                Vec attn(d, 0.0);
                for (int h = 0; h < H; ++h)
                    for (int j = 0; j < ctx; ++j)
                        for (int c = 0; c < dh; ++c)
                            attn[h * dh + c] += rows[h][j] * v[j][h * dh + c];
                Vec proj = o_matvec(lw.wo, attn);
                for (int c = 0; c < d; ++c) hidden[p][c] += proj[c];
            }

            for (int p = 0; p < total; ++p) {
                Vec xf = o_rmsnorm(hidden[p], lw.ffn_norm_gain);
                Vec f1 = o_matvec(lw.w1, xf);
                for (double& x : f1) x = o_gelu(x);
                Vec f2 = o_matvec(lw.w2, f1);
                for (int c = 0; c < d; ++c) hidden[p][c] += f2[c];
            }

            if (clvs && l >= clvs->gate_start_layer) {
                for (int p = n - 1; p < total; ++p) {
                    PositionState& st = state[p];
                    if (st.terminated) continue;
                    Vec probs = o_matvec(model.weights.unembedding,
                                         o_rmsnorm(hidden[p], model.weights.final_norm_gain));
                    o_softmax(probs);
                    if (o_uncertainty(std::move(probs), clvs->topk) < clvs->delta)
                        st.terminated = true;
                }
            }
        }

        Vec logits = o_matvec(model.weights.unembedding,
                              o_rmsnorm(hidden[total - 1], model.weights.final_norm_gain));
        int best = 0;
        for (int i = 1; i < static_cast<int>(logits.size()); ++i)
            if (logits[i] > logits[best]) best = i;

        result.tokens.push_back(best);
        if (clvs) result.memory_trajectory.push_back(std::move(mem_log));

        seq.push_back(best);
        pos1.push_back(pos1.back() + 1);
    }
    return result;
}

} // namespace clvs
