#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clvs/errors.hpp"
#include "clvs/model.hpp"
#include "clvs/ops.hpp"

namespace clvs {

// Minimal deterministic decoder-only forward pass with KV caching. Tokens are
// processed strictly one at a time; causality is structural (a row only ever
// spans the cache built so far). Pre-normalization blocks, no biases, GELU
// feed-forward:
//
//   x += Wo * attn(rmsnorm(x))        with RoPE'd per-head q/k
//   x += W2 * gelu(W1 * rmsnorm(x))
//
// Positions enter only through RoPE, parameterized per token AND per layer:
// layer 1 may see a different index than the remaining layers, which is what
// makes first-layer position overrides well-defined.

struct StepPositions {
    long layer1 = 0; // RoPE index used at layer 1
    long later = 0;  // RoPE index used at layers 2..L
    long at_layer(int layer) const { return layer == 1 ? layer1 : later; }
};

struct SliceBounds {
    int begin = 0;
    int end = 0; // [begin, end) visual positions within the context
    int size() const { return end - begin; }
};

// Per-head attention rows of the current token at one layer. `rows` is
// row-major n_heads x context_len and mutable: hook edits feed value mixing.
struct AttentionRows {
    int layer = 0; // 1-based
    int n_heads = 0;
    int context_len = 0;
    SliceBounds visual;
    double* data = nullptr;

    std::span<double> row(int h) {
        return {data + static_cast<size_t>(h) * context_len, static_cast<size_t>(context_len)};
    }
    std::span<const double> row(int h) const {
        return {data + static_cast<size_t>(h) * context_len, static_cast<size_t>(context_len)};
    }
};

// Attention-intervention hook. on_attention runs between the softmax and
// value mixing; on_layer_end runs after the layer's feed-forward with the
// post-block hidden state. The default implementations make the base class
// an identity hook.
class LayerHook {
public:
    virtual ~LayerHook() = default;
    virtual void on_attention(AttentionRows& rows) { (void)rows; }
    virtual void on_layer_end(int layer, std::span<const double> hidden) {
        (void)layer;
        (void)hidden;
    }
};

// Replaces the computed attention row of the current token (scripted
// scenarios). Returning false keeps the computed row.
class AttentionOverride {
public:
    virtual ~AttentionOverride() = default;
    virtual bool fill_row(int layer, int head, std::span<double> row) const = 0;
};

struct AttentionSnapshot {
    int layer = 0; // 1-based
    int n_heads = 0;
    int context_len = 0;
    SliceBounds visual;
    std::vector<double> rows; // n_heads x context_len

    std::span<const double> row(int h) const {
        return {rows.data() + static_cast<size_t>(h) * context_len,
                static_cast<size_t>(context_len)};
    }
    std::span<const double> visual_slice(int h) const {
        return {rows.data() + static_cast<size_t>(h) * context_len + visual.begin,
                static_cast<size_t>(visual.size())};
    }
};

struct StepOutput {
    std::vector<double> logits;                    // |V_full|
    std::vector<std::vector<double>> layer_hidden; // L x d, post-block
    std::vector<AttentionSnapshot> pre;            // L, before intervention
    std::vector<AttentionSnapshot> post;           // L, after intervention
    std::optional<int> termination_layer;          // 1-based, filled by the caller
};

class KvCache {
public:
    explicit KvCache(const ModelConfig& cfg) : hidden_(cfg.hidden), per_layer_(cfg.n_layers) {}

    int size() const { return tokens_; }

    void append(int layer0, std::span<const double> k, std::span<const double> v) {
        auto& slot = per_layer_[layer0];
        slot.keys.insert(slot.keys.end(), k.begin(), k.end());
        slot.values.insert(slot.values.end(), v.begin(), v.end());
        if (layer0 == static_cast<int>(per_layer_.size()) - 1) ++tokens_;
    }

    // Packed position-major storage: token j's head-h slice starts at
    // j*hidden + h*head_dim.
    const double* keys(int layer0) const { return per_layer_[layer0].keys.data(); }
    const double* values(int layer0) const { return per_layer_[layer0].values.data(); }

private:
    struct LayerSlot {
        std::vector<double> keys;
        std::vector<double> values;
    };
    int hidden_;
    int tokens_ = 0;
    std::vector<LayerSlot> per_layer_;
};

namespace detail {

inline void check_snapshot_row(std::span<const double> row, int layer, int head) {
    double sum = 0.0;
    for (double x : row) {
        if (!(x >= 0.0))
            throw ValidationError("attention row has a negative entry (layer " +
                                  std::to_string(layer) + ", head " + std::to_string(head) + ")");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw ValidationError("attention row sums to " + std::to_string(sum) + " (layer " +
                              std::to_string(layer) + ", head " + std::to_string(head) + ")");
}

} // namespace detail

// Logit lens: final normalization, then unembedding, then softmax. Accepts
// the post-block hidden state of any layer.
inline std::vector<double> layer_probe(std::span<const double> hidden, const Model& model) {
    auto normed = rmsnorm(hidden, model.weights.final_norm_gain);
    auto probs = matvec(model.weights.unembedding, normed);
    softmax_in_place(probs);
    return probs;
}

// Processes one token: appends exactly one K/V entry per layer, invokes the
// hook once per layer on the generating token's attention rows, and returns
// logits plus per-layer taps. `hook` and `row_override` may be null.
inline StepOutput forward_step(const Model& model, KvCache& cache, int token_id,
                               StepPositions pos, SliceBounds visual, LayerHook* hook,
                               const AttentionOverride* row_override = nullptr) {
    const ModelConfig& cfg = model.config;
    if (token_id < 0 || token_id >= cfg.vocab)
        throw InputError("token id " + std::to_string(token_id) + " out of vocabulary (" +
                         std::to_string(cfg.vocab) + ")");

    const int d = cfg.hidden;
    const int dh = cfg.head_dim;
    const int H = cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    StepOutput out;
    out.layer_hidden.reserve(cfg.n_layers);
    out.pre.reserve(cfg.n_layers);
    out.post.reserve(cfg.n_layers);

    std::vector<double> x(model.weights.embedding.row(token_id).begin(),
                          model.weights.embedding.row(token_id).end());

    std::vector<double> normed(d), q(d), k(d), v(d), attn_out(d), proj(d);
    std::vector<double> ffn_hidden(cfg.ffn_dim()), ffn_out(d);

    for (int l0 = 0; l0 < cfg.n_layers; ++l0) {
        const int layer = l0 + 1;
        const LayerWeights& lw = model.weights.layers[l0];

        rmsnorm(normed, x, lw.attn_norm_gain);
        matvec(q, lw.wq, normed);
        matvec(k, lw.wk, normed);
        matvec(v, lw.wv, normed);

        const long p = pos.at_layer(layer);
        for (int h = 0; h < H; ++h) {
            rope_in_place(std::span<double>(q.data() + h * dh, dh), p, cfg.rope_base);
            rope_in_place(std::span<double>(k.data() + h * dh, dh), p, cfg.rope_base);
        }
        cache.append(l0, k, v);

        const int ctx = cache.size();
        std::vector<double> rows(static_cast<size_t>(H) * ctx);
        for (int h = 0; h < H; ++h) {
            std::span<double> row(rows.data() + static_cast<size_t>(h) * ctx, ctx);
            if (row_override != nullptr && row_override->fill_row(layer, h, row)) continue;
            attention_row_strided(row, std::span<const double>(q.data() + h * dh, dh),
                                  cache.keys(l0), ctx, d, static_cast<size_t>(h) * dh, scale);
        }

        AttentionSnapshot snap;
        snap.layer = layer;
        snap.n_heads = H;
        snap.context_len = ctx;
        snap.visual = visual;
        snap.rows = rows;
        for (int h = 0; h < H; ++h) detail::check_snapshot_row(snap.row(h), layer, h);
        out.pre.push_back(snap);

        if (hook != nullptr) {
            AttentionRows view{layer, H, ctx, visual, rows.data()};
            hook->on_attention(view);
        }
        snap.rows = rows;
        out.post.push_back(std::move(snap));

        // Value mixing uses the (possibly modified) rows.
        std::fill(attn_out.begin(), attn_out.end(), 0.0);
        const double* values = cache.values(l0);
        for (int h = 0; h < H; ++h) {
            const double* row = rows.data() + static_cast<size_t>(h) * ctx;
            double* dst = attn_out.data() + h * dh;
            for (int j = 0; j < ctx; ++j) {
                const double w = row[j];
                const double* vj = values + static_cast<size_t>(j) * d + h * dh;
                for (int c = 0; c < dh; ++c) dst[c] += w * vj[c];
            }
        }
        matvec(proj, lw.wo, attn_out);
        for (int c = 0; c < d; ++c) x[c] += proj[c];

        rmsnorm(normed, x, lw.ffn_norm_gain);
        matvec(ffn_hidden, lw.w1, normed);
        for (double& h : ffn_hidden) h = gelu(h);
        matvec(ffn_out, lw.w2, ffn_hidden);
        for (int c = 0; c < d; ++c) x[c] += ffn_out[c];

        out.layer_hidden.push_back(x);
        if (hook != nullptr) hook->on_layer_end(layer, x);
    }

    rmsnorm(normed, x, model.weights.final_norm_gain);
    out.logits = matvec(model.weights.unembedding, normed);
    return out;
}

} // namespace clvs
