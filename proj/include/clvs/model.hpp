#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clvs/errors.hpp"
#include "clvs/ops.hpp"

namespace clvs {

constexpr const char* kEngineVersion = "0.1.0";

// Feed-forward width is fixed at 4x the hidden size; it is derived, not a
// model-file field.
constexpr int kFfnMult = 4;

struct ModelConfig {
    int n_layers = 0;            // L
    int n_heads = 0;             // H
    int head_dim = 0;            // d_h
    int hidden = 0;              // d = H * d_h
    int vocab = 0;               // |V_full|
    double rope_base = 10000.0;
    std::uint64_t seed = 0;

    int ffn_dim() const { return kFfnMult * hidden; }

    void validate() const {
        if (n_layers < 2) throw ConfigError("model.n_layers: must be >= 2");
        if (n_heads < 1) throw ConfigError("model.n_heads: must be >= 1");
        if (head_dim < 2 || head_dim % 2 != 0)
            throw ConfigError("model.head_dim: must be even and >= 2");
        if (hidden != n_heads * head_dim)
            throw ConfigError("model.hidden: must equal n_heads * head_dim");
        if (vocab < 10) throw ConfigError("model.vocab: must be >= 10");
        if (!(rope_base > 0.0)) throw ConfigError("model.rope_base: must be positive");
    }
};

// Token-span layout of the prompt: N_s system tokens, then N_v visual tokens,
// then N_i user tokens. Position indices derive from it.
struct TokenLayout {
    int n_sys = 0;
    int n_vis = 0;
    int n_usr = 0;
    int generated_so_far = 0;

    int prompt_len() const { return n_sys + n_vis + n_usr; } // N
    int vis_begin() const { return n_sys; }
    int vis_end() const { return n_sys + n_vis; }

    void validate() const {
        if (n_sys < 0) throw ConfigError("layout.n_sys: must be >= 0");
        if (n_vis < 1) throw ConfigError("layout.n_vis: must be >= 1");
        if (n_usr < 0) throw ConfigError("layout.n_usr: must be >= 0");
        if (generated_so_far < 0) throw ConfigError("layout.generated_so_far: must be >= 0");
    }
};

struct LayerWeights {
    Matrix wq, wk, wv, wo; // d x d
    Matrix w1;             // ffn_dim x d
    Matrix w2;             // d x ffn_dim
    std::vector<double> attn_norm_gain; // d
    std::vector<double> ffn_norm_gain;  // d
};

struct ModelWeights {
    Matrix embedding;   // vocab x d
    Matrix unembedding; // vocab x d
    std::vector<double> final_norm_gain; // d
    std::vector<LayerWeights> layers;
};

struct Model {
    ModelConfig config;
    ModelWeights weights;

    void validate() const;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const std::string& name) {
    for (double x : v)
        if (!std::isfinite(x)) throw ValidationError("tensor '" + name + "' has non-finite values");
}

inline void check_shape(const Matrix& m, int rows, int cols, const std::string& name) {
    if (m.rows != rows || m.cols != cols)
        throw ValidationError("tensor '" + name + "' has shape " + std::to_string(m.rows) + "x" +
                              std::to_string(m.cols) + ", expected " + std::to_string(rows) + "x" +
                              std::to_string(cols));
    check_finite(m.data, name);
}

inline void check_vec(const std::vector<double>& v, int len, const std::string& name) {
    if (static_cast<int>(v.size()) != len)
        throw ValidationError("tensor '" + name + "' has length " + std::to_string(v.size()) +
                              ", expected " + std::to_string(len));
    check_finite(v, name);
}

} // namespace detail

inline void Model::validate() const {
    config.validate();
    const int d = config.hidden;
    const int f = config.ffn_dim();
    detail::check_shape(weights.embedding, config.vocab, d, "embedding");
    detail::check_shape(weights.unembedding, config.vocab, d, "unembedding");
    detail::check_vec(weights.final_norm_gain, d, "final_norm");
    if (static_cast<int>(weights.layers.size()) != config.n_layers)
        throw ValidationError("model has " + std::to_string(weights.layers.size()) +
                              " layers, config says " + std::to_string(config.n_layers));
    for (int i = 0; i < config.n_layers; ++i) {
        const auto& lw = weights.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        detail::check_shape(lw.wq, d, d, p + "wq");
        detail::check_shape(lw.wk, d, d, p + "wk");
        detail::check_shape(lw.wv, d, d, p + "wv");
        detail::check_shape(lw.wo, d, d, p + "wo");
        detail::check_shape(lw.w1, f, d, p + "w1");
        detail::check_shape(lw.w2, d, f, p + "w2");
        detail::check_vec(lw.attn_norm_gain, d, p + "attn_norm");
        detail::check_vec(lw.ffn_norm_gain, d, p + "ffn_norm");
    }
}

// ---------------------------------------------------------------------------
// Model file: a single JSON document. "config" holds the ModelConfig fields,
// "tensors" maps each named tensor to {"shape": [...], "values": [...]} with
// row-major values. nlohmann::json sorts keys and prints doubles with
// shortest round-trip precision, so serialization is canonical: identical
// models produce identical bytes.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json tensor_to_json(const Matrix& m) {
    return {{"shape", {m.rows, m.cols}}, {"values", m.data}};
}

inline nlohmann::json tensor_to_json(const std::vector<double>& v) {
    return {{"shape", {static_cast<int>(v.size())}}, {"values", v}};
}

inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& name) {
    const auto& shape = j.at("shape");
    if (!shape.is_array() || shape.size() != 2)
        throw ParseError("tensor '" + name + "': expected 2-d shape");
    Matrix m(shape[0].get<int>(), shape[1].get<int>());
    const auto& vals = j.at("values");
    if (static_cast<int>(vals.size()) != m.rows * m.cols)
        throw ParseError("tensor '" + name + "': value count does not match shape");
    m.data = vals.get<std::vector<double>>();
    return m;
}

inline std::vector<double> vector_from_json(const nlohmann::json& j, const std::string& name) {
    const auto& shape = j.at("shape");
    if (!shape.is_array() || shape.size() != 1)
        throw ParseError("tensor '" + name + "': expected 1-d shape");
    auto v = j.at("values").get<std::vector<double>>();
    if (static_cast<int>(v.size()) != shape[0].get<int>())
        throw ParseError("tensor '" + name + "': value count does not match shape");
    return v;
}

} // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"head_dim", c.head_dim},
            {"hidden", c.hidden},     {"vocab", c.vocab},       {"rope_base", c.rope_base},
            {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.rope_base = j.at("rope_base").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

inline std::string model_to_string(const Model& model) {
    nlohmann::json tensors;
    tensors["embedding"] = detail::tensor_to_json(model.weights.embedding);
    tensors["unembedding"] = detail::tensor_to_json(model.weights.unembedding);
    tensors["final_norm"] = detail::tensor_to_json(model.weights.final_norm_gain);
    for (int i = 0; i < model.config.n_layers; ++i) {
        const auto& lw = model.weights.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        tensors[p + "wq"] = detail::tensor_to_json(lw.wq);
        tensors[p + "wk"] = detail::tensor_to_json(lw.wk);
        tensors[p + "wv"] = detail::tensor_to_json(lw.wv);
        tensors[p + "wo"] = detail::tensor_to_json(lw.wo);
        tensors[p + "w1"] = detail::tensor_to_json(lw.w1);
        tensors[p + "w2"] = detail::tensor_to_json(lw.w2);
        tensors[p + "attn_norm"] = detail::tensor_to_json(lw.attn_norm_gain);
        tensors[p + "ffn_norm"] = detail::tensor_to_json(lw.ffn_norm_gain);
    }
    nlohmann::json doc{{"config", config_to_json(model.config)}, {"tensors", tensors}};
    return doc.dump() + "\n";
}

inline void save_model(const std::string& path, const Model& model) {
    model.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << model_to_string(model);
    if (!out) throw IoError("failed to write '" + path + "'");
}

inline Model model_from_json(const nlohmann::json& doc) {
    Model model;
    model.config = config_from_json(doc.at("config"));
    model.config.validate();
    const auto& tensors = doc.at("tensors");
    auto mat = [&](const std::string& name) {
        if (!tensors.contains(name)) throw ParseError("missing tensor '" + name + "'");
        return detail::matrix_from_json(tensors.at(name), name);
    };
    auto vec = [&](const std::string& name) {
        if (!tensors.contains(name)) throw ParseError("missing tensor '" + name + "'");
        return detail::vector_from_json(tensors.at(name), name);
    };
    model.weights.embedding = mat("embedding");
    model.weights.unembedding = mat("unembedding");
    model.weights.final_norm_gain = vec("final_norm");
    model.weights.layers.resize(model.config.n_layers);
    for (int i = 0; i < model.config.n_layers; ++i) {
        auto& lw = model.weights.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        lw.wq = mat(p + "wq");
        lw.wk = mat(p + "wk");
        lw.wv = mat(p + "wv");
        lw.wo = mat(p + "wo");
        lw.w1 = mat(p + "w1");
        lw.w2 = mat(p + "w2");
        lw.attn_norm_gain = vec(p + "attn_norm");
        lw.ffn_norm_gain = vec(p + "ffn_norm");
    }
    model.validate();
    return model;
}

inline Model load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model file '" + path + "'");
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model file '") + path + "': " + e.what());
    }
    try {
        return model_from_json(doc);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model file '") + path + "': " + e.what());
    }
}

} // namespace clvs
