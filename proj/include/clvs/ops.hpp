#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "clvs/errors.hpp"

namespace clvs {

// Dense numeric kernels for the forward pass. Everything is double precision
// and scalar; models are tiny and comparisons against reference computations
// need the headroom.

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data; // row-major

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<const double> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }
    std::span<double> row(int r) {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }
};

// out = M x
inline void matvec(std::span<double> out, const Matrix& m, std::span<const double> x) {
    if (static_cast<int>(x.size()) != m.cols || static_cast<int>(out.size()) != m.rows)
        throw ConfigError("matvec: dimension mismatch");
    for (int r = 0; r < m.rows; ++r) {
        const double* row = m.data.data() + static_cast<size_t>(r) * m.cols;
        double acc = 0.0;
        for (int c = 0; c < m.cols; ++c) acc += row[c] * x[c];
        out[r] = acc;
    }
}

inline std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
    std::vector<double> out(m.rows);
    matvec(out, m, x);
    return out;
}

// Numerically stable softmax: subtract the max before exponentiating, then
// normalize by the sum. Output sums to 1 up to rounding.
inline void softmax_in_place(std::span<double> v) {
    if (v.empty()) throw InputError("softmax: empty input");
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

// Scaled dot-product attention weights for one head: softmax(scale * q K^T).
// `keys` must have one row per context position, matching the query length.
inline std::vector<double> attention_row(std::span<const double> query, const Matrix& keys,
                                         double scale) {
    if (keys.cols != static_cast<int>(query.size()))
        throw ConfigError("attention_row: query/key dimension mismatch");
    if (keys.rows == 0) throw ConfigError("attention_row: empty context");
    std::vector<double> scores(keys.rows);
    for (int r = 0; r < keys.rows; ++r) {
        const double* k = keys.data.data() + static_cast<size_t>(r) * keys.cols;
        double acc = 0.0;
        for (size_t c = 0; c < query.size(); ++c) acc += query[c] * k[c];
        scores[r] = acc * scale;
    }
    softmax_in_place(scores);
    return scores;
}

// Same kernel on a packed cache: keys are rows of length `dim` at `stride`
// doubles apart, starting at `base + offset`.
inline void attention_row_strided(std::span<double> out, std::span<const double> query,
                                  const double* base, int n_rows, size_t stride, size_t offset,
                                  double scale) {
    if (static_cast<int>(out.size()) != n_rows)
        throw ConfigError("attention_row: output size mismatch");
    for (int r = 0; r < n_rows; ++r) {
        const double* k = base + static_cast<size_t>(r) * stride + offset;
        double acc = 0.0;
        for (size_t c = 0; c < query.size(); ++c) acc += query[c] * k[c];
        out[r] = acc * scale;
    }
    softmax_in_place(out);
}

// Rotary position encoding applied in place to one head vector. Adjacent
// pairs (v[2i], v[2i+1]) are rotated by position * base^(-2i/len). Position 0
// is the identity and every rotation preserves the norm.
inline void rope_in_place(std::span<double> head_vec, long position, double rope_base) {
    const size_t len = head_vec.size();
    if (len % 2 != 0) throw ConfigError("rope: head dimension must be even");
    for (size_t i = 0; i < len; i += 2) {
        const double inv_freq = std::pow(rope_base, -static_cast<double>(i) / static_cast<double>(len));
        const double angle = static_cast<double>(position) * inv_freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double v0 = head_vec[i];
        const double v1 = head_vec[i + 1];
        head_vec[i] = v0 * c - v1 * s;
        head_vec[i + 1] = v0 * s + v1 * c;
    }
}

constexpr double kRmsNormEps = 1e-6;

// Gain-only RMS normalization: x / sqrt(mean(x^2) + eps) * gain.
inline void rmsnorm(std::span<double> out, std::span<const double> x,
                    std::span<const double> gain, double eps = kRmsNormEps) {
    if (x.size() != gain.size() || out.size() != x.size())
        throw ConfigError("rmsnorm: dimension mismatch");
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + eps);
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

inline std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> gain,
                                   double eps = kRmsNormEps) {
    std::vector<double> out(x.size());
    rmsnorm(out, x, gain, eps);
    return out;
}

// Exact GELU (erf form).
inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

// Greedy pick with lowest-index tie-breaking: strict > keeps the first of
// any tied group, which is the lowest token id.
inline int argmax_lowest(std::span<const double> v) {
    if (v.empty()) throw InputError("argmax: empty input");
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

} // namespace clvs
