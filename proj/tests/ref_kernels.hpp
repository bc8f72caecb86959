#pragma once

// Double-precision reference evaluations used only as finite-difference
// oracles. Written independently of the float32 kernels they check.

#include <cmath>
#include <cstddef>
#include <vector>

namespace refk {

using dvec = std::vector<double>;

inline dvec matmul(const dvec& a, const dvec& b, size_t m, size_t k, size_t n) {
    dvec c(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j)
            for (size_t kk = 0; kk < k; ++kk) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
    return c;
}

inline dvec softmax_rows(const dvec& x, size_t rows, size_t d) {
    dvec y(x.size());
    for (size_t r = 0; r < rows; ++r) {
        double mx = x[r * d];
        for (size_t j = 1; j < d; ++j) mx = std::max(mx, x[r * d + j]);
        double z = 0.0;
        for (size_t j = 0; j < d; ++j) z += (y[r * d + j] = std::exp(x[r * d + j] - mx));
        for (size_t j = 0; j < d; ++j) y[r * d + j] /= z;
    }
    return y;
}

inline double sum(const dvec& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s;
}

inline dvec attention(const dvec& q, const dvec& k, const dvec& v, size_t tq, size_t tk,
                      size_t d, size_t heads, bool causal) {
    const size_t dh = d / heads;
    dvec out(tq * d, 0.0);
    for (size_t h = 0; h < heads; ++h)
        for (size_t i = 0; i < tq; ++i) {
            const size_t limit = causal ? std::min(tk, i + 1) : tk;
            dvec s(limit);
            for (size_t j = 0; j < limit; ++j) {
                double acc = 0.0;
                for (size_t c = 0; c < dh; ++c)
                    acc += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                s[j] = acc / std::sqrt(double(dh));
            }
            dvec w = softmax_rows(s, 1, limit);
            for (size_t j = 0; j < limit; ++j)
                for (size_t c = 0; c < dh; ++c)
                    out[i * d + h * dh + c] += w[j] * v[j * d + h * dh + c];
        }
    return out;
}

inline dvec layer_norm(const dvec& x, const dvec& gain, const dvec& bias, size_t rows, size_t d,
                       double eps = 1e-5) {
    dvec y(x.size());
    for (size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (size_t j = 0; j < d; ++j) mu += x[r * d + j];
        mu /= d;
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) var += (x[r * d + j] - mu) * (x[r * d + j] - mu);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (size_t j = 0; j < d; ++j) y[r * d + j] = (x[r * d + j] - mu) * inv * gain[j] + bias[j];
    }
    return y;
}

inline dvec rms_norm(const dvec& x, const dvec& gain, size_t rows, size_t d, double eps = 1e-5) {
    dvec y(x.size());
    for (size_t r = 0; r < rows; ++r) {
        double ms = 0.0;
        for (size_t j = 0; j < d; ++j) ms += x[r * d + j] * x[r * d + j];
        const double inv = 1.0 / std::sqrt(ms / d + eps);
        for (size_t j = 0; j < d; ++j) y[r * d + j] = x[r * d + j] * inv * gain[j];
    }
    return y;
}

inline dvec gelu(const dvec& x) {
    dvec y(x.size());
    const double c = 0.7978845608028654;
    for (size_t i = 0; i < x.size(); ++i) {
        const double u = c * (x[i] + 0.044715 * x[i] * x[i] * x[i]);
        y[i] = 0.5 * x[i] * (1.0 + std::tanh(u));
    }
    return y;
}

inline dvec rotary(const dvec& x, size_t t, size_t d, size_t heads, double base = 10000.0) {
    const size_t dh = d / heads;
    dvec y(x.size());
    for (size_t p = 0; p < t; ++p)
        for (size_t h = 0; h < heads; ++h)
            for (size_t i = 0; i < dh / 2; ++i) {
                const double th = double(p) * std::pow(base, -2.0 * double(i) / double(dh));
                const size_t k = p * d + h * dh + 2 * i;
                y[k] = x[k] * std::cos(th) - x[k + 1] * std::sin(th);
                y[k + 1] = x[k] * std::sin(th) + x[k + 1] * std::cos(th);
            }
    return y;
}

inline double nll(const dvec& logits, const std::vector<int>& targets,
                  const std::vector<bool>& mask, size_t t, size_t v) {
    double loss = 0.0;
    size_t active = 0;
    for (size_t i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        ++active;
        double mx = logits[i * v];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, logits[i * v + j]);
        double z = 0.0;
        for (size_t j = 0; j < v; ++j) z += std::exp(logits[i * v + j] - mx);
        loss -= (logits[i * v + targets[i]] - mx) - std::log(z);
    }
    return loss / double(active);
}

inline double weighted_sum(const dvec& x, const dvec& w) {
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i] * w[i];
    return s;
}

}  // namespace refk
