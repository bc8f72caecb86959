#pragma once

// Decoder-block kernels on top of the autodiff tape: softmax, multi-head
// scaled-dot attention (with retrievable weights), norms, GELU, embedding
// lookup, rotary position encoding and masked NLL loss.

#include <limits>

#include "selecom/tensor.hpp"

namespace selecom {

// Softmax over the last axis with max-subtraction. Rows sum to 1.
inline Tensor softmax(const Tensor& x) {
    if (x.ndim() == 0) throw TensorError("softmax: empty tensor");
    const size_t d = x.shape().back();
    const size_t rows = x.size() / d;
    Tensor out = detail::make_result(x.shape(), {x});
    for (size_t r = 0; r < rows; ++r) {
        const float* in = x.values().data() + r * d;
        float* o = out.values().data() + r * d;
        float mx = in[0];
        for (size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        if (!std::isfinite(mx)) throw TensorError("softmax: non-finite input");
        float z = 0.0f;
        for (size_t j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        for (size_t j = 0; j < d; ++j) o[j] /= z;
    }
    auto xn = x.node();
    auto on = out.node();
    out.node()->backward_fn = [xn, on, rows, d](TensorNode& o) {
        if (!detail::wants_grad(*xn)) return;
        xn->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const float* y = on->values.data() + r * d;
            const float* g = o.grad.data() + r * d;
            float dot = 0.0f;
            for (size_t j = 0; j < d; ++j) dot += y[j] * g[j];
            float* gx = xn->grad.data() + r * d;
            for (size_t j = 0; j < d; ++j) gx[j] += y[j] * (g[j] - dot);
        }
    };
    return out;
}

inline Tensor gelu(const Tensor& x) {
    // tanh approximation, as in GPT-style blocks.
    constexpr float kSqrt2OverPi = 0.7978845608028654f;
    Tensor out = detail::make_result(x.shape(), {x});
    for (size_t i = 0; i < x.size(); ++i) {
        const float v = x.at(i);
        const float u = kSqrt2OverPi * (v + 0.044715f * v * v * v);
        out.at(i) = 0.5f * v * (1.0f + std::tanh(u));
    }
    auto xn = x.node();
    out.node()->backward_fn = [xn](TensorNode& o) {
        if (!detail::wants_grad(*xn)) return;
        xn->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const float v = xn->values[i];
            const float u = kSqrt2OverPi * (v + 0.044715f * v * v * v);
            const float t = std::tanh(u);
            const float du = kSqrt2OverPi * (1.0f + 3.0f * 0.044715f * v * v);
            const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
            xn->grad[i] += o.grad[i] * d;
        }
    };
    return out;
}

// Per-row layer norm over the last axis with affine gain/bias (each [d]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         float eps = 1e-5f) {
    const size_t d = x.shape().back();
    if (gain.size() != d || bias.size() != d) throw TensorError("layer_norm: affine size mismatch");
    const size_t rows = x.size() / d;
    Tensor out = detail::make_result(x.shape(), {x, gain, bias});
    std::vector<float> inv_std(rows), mu(rows);
    for (size_t r = 0; r < rows; ++r) {
        const float* in = x.values().data() + r * d;
        double m = 0.0;
        for (size_t j = 0; j < d; ++j) m += in[j];
        m /= d;
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) var += (in[j] - m) * (in[j] - m);
        var /= d;
        mu[r] = static_cast<float>(m);
        inv_std[r] = 1.0f / std::sqrt(static_cast<float>(var) + eps);
        float* o = out.values().data() + r * d;
        for (size_t j = 0; j < d; ++j)
            o[j] = (in[j] - mu[r]) * inv_std[r] * gain.at(j) + bias.at(j);
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    out.node()->backward_fn = [xn, gn, bn, rows, d, mu, inv_std](TensorNode& o) {
        const bool wx = detail::wants_grad(*xn);
        const bool wg = detail::wants_grad(*gn);
        const bool wb = detail::wants_grad(*bn);
        if (!wx && !wg && !wb) return;
        if (wx) xn->ensure_grad();
        if (wg) gn->ensure_grad();
        if (wb) bn->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const float* in = xn->values.data() + r * d;
            const float* g = o.grad.data() + r * d;
            float sum_gy = 0.0f, sum_gyx = 0.0f;
            for (size_t j = 0; j < d; ++j) {
                const float xhat = (in[j] - mu[r]) * inv_std[r];
                const float gy = g[j] * gn->values[j];
                sum_gy += gy;
                sum_gyx += gy * xhat;
                if (wg) gn->grad[j] += g[j] * xhat;
                if (wb) bn->grad[j] += g[j];
            }
            if (!wx) continue;
            float* gx = xn->grad.data() + r * d;
            for (size_t j = 0; j < d; ++j) {
                const float xhat = (in[j] - mu[r]) * inv_std[r];
                const float gy = g[j] * gn->values[j];
                gx[j] += inv_std[r] * (gy - sum_gy / d - xhat * sum_gyx / d);
            }
        }
    };
    return out;
}

// RMS norm over the last axis with gain [d].
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-5f) {
    const size_t d = x.shape().back();
    if (gain.size() != d) throw TensorError("rms_norm: gain size mismatch");
    const size_t rows = x.size() / d;
    Tensor out = detail::make_result(x.shape(), {x, gain});
    std::vector<float> inv_rms(rows);
    for (size_t r = 0; r < rows; ++r) {
        const float* in = x.values().data() + r * d;
        double ms = 0.0;
        for (size_t j = 0; j < d; ++j) ms += in[j] * in[j];
        inv_rms[r] = 1.0f / std::sqrt(static_cast<float>(ms / d) + eps);
        float* o = out.values().data() + r * d;
        for (size_t j = 0; j < d; ++j) o[j] = in[j] * inv_rms[r] * gain.at(j);
    }
    auto xn = x.node();
    auto gn = gain.node();
    out.node()->backward_fn = [xn, gn, rows, d, inv_rms](TensorNode& o) {
        const bool wx = detail::wants_grad(*xn);
        const bool wg = detail::wants_grad(*gn);
        if (!wx && !wg) return;
        if (wx) xn->ensure_grad();
        if (wg) gn->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const float* in = xn->values.data() + r * d;
            const float* g = o.grad.data() + r * d;
            const float ir = inv_rms[r];
            float dot = 0.0f;
            for (size_t j = 0; j < d; ++j) {
                dot += g[j] * gn->values[j] * in[j];
                if (wg) gn->grad[j] += g[j] * in[j] * ir;
            }
            if (!wx) continue;
            float* gx = xn->grad.data() + r * d;
            for (size_t j = 0; j < d; ++j)
                gx[j] += ir * (g[j] * gn->values[j] - in[j] * ir * ir * dot / d);
        }
    };
    return out;
}

// Gathers rows of `table` [V×d] by token id; backward scatter-adds.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw TensorError("embedding_lookup: table must be 2-d");
    const size_t v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || static_cast<size_t>(id) >= v)
            throw TensorError("embedding_lookup: token id " + std::to_string(id) +
                              " outside vocab of " + std::to_string(v));
    Tensor out = detail::make_result({ids.size(), d}, {table});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.values().begin() + ids[i] * d, table.values().begin() + (ids[i] + 1) * d,
                  out.values().begin() + i * d);
    auto tn = table.node();
    auto idcopy = ids;
    out.node()->backward_fn = [tn, idcopy, d](TensorNode& o) {
        if (!detail::wants_grad(*tn)) return;
        tn->ensure_grad();
        for (size_t i = 0; i < idcopy.size(); ++i)
            for (size_t j = 0; j < d; ++j) tn->grad[idcopy[i] * d + j] += o.grad[i * d + j];
    };
    return out;
}

// Rotary position encoding applied per head to x [T×d]. Positions may be
// offset for decode continuation. The rotation is orthogonal, so backward
// rotates the gradient by the negative angle.
inline Tensor rotary_position_encode(const Tensor& x, size_t n_heads, size_t pos_offset = 0,
                                     float base = 10000.0f) {
    if (x.ndim() != 2) throw TensorError("rotary: expected [T x d]");
    const size_t t = x.dim(0), d = x.dim(1);
    if (d % n_heads != 0) throw TensorError("rotary: d not divisible by heads");
    const size_t dh = d / n_heads;
    if (dh % 2 != 0) throw TensorError("rotary: head dim must be even");
    Tensor out = detail::make_result(x.shape(), {x});
    auto angles = [&](size_t pos, size_t i) {
        return static_cast<float>(pos) * std::pow(base, -2.0f * static_cast<float>(i) / dh);
    };
    for (size_t p = 0; p < t; ++p)
        for (size_t h = 0; h < n_heads; ++h)
            for (size_t i = 0; i < dh / 2; ++i) {
                const float th = angles(p + pos_offset, i);
                const float c = std::cos(th), s = std::sin(th);
                const size_t k = p * d + h * dh + 2 * i;
                const float x0 = x.at(k), x1 = x.at(k + 1);
                out.at(k) = x0 * c - x1 * s;
                out.at(k + 1) = x0 * s + x1 * c;
            }
    auto xn = x.node();
    out.node()->backward_fn = [xn, t, d, dh, n_heads, pos_offset, base](TensorNode& o) {
        if (!detail::wants_grad(*xn)) return;
        xn->ensure_grad();
        for (size_t p = 0; p < t; ++p)
            for (size_t h = 0; h < n_heads; ++h)
                for (size_t i = 0; i < dh / 2; ++i) {
                    const float th = static_cast<float>(p + pos_offset) *
                                     std::pow(base, -2.0f * static_cast<float>(i) / dh);
                    const float c = std::cos(th), s = std::sin(th);
                    const size_t k = p * d + h * dh + 2 * i;
                    const float g0 = o.grad[k], g1 = o.grad[k + 1];
                    xn->grad[k] += g0 * c + g1 * s;
                    xn->grad[k + 1] += -g0 * s + g1 * c;
                }
    };
    return out;
}

struct AttentionResult {
    Tensor output;   // [Tq×d]
    Tensor weights;  // [H×Tq×Tk], rows sum to 1
};

// Multi-head scaled-dot attention over already-projected q [Tq×d], k,v [Tk×d].
// The causal mask forbids query position i attending to key position j > i
// (plus an offset when q is a suffix of the key sequence during decode).
inline AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                            size_t n_heads, bool causal,
                                            size_t q_pos_offset = 0) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw TensorError("attention: expected 2-d q/k/v");
    const size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1);
    if (k.dim(1) != d || v.dim(1) != d)
        throw TensorError("attention: q/k/v width mismatch");
    if (d % n_heads != 0) throw TensorError("attention: d not divisible by heads");
    const size_t dh = d / n_heads;
    const float scl = 1.0f / std::sqrt(static_cast<float>(dh));
    mac_counter() += 2ull * n_heads * tq * tk * dh;

    Tensor out = detail::make_result({tq, d}, {q, k, v});
    Tensor weights = detail::make_result({n_heads, tq, tk}, {q, k});
    const float* pq = q.values().data();
    const float* pk = k.values().data();
    const float* pv = v.values().data();
    float* pw = weights.values().data();
    float* po = out.values().data();
    for (size_t h = 0; h < n_heads; ++h) {
        for (size_t i = 0; i < tq; ++i) {
            float* wrow = pw + (h * tq + i) * tk;
            const size_t limit = causal ? std::min(tk, i + q_pos_offset + 1) : tk;
            if (limit == 0) throw TensorError("attention: causal mask leaves no keys");
            float mx = -std::numeric_limits<float>::infinity();
            for (size_t j = 0; j < limit; ++j) {
                float acc = 0.0f;
                const float* qr = pq + i * d + h * dh;
                const float* kr = pk + j * d + h * dh;
                for (size_t c = 0; c < dh; ++c) acc += qr[c] * kr[c];
                wrow[j] = acc * scl;
                mx = std::max(mx, wrow[j]);
            }
            float z = 0.0f;
            for (size_t j = 0; j < limit; ++j) {
                wrow[j] = std::exp(wrow[j] - mx);
                z += wrow[j];
            }
            for (size_t j = 0; j < limit; ++j) wrow[j] /= z;
            for (size_t j = limit; j < tk; ++j) wrow[j] = 0.0f;
            float* orow = po + i * d + h * dh;
            for (size_t j = 0; j < limit; ++j) {
                const float w = wrow[j];
                const float* vr = pv + j * d + h * dh;
                for (size_t c = 0; c < dh; ++c) orow[c] += w * vr[c];
            }
        }
    }

    auto qn = q.node(), kn = k.node(), vn = v.node(), wn = weights.node();
    out.node()->backward_fn = [qn, kn, vn, wn, n_heads, tq, tk, dh, d, scl](TensorNode& o) {
        if (!detail::wants_grad(*qn) && !detail::wants_grad(*kn) && !detail::wants_grad(*vn))
            return;
        qn->ensure_grad();
        kn->ensure_grad();
        vn->ensure_grad();
        std::vector<float> ds(tk);
        for (size_t h = 0; h < n_heads; ++h)
            for (size_t i = 0; i < tq; ++i) {
                const float* w = wn->values.data() + (h * tq + i) * tk;
                const float* go = o.grad.data() + i * d + h * dh;
                // dW then dS = W ∘ (dW − Σ dW∘W)
                float dot = 0.0f;
                for (size_t j = 0; j < tk; ++j) {
                    float dw = 0.0f;
                    if (w[j] != 0.0f) {
                        const float* vr = vn->values.data() + j * d + h * dh;
                        for (size_t c = 0; c < dh; ++c) dw += go[c] * vr[c];
                        float* gv = vn->grad.data() + j * d + h * dh;
                        for (size_t c = 0; c < dh; ++c) gv[c] += w[j] * go[c];
                    }
                    ds[j] = dw;
                    dot += dw * w[j];
                }
                for (size_t j = 0; j < tk; ++j) ds[j] = w[j] * (ds[j] - dot);
                const float* qr = qn->values.data() + i * d + h * dh;
                float* gq = qn->grad.data() + i * d + h * dh;
                for (size_t j = 0; j < tk; ++j) {
                    if (ds[j] == 0.0f) continue;
                    const float s = ds[j] * scl;
                    const float* kr = kn->values.data() + j * d + h * dh;
                    float* gk = kn->grad.data() + j * d + h * dh;
                    for (size_t c = 0; c < dh; ++c) {
                        gq[c] += s * kr[c];
                        gk[c] += s * qr[c];
                    }
                }
            }
    };
    return {out, weights};
}

// Mean of −log softmax(logits)[target] over unmasked positions.
// logits [T×V]; targets and mask have length T.
inline Tensor nll_loss(const Tensor& logits, const std::vector<int>& targets,
                       const std::vector<bool>& mask) {
    if (logits.ndim() != 2) throw TensorError("nll_loss: logits must be [T x V]");
    const size_t t = logits.dim(0), v = logits.dim(1);
    if (targets.size() != t || mask.size() != t)
        throw TensorError("nll_loss: target/mask length mismatch");
    size_t active = 0;
    for (size_t i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || static_cast<size_t>(targets[i]) >= v)
            throw TensorError("nll_loss: target id out of vocab");
        ++active;
    }
    if (active == 0) throw TensorError("nll_loss: no unmasked positions");
    Tensor out = detail::make_result({1}, {logits});
    std::vector<float> probs(t * v);
    double loss = 0.0;
    for (size_t i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        const float* row = logits.values().data() + i * v;
        float mx = row[0];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        if (!std::isfinite(mx)) throw TensorError("nll_loss: non-finite logits");
        double z = 0.0;
        for (size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(row[j] - mx);
            z += probs[i * v + j];
        }
        for (size_t j = 0; j < v; ++j) probs[i * v + j] /= static_cast<float>(z);
        loss -= std::log(static_cast<double>(probs[i * v + targets[i]]));
    }
    out.at(0) = static_cast<float>(loss / active);
    auto ln = logits.node();
    auto tg = targets;
    auto mk = mask;
    out.node()->backward_fn = [ln, tg, mk, t, v, probs, active](TensorNode& o) {
        if (!detail::wants_grad(*ln)) return;
        ln->ensure_grad();
        const float g = o.grad[0] / static_cast<float>(active);
        for (size_t i = 0; i < t; ++i) {
            if (!mk[i]) continue;
            for (size_t j = 0; j < v; ++j) {
                float p = probs[i * v + j];
                if (static_cast<int>(j) == tg[i]) p -= 1.0f;
                ln->grad[i * v + j] += g * p;
            }
        }
    };
    return out;
}

}  // namespace selecom
