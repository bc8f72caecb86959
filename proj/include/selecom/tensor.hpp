#pragma once

// Dense float32 tensors with a reverse-mode autodiff tape. Row-major,
// contiguous storage only; shapes are fixed at construction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace selecom {

// Process-wide multiply-accumulate counter. Incremented by the matmul and
// attention kernels; evalbench checks its analytic FLOP model against it.
inline uint64_t& mac_counter() {
    static uint64_t count = 0;
    return count;
}

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

class TensorError : public std::runtime_error {
public:
    explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

struct TensorNode {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;   // empty until backward touches this node
    bool requires_grad = false;
    // Tape record: parents and the function that pushes grad into them.
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false)
        : node_(std::make_shared<TensorNode>()) {
        node_->shape = std::move(shape);
        node_->values.assign(numel(node_->shape), fill);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<float> values, bool requires_grad = false)
        : node_(std::make_shared<TensorNode>()) {
        if (numel(shape) != values.size())
            throw TensorError("value count does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->values = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor randn(const Shape& shape, std::mt19937& rng, float stddev = 1.0f,
                        bool requires_grad = false) {
        std::normal_distribution<float> dist(0.0f, stddev);
        Tensor t(shape, 0.0f, requires_grad);
        for (float& v : t.values()) v = dist(rng);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    size_t size() const { return node_->values.size(); }
    size_t dim(size_t i) const { return node_->shape.at(i); }
    size_t ndim() const { return node_->shape.size(); }

    std::vector<float>& values() { return node_->values; }
    const std::vector<float>& values() const { return node_->values; }
    float& at(size_t i) { return node_->values[i]; }
    float at(size_t i) const { return node_->values[i]; }
    float scalar() const {
        if (size() != 1) throw TensorError("scalar() on tensor of size " + std::to_string(size()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<float>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<float>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    std::shared_ptr<TensorNode> node() const { return node_; }

    bool all_finite() const {
        for (float v : node_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void check_finite(const std::string& context) const {
        if (!all_finite()) throw TensorError("non-finite values in " + context);
    }

    // Reverse-mode backward from this (scalar) tensor. Visits the tape in
    // reverse topological order exactly once; shared inputs accumulate.
    void backward() const {
        if (size() != 1) throw TensorError("backward() requires a scalar root");
        std::vector<TensorNode*> order;
        std::unordered_set<TensorNode*> seen;
        topo(node_.get(), seen, order);
        node_->ensure_grad();
        node_->grad[0] = 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        }
    }

private:
    static void topo(TensorNode* n, std::unordered_set<TensorNode*>& seen,
                     std::vector<TensorNode*>& order) {
        if (!n || seen.count(n)) return;
        seen.insert(n);
        for (auto& p : n->parents) topo(p.get(), seen, order);
        order.push_back(n);
    }

    std::shared_ptr<TensorNode> node_;
};

namespace detail {

// A node receives gradient iff it is a requires_grad leaf or an interior
// tape node. Frozen parameters (requires_grad=false leaves) accumulate
// nothing, which both enforces freeze contracts and skips dead work.
inline bool wants_grad(const TensorNode& n) {
    return n.requires_grad || static_cast<bool>(n.backward_fn);
}

inline Tensor make_result(Shape shape, std::vector<Tensor> parents) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad() || p.node()->backward_fn;
    Tensor out(std::move(shape), 0.0f, rg);
    auto& node = *out.node();
    for (auto& p : parents) node.parents.push_back(p.node());
    return out;
}

inline void accumulate(const std::shared_ptr<TensorNode>& n, const std::vector<float>& delta) {
    if (!wants_grad(*n)) return;
    n->ensure_grad();
    for (size_t i = 0; i < delta.size(); ++i) n->grad[i] += delta[i];
}

}  // namespace detail

// ---- elementwise / reduction kernels ----

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = detail::make_result(a.shape(), {a, b});
    for (size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) + b.at(i);
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](TensorNode& o) {
        detail::accumulate(an, o.grad);
        detail::accumulate(bn, o.grad);
    };
    return out;
}

// Adds a [d] row vector to every row of an [n x d] matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.shape().size() != 2 || v.shape().size() != 1 || v.shape()[0] != a.shape()[1])
        throw TensorError("add_rowvec: expected [n x d] + [d], got " + shape_str(a.shape()) +
                          " + " + shape_str(v.shape()));
    const size_t rows = a.shape()[0], d = a.shape()[1];
    Tensor out = detail::make_result(a.shape(), {a, v});
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < d; ++c) out.at(r * d + c) = a.at(r * d + c) + v.at(c);
    auto an = a.node(), vn = v.node();
    out.node()->backward_fn = [an, vn, rows, d](TensorNode& o) {
        detail::accumulate(an, o.grad);
        if (detail::wants_grad(*vn)) {
            vn->ensure_grad();
            for (size_t r = 0; r < rows; ++r)
                for (size_t c = 0; c < d; ++c) vn->grad[c] += o.grad[r * d + c];
        }
    };
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = detail::make_result(a.shape(), {a, b});
    for (size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) - b.at(i);
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](TensorNode& o) {
        detail::accumulate(an, o.grad);
        if (detail::wants_grad(*bn)) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
        }
    };
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = detail::make_result(a.shape(), {a, b});
    for (size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * b.at(i);
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](TensorNode& o) {
        if (detail::wants_grad(*an)) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->values[i];
        }
        if (detail::wants_grad(*bn)) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->values[i];
        }
    };
    return out;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor out = detail::make_result(a.shape(), {a});
    for (size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * s;
    auto an = a.node();
    out.node()->backward_fn = [an, s](TensorNode& o) {
        if (!detail::wants_grad(*an)) return;
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * s;
    };
    return out;
}

inline Tensor sum(const Tensor& a) {
    Tensor out = detail::make_result({1}, {a});
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a.at(i);
    out.at(0) = static_cast<float>(acc);
    auto an = a.node();
    out.node()->backward_fn = [an](TensorNode& o) {
        if (!detail::wants_grad(*an)) return;
        an->ensure_grad();
        for (float& g : an->grad) g += o.grad[0];
    };
    return out;
}

inline Tensor mean(const Tensor& a) {
    Tensor s = sum(a);
    return scale(s, 1.0f / static_cast<float>(a.size()));
}

// ---- matmul ----

// c[m×n] = a[m×k] @ b[k×n]; backward dA = dC·Bᵀ, dB = Aᵀ·dC.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(0) ? b.dim(1) : 0;
    mac_counter() += static_cast<uint64_t>(m) * k * n;
    Tensor out = detail::make_result({m, n}, {a, b});
    const float* pa = a.values().data();
    const float* pb = b.values().data();
    float* pc = out.values().data();
    for (size_t i = 0; i < m; ++i) {
        for (size_t kk = 0; kk < k; ++kk) {
            const float av = pa[i * k + kk];
            const float* brow = pb + kk * n;
            float* crow = pc + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn, m, k, n](TensorNode& o) {
        const float* pg = o.grad.data();
        // dA += dC @ Bᵀ
        if (detail::wants_grad(*an)) an->ensure_grad();
        if (detail::wants_grad(*an))
        for (size_t i = 0; i < m; ++i)
            for (size_t kk = 0; kk < k; ++kk) {
                float acc = 0.0f;
                const float* grow = pg + i * n;
                const float* brow = bn->values.data() + kk * n;
                for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                an->grad[i * k + kk] += acc;
            }
        // dB += Aᵀ @ dC
        if (detail::wants_grad(*bn)) bn->ensure_grad();
        if (detail::wants_grad(*bn))
        for (size_t i = 0; i < m; ++i)
            for (size_t kk = 0; kk < k; ++kk) {
                const float av = an->values[i * k + kk];
                const float* grow = pg + i * n;
                float* brow = bn->grad.data() + kk * n;
                for (size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
    };
    return out;
}

// ---- row/shape plumbing ----

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw TensorError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                          shape_str(shape));
    Tensor out = detail::make_result(std::move(shape), {a});
    out.values() = a.values();
    auto an = a.node();
    out.node()->backward_fn = [an](TensorNode& o) { detail::accumulate(an, o.grad); };
    return out;
}

// Concatenate 2-d tensors along axis 0 (rows). All inputs share the column count.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw TensorError("concat_rows: no inputs");
    const size_t cols = parts[0].dim(1);
    size_t rows = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(1) != cols)
            throw TensorError("concat_rows: column mismatch");
        rows += p.dim(0);
    }
    Tensor out = detail::make_result({rows, cols}, parts);
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.values().begin() + off);
        off += p.size();
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    out.node()->backward_fn = [nodes](TensorNode& o) {
        size_t off = 0;
        for (auto& n : nodes) {
            if (detail::wants_grad(*n)) {
                n->ensure_grad();
                for (size_t i = 0; i < n->values.size(); ++i) n->grad[i] += o.grad[off + i];
            }
            off += n->values.size();
        }
    };
    return out;
}

inline Tensor slice_rows(const Tensor& a, size_t begin, size_t count) {
    if (a.ndim() != 2 || begin + count > a.dim(0))
        throw TensorError("slice_rows: out of range");
    const size_t cols = a.dim(1);
    Tensor out = detail::make_result({count, cols}, {a});
    std::copy(a.values().begin() + begin * cols, a.values().begin() + (begin + count) * cols,
              out.values().begin());
    auto an = a.node();
    out.node()->backward_fn = [an, begin, cols](TensorNode& o) {
        if (!detail::wants_grad(*an)) return;
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[begin * cols + i] += o.grad[i];
    };
    return out;
}

// Overwrite selected rows of `base` with the rows of `rows` (one per position).
// Gradient flows to the replacement rows and to the untouched rows of base;
// replaced base rows receive zero gradient.
inline Tensor replace_rows(const Tensor& base, const Tensor& rows,
                           const std::vector<size_t>& positions) {
    if (base.ndim() != 2 || rows.ndim() != 2 || rows.dim(1) != base.dim(1))
        throw TensorError("replace_rows: width mismatch");
    if (rows.dim(0) != positions.size())
        throw TensorError("replace_rows: row/position count mismatch");
    const size_t cols = base.dim(1);
    for (size_t p : positions)
        if (p >= base.dim(0)) throw TensorError("replace_rows: position out of range");
    Tensor out = detail::make_result(base.shape(), {base, rows});
    out.values() = base.values();
    for (size_t r = 0; r < positions.size(); ++r)
        std::copy(rows.values().begin() + r * cols, rows.values().begin() + (r + 1) * cols,
                  out.values().begin() + positions[r] * cols);
    auto bn = base.node(), rn = rows.node();
    auto pos = positions;
    out.node()->backward_fn = [bn, rn, pos, cols](TensorNode& o) {
        if (detail::wants_grad(*bn)) {
            bn->ensure_grad();
            std::vector<char> replaced(bn->values.size() / cols, 0);
            for (size_t p : pos) replaced[p] = 1;
            for (size_t r = 0; r < bn->values.size() / cols; ++r)
                if (!replaced[r])
                    for (size_t c = 0; c < cols; ++c)
                        bn->grad[r * cols + c] += o.grad[r * cols + c];
        }
        if (detail::wants_grad(*rn)) {
            rn->ensure_grad();
            for (size_t r = 0; r < pos.size(); ++r)
                for (size_t c = 0; c < cols; ++c)
                    rn->grad[r * cols + c] += o.grad[pos[r] * cols + c];
        }
    };
    return out;
}

}  // namespace selecom
