// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with tape-based reverse-mode autodiff.
// The graph is held by shared nodes: every op result keeps handles to its
// inputs plus a closure that scatters the result gradient back into them.
// Graphs are rebuilt on every forward pass; backward() walks the DAG once
// in reverse topological order.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/rng.hpp"

namespace duogen {

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

// Global switch: when disabled, ops run forward-only and record no graph.
inline bool& grad_mode_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_enabled()) { grad_mode_enabled() = false; }
    ~NoGradGuard() { grad_mode_enabled() = prev; }
};

template <typename S>
struct TensorNodeT {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;  // sized lazily during backward
    bool requires_grad = false;
    bool tracked = false;  // true if this node can influence some requires_grad leaf
    std::vector<std::shared_ptr<TensorNodeT>> parents;
    std::function<void()> backward_fn;

    size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

template <typename S>
class TensorT {
public:
    using Node = TensorNodeT<S>;
    using scalar_type = S;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static TensorT zeros(std::vector<int> shape) { return filled(std::move(shape), S(0)); }
    static TensorT ones(std::vector<int> shape) { return filled(std::move(shape), S(1)); }

    static TensorT filled(std::vector<int> shape, S value) {
        check_shape(shape);
        auto n = std::make_shared<Node>();
        n->data.assign(shape_numel(shape), value);
        n->shape = std::move(shape);
        return TensorT(n);
    }

    static TensorT from_data(std::vector<int> shape, std::vector<S> data) {
        check_shape(shape);
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        return TensorT(n);
    }

    static TensorT scalar(S value) { return from_data({1}, {value}); }

    static TensorT randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
        check_shape(shape);
        auto n = std::make_shared<Node>();
        size_t count = shape_numel(shape);
        n->shape = std::move(shape);
        n->data.resize(count);
        for (auto& x : n->data) x = static_cast<S>(rng.normal() * stddev);
        return TensorT(n);
    }

    bool defined() const { return node_ != nullptr; }
    const std::shared_ptr<Node>& node() const { return node_; }

    const std::vector<int>& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return node_->data.size(); }

    // 2-D conveniences
    int rows() const { return node_->shape.at(0); }
    int cols() const { return node_->shape.at(1); }

    std::vector<S>& data() { return node_->data; }
    const std::vector<S>& data() const { return node_->data; }
    S& at(size_t i) { return node_->data[i]; }
    S at(size_t i) const { return node_->data[i]; }
    S& at(int r, int c) { return node_->data[static_cast<size_t>(r) * cols() + c]; }
    S at(int r, int c) const { return node_->data[static_cast<size_t>(r) * cols() + c]; }
    S item() const {
        if (numel() != 1) throw ShapeError("item() requires a 1-element tensor, got " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool value) {
        node_->requires_grad = value;
        node_->tracked = value;
        return *this;
    }

    // Gradient of the last backward() pass; zeros if this tensor was unreachable.
    std::vector<S> grad() const {
        if (node_->grad.size() == node_->data.size()) return node_->grad;
        return std::vector<S>(node_->data.size(), S(0));
    }
    double grad_norm() const {
        double s = 0;
        for (size_t i = 0; i < node_->grad.size(); ++i) s += double(node_->grad[i]) * double(node_->grad[i]);
        return std::sqrt(s);
    }
    void zero_grad() { node_->grad.assign(node_->data.size(), S(0)); }

    void backward() const;

    TensorT detach() const { return from_data(shape(), data()); }

private:
    static void check_shape(const std::vector<int>& shape) {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (int d : shape)
            if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }

    std::shared_ptr<Node> node_;
};

// Reverse topological order (loss last). Iterative DFS; the graph is a DAG by
// construction so every node is visited exactly once.
template <typename S>
std::vector<TensorNodeT<S>*> topo_order(const std::shared_ptr<TensorNodeT<S>>& root) {
    std::vector<TensorNodeT<S>*> order;
    std::unordered_set<TensorNodeT<S>*> seen;
    struct Frame {
        TensorNodeT<S>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    if (seen.insert(root.get()).second) stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        Frame& top = stack.back();
        if (top.next_parent < top.node->parents.size()) {
            TensorNodeT<S>* p = top.node->parents[top.next_parent++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(top.node);
            stack.pop_back();
        }
    }
    return order;
}

template <typename S>
void TensorT<S>::backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    auto order = topo_order(node_);
    for (auto* n : order) n->grad.assign(n->data.size(), S(0));
    node_->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

namespace detail {

template <typename S>
bool want_grad(std::initializer_list<const TensorT<S>*> inputs) {
    if (!grad_mode_enabled()) return false;
    for (const auto* t : inputs)
        if (t->node()->tracked) return true;
    return false;
}

template <typename S>
TensorT<S> make_result(std::vector<int> shape, std::vector<S> data,
                       std::initializer_list<const TensorT<S>*> inputs,
                       std::function<void()>* out_hook, bool* out_tracked) {
    auto n = std::make_shared<TensorNodeT<S>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool tracked = want_grad(inputs);
    *out_tracked = tracked;
    if (tracked) {
        // Only tracked inputs join the traversal graph; untracked inputs stay
        // alive through the backward closure captures and never receive grad.
        for (const auto* t : inputs)
            if (t->node()->tracked) n->parents.push_back(t->node());
    }
    (void)out_hook;
    return TensorT<S>(n);
}

template <typename S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise ----

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a, &b}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        auto bn = b.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, bn]() {
            if (an->tracked) {
                an->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] += self->grad[i];
            }
        };
    }
    return r;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a, &b}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        auto bn = b.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, bn]() {
            if (an->tracked) {
                an->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] -= self->grad[i];
            }
        };
    }
    return r;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a, &b}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        auto bn = b.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, bn]() {
            if (an->tracked) {
                an->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i] * bn->data[i];
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] += self->grad[i] * an->data[i];
            }
        };
    }
    return r;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, double c) {
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(ad[i] * c);
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, c]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += static_cast<S>(self->grad[i] * c);
        };
    }
    return r;
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& a, double c) {
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(ad[i] + c);
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
        };
    }
    return r;
}

// out[i] = a[i] * s where s is a 1-element tensor (used for a learnable mix weight)
template <typename S>
TensorT<S> mul_broadcast_scalar(const TensorT<S>& a, const TensorT<S>& s) {
    if (s.numel() != 1) throw ShapeError("mul_broadcast_scalar: scale must be 1-element, got " + shape_str(s.shape()));
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    S sv = s.at(size_t(0));
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * sv;
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a, &s}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        auto sn = s.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, sn]() {
            if (an->tracked) {
                an->ensure_grad();
                S sv2 = sn->data[0];
                for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i] * sv2;
            }
            if (sn->tracked) {
                sn->ensure_grad();
                S acc = S(0);
                for (size_t i = 0; i < self->grad.size(); ++i) acc += self->grad[i] * an->data[i];
                sn->grad[0] += acc;
            }
        };
    }
    return r;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > S(0) ? ad[i] : S(0);
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i)
                if (an->data[i] > S(0)) an->grad[i] += self->grad[i];
        };
    }
    return r;
}

// Exact (erf-based) GELU.
template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double x = double(ad[i]);
        out[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) {
                double x = double(an->data[i]);
                double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                an->grad[i] += static_cast<S>(self->grad[i] * (cdf + x * pdf));
            }
        };
    }
    return r;
}

// ---- linear algebra ----

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<S> out(static_cast<size_t>(m) * n, S(0));
    const S* ad = a.data().data();
    const S* bd = b.data().data();
    for (int i = 0; i < m; ++i) {
        S* crow = out.data() + static_cast<size_t>(i) * n;
        const S* arow = ad + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            S aik = arow[kk];
            const S* brow = bd + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    bool tracked;
    auto r = detail::make_result<S>({m, n}, std::move(out), {&a, &b}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        auto bn = b.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, bn, m, k, n]() {
            const S* g = self->grad.data();
            if (an->tracked) {
                an->ensure_grad();
                const S* bd2 = bn->data.data();
                // dA = dC * B^T
                for (int i = 0; i < m; ++i) {
                    const S* grow = g + static_cast<size_t>(i) * n;
                    S* garow = an->grad.data() + static_cast<size_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const S* brow = bd2 + static_cast<size_t>(kk) * n;
                        S acc = S(0);
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        garow[kk] += acc;
                    }
                }
            }
            if (bn->tracked) {
                bn->ensure_grad();
                const S* ad2 = an->data.data();
                // dB = A^T * dC
                for (int i = 0; i < m; ++i) {
                    const S* grow = g + static_cast<size_t>(i) * n;
                    const S* arow = ad2 + static_cast<size_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        S aik = arow[kk];
                        S* gbrow = bn->grad.data() + static_cast<size_t>(kk) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
                }
            }
        };
    }
    return r;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: expected 2-D tensor, got " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = ad[static_cast<size_t>(i) * n + j];
    bool tracked;
    auto r = detail::make_result<S>({n, m}, std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, m, n]() {
            an->ensure_grad();
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    an->grad[static_cast<size_t>(i) * n + j] += self->grad[static_cast<size_t>(j) * m + i];
        };
    }
    return r;
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    bool tracked;
    auto r = detail::make_result<S>(std::move(new_shape), std::vector<S>(a.data()), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
        };
    }
    return r;
}

// out[i] = a.flat[indices[i]]; inverse-gather backward. Powers patch/unpatch
// style reorderings with a single generic op.
template <typename S>
TensorT<S> gather_flat(const TensorT<S>& a, const std::vector<size_t>& indices, std::vector<int> out_shape) {
    if (shape_numel(out_shape) != indices.size())
        throw ShapeError("gather_flat: index count " + std::to_string(indices.size()) +
                         " does not match out shape " + shape_str(out_shape));
    std::vector<S> out(indices.size());
    const auto& ad = a.data();
    for (size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= ad.size()) throw ShapeError("gather_flat: index out of range");
        out[i] = ad[indices[i]];
    }
    bool tracked;
    auto r = detail::make_result<S>(std::move(out_shape), std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        auto idx = indices;
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, idx]() {
            an->ensure_grad();
            for (size_t i = 0; i < idx.size(); ++i) an->grad[idx[i]] += self->grad[i];
        };
    }
    return r;
}

template <typename S>
TensorT<S> slice_rows(const TensorT<S>& a, int r0, int r1) {
    if (a.ndim() != 2 || r0 < 0 || r1 > a.rows() || r0 >= r1)
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") for shape " + shape_str(a.shape()));
    const int n = a.cols();
    std::vector<S> out(static_cast<size_t>(r1 - r0) * n);
    std::memcpy(out.data(), a.data().data() + static_cast<size_t>(r0) * n, out.size() * sizeof(S));
    bool tracked;
    auto r = detail::make_result<S>({r1 - r0, n}, std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, r0, n]() {
            an->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i)
                an->grad[static_cast<size_t>(r0) * n + i] += self->grad[i];
        };
    }
    return r;
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& a, int c0, int c1) {
    if (a.ndim() != 2 || c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") for shape " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols(), w = c1 - c0;
    std::vector<S> out(static_cast<size_t>(m) * w);
    const auto& ad = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out[static_cast<size_t>(i) * w + j] = ad[static_cast<size_t>(i) * n + c0 + j];
    bool tracked;
    auto r = detail::make_result<S>({m, w}, std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, m, n, w, c0]() {
            an->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    an->grad[static_cast<size_t>(i) * n + c0 + j] += self->grad[static_cast<size_t>(i) * w + j];
        };
    }
    return r;
}

// x[i, j] + b[j] for a row vector b of width cols(x).
template <typename S>
TensorT<S> add_broadcast_row(const TensorT<S>& x, const TensorT<S>& b) {
    if (x.ndim() != 2 || b.numel() != static_cast<size_t>(x.cols()))
        throw ShapeError("add_broadcast_row: bias width mismatch for " + shape_str(x.shape()) + " and " +
                         shape_str(b.shape()));
    const int m = x.rows(), n = x.cols();
    std::vector<S> out(x.numel());
    const auto& xd = x.data();
    const auto& bd = b.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] = xd[static_cast<size_t>(i) * n + j] + bd[j];
    bool tracked;
    auto r = detail::make_result<S>(x.shape(), std::move(out), {&x, &b}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto xn = x.node();
        auto bn = b.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, xn, bn, m, n]() {
            if (xn->tracked) {
                xn->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) xn->grad[i] += self->grad[i];
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) bn->grad[j] += self->grad[static_cast<size_t>(i) * n + j];
            }
        };
    }
    return r;
}

template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int n = parts[0].cols();
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.cols() != n)
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        total += p.rows();
    }
    std::vector<S> out;
    out.reserve(static_cast<size_t>(total) * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

    auto node = std::make_shared<TensorNodeT<S>>();
    node->shape = {total, n};
    node->data = std::move(out);
    bool tracked = false;
    if (grad_mode_enabled())
        for (const auto& p : parts)
            if (p.node()->tracked) tracked = true;
    TensorT<S> r(node);
    if (tracked) {
        std::vector<std::shared_ptr<TensorNodeT<S>>> pn;
        for (const auto& p : parts) {
            pn.push_back(p.node());
            if (p.node()->tracked) node->parents.push_back(p.node());
        }
        auto self = node.get();
        node->tracked = true;
        node->backward_fn = [self, pn]() {
            size_t off = 0;
            for (const auto& p : pn) {
                if (p->tracked) {
                    p->ensure_grad();
                    for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self->grad[off + i];
                }
                off += p->data.size();
            }
        };
    }
    return r;
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.rows() != m)
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        total += p.cols();
    }
    std::vector<S> out(static_cast<size_t>(m) * total);
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < m; ++i)
            std::memcpy(out.data() + static_cast<size_t>(i) * total + off,
                        p.data().data() + static_cast<size_t>(i) * w, static_cast<size_t>(w) * sizeof(S));
        off += w;
    }
    auto node = std::make_shared<TensorNodeT<S>>();
    node->shape = {m, total};
    node->data = std::move(out);
    bool tracked = false;
    if (grad_mode_enabled())
        for (const auto& p : parts)
            if (p.node()->tracked) tracked = true;
    TensorT<S> r(node);
    if (tracked) {
        std::vector<std::shared_ptr<TensorNodeT<S>>> pn;
        for (const auto& p : parts) {
            pn.push_back(p.node());
            if (p.node()->tracked) node->parents.push_back(p.node());
        }
        auto self = node.get();
        node->tracked = true;
        node->backward_fn = [self, pn, m, total]() {
            int off2 = 0;
            for (const auto& p : pn) {
                const int w = p->shape[1];
                if (p->tracked) {
                    p->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p->grad[static_cast<size_t>(i) * w + j] +=
                                self->grad[static_cast<size_t>(i) * total + off2 + j];
                }
                off2 += w;
            }
        };
    }
    return r;
}

// ---- reductions / normalizations ----

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
    S acc = S(0);
    for (S v : a.data()) acc += v;
    bool tracked;
    auto r = detail::make_result<S>({1}, {acc}, {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self->grad[0];
        };
    }
    return r;
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& a) {
    return scale(sum_all(a), 1.0 / double(a.numel()));
}

// Column means of a 2-D tensor -> [1, n]; used for sequence pooling.
template <typename S>
TensorT<S> mean_rows(const TensorT<S>& a) {
    if (a.ndim() != 2) throw ShapeError("mean_rows: expected 2-D tensor, got " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    std::vector<S> out(static_cast<size_t>(n), S(0));
    const auto& ad = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[j] += ad[static_cast<size_t>(i) * n + j];
    for (int j = 0; j < n; ++j) out[j] /= S(m);
    bool tracked;
    auto r = detail::make_result<S>({1, n}, std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, m, n]() {
            an->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) an->grad[static_cast<size_t>(i) * n + j] += self->grad[j] / S(m);
        };
    }
    return r;
}

// Softmax along `axis`, stabilized by max subtraction.
template <typename S>
TensorT<S> softmax(const TensorT<S>& a, int axis) {
    if (axis < 0 || axis >= a.ndim())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
    const int len = a.dim(axis);
    if (len == 0) throw ShapeError("softmax: empty axis");
    size_t inner = 1, outer = 1;
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= static_cast<size_t>(a.dim(i));
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(a.dim(i));

    std::vector<S> out(a.numel());
    const auto& ad = a.data();
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            size_t base = o * len * inner + in;
            S mx = ad[base];
            for (int k = 1; k < len; ++k) mx = std::max(mx, ad[base + static_cast<size_t>(k) * inner]);
            S denom = S(0);
            for (int k = 0; k < len; ++k) {
                S e = std::exp(ad[base + static_cast<size_t>(k) * inner] - mx);
                out[base + static_cast<size_t>(k) * inner] = e;
                denom += e;
            }
            for (int k = 0; k < len; ++k) out[base + static_cast<size_t>(k) * inner] /= denom;
        }
    }
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, len, inner, outer]() {
            an->ensure_grad();
            for (size_t o = 0; o < outer; ++o) {
                for (size_t in = 0; in < inner; ++in) {
                    size_t base = o * static_cast<size_t>(len) * inner + in;
                    S dot = S(0);
                    for (int k = 0; k < len; ++k) {
                        size_t idx = base + static_cast<size_t>(k) * inner;
                        dot += self->grad[idx] * self->data[idx];
                    }
                    for (int k = 0; k < len; ++k) {
                        size_t idx = base + static_cast<size_t>(k) * inner;
                        an->grad[idx] += self->data[idx] * (self->grad[idx] - dot);
                    }
                }
            }
        };
    }
    return r;
}

// Row-wise softmax over a ragged prefix: row i uses columns [0, valid[i]).
// Masked-out probabilities are exactly zero, so causal masking is structural
// rather than additive.
template <typename S>
TensorT<S> softmax_rows_masked(const TensorT<S>& a, const std::vector<int>& valid) {
    if (a.ndim() != 2 || valid.size() != static_cast<size_t>(a.rows()))
        throw ShapeError("softmax_rows_masked: need one valid length per row of " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    std::vector<S> out(a.numel(), S(0));
    const auto& ad = a.data();
    for (int i = 0; i < m; ++i) {
        int v = valid[i];
        if (v < 1 || v > n) throw ShapeError("softmax_rows_masked: empty or oversized row mask");
        size_t base = static_cast<size_t>(i) * n;
        S mx = ad[base];
        for (int k = 1; k < v; ++k) mx = std::max(mx, ad[base + k]);
        S denom = S(0);
        for (int k = 0; k < v; ++k) {
            S e = std::exp(ad[base + k] - mx);
            out[base + k] = e;
            denom += e;
        }
        for (int k = 0; k < v; ++k) out[base + k] /= denom;
    }
    bool tracked;
    auto r = detail::make_result<S>(a.shape(), std::move(out), {&a}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto an = a.node();
        auto vcopy = valid;
        r.node()->tracked = true;
        r.node()->backward_fn = [self, an, vcopy, m, n]() {
            an->ensure_grad();
            for (int i = 0; i < m; ++i) {
                size_t base = static_cast<size_t>(i) * n;
                S dot = S(0);
                for (int k = 0; k < vcopy[i]; ++k) dot += self->grad[base + k] * self->data[base + k];
                for (int k = 0; k < vcopy[i]; ++k)
                    an->grad[base + k] += self->data[base + k] * (self->grad[base + k] - dot);
            }
        };
    }
    return r;
}

// Per-row layer normalization with learnable gain/bias vectors of width n.
template <typename S>
TensorT<S> layer_norm_rows(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias,
                           double eps = 1e-5) {
    if (x.ndim() != 2) throw ShapeError("layer_norm_rows: expected 2-D input, got " + shape_str(x.shape()));
    const int m = x.rows(), n = x.cols();
    if (gain.numel() != static_cast<size_t>(n) || bias.numel() != static_cast<size_t>(n))
        throw ShapeError("layer_norm_rows: gain/bias width mismatch for " + shape_str(x.shape()));
    std::vector<S> out(x.numel());
    std::vector<S> xhat(x.numel());
    std::vector<S> inv_std(static_cast<size_t>(m));
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    for (int i = 0; i < m; ++i) {
        size_t base = static_cast<size_t>(i) * n;
        S mean = S(0);
        for (int j = 0; j < n; ++j) mean += xd[base + j];
        mean /= S(n);
        S var = S(0);
        for (int j = 0; j < n; ++j) {
            S d = xd[base + j] - mean;
            var += d * d;
        }
        var /= S(n);
        S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
        inv_std[static_cast<size_t>(i)] = istd;
        for (int j = 0; j < n; ++j) {
            S h = (xd[base + j] - mean) * istd;
            xhat[base + j] = h;
            out[base + j] = h * gd[j] + bd[j];
        }
    }
    bool tracked;
    auto r = detail::make_result<S>(x.shape(), std::move(out), {&x, &gain, &bias}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto xn = x.node();
        auto gn = gain.node();
        auto bn = bias.node();
        auto xh = std::make_shared<std::vector<S>>(std::move(xhat));
        auto is = std::make_shared<std::vector<S>>(std::move(inv_std));
        r.node()->tracked = true;
        r.node()->backward_fn = [self, xn, gn, bn, xh, is, m, n]() {
            if (xn->tracked) xn->ensure_grad();
            if (gn->tracked) gn->ensure_grad();
            if (bn->tracked) bn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                size_t base = static_cast<size_t>(i) * n;
                S istd = (*is)[static_cast<size_t>(i)];
                S sum_dh = S(0), sum_dh_h = S(0);
                for (int j = 0; j < n; ++j) {
                    S go = self->grad[base + j];
                    if (gn->tracked) gn->grad[j] += go * (*xh)[base + j];
                    if (bn->tracked) bn->grad[j] += go;
                    S dh = go * gn->data[j];
                    sum_dh += dh;
                    sum_dh_h += dh * (*xh)[base + j];
                }
                if (xn->tracked)
                    for (int j = 0; j < n; ++j) {
                        S dh = self->grad[base + j] * gn->data[j];
                        xn->grad[base + j] +=
                            istd * (dh - sum_dh / S(n) - (*xh)[base + j] * sum_dh_h / S(n));
                    }
            }
        };
    }
    return r;
}

// Row gather from an embedding table; backward scatter-adds into the table.
template <typename S>
TensorT<S> embedding_rows(const TensorT<S>& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding_rows: table must be 2-D, got " + shape_str(table.shape()));
    if (ids.empty()) throw ShapeError("embedding_rows: empty id list");
    const int n = table.cols();
    std::vector<S> out(ids.size() * static_cast<size_t>(n));
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows())
            throw ShapeError("embedding_rows: id " + std::to_string(ids[i]) + " out of range for table " +
                             shape_str(table.shape()));
        std::memcpy(out.data() + i * n, table.data().data() + static_cast<size_t>(ids[i]) * n,
                    static_cast<size_t>(n) * sizeof(S));
    }
    bool tracked;
    auto r = detail::make_result<S>({static_cast<int>(ids.size()), n}, std::move(out), {&table}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto tn = table.node();
        auto idv = ids;
        r.node()->tracked = true;
        r.node()->backward_fn = [self, tn, idv, n]() {
            tn->ensure_grad();
            for (size_t i = 0; i < idv.size(); ++i)
                for (int j = 0; j < n; ++j)
                    tn->grad[static_cast<size_t>(idv[i]) * n + j] += self->grad[i * n + j];
        };
    }
    return r;
}

// ---- loss primitives ----

template <typename S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "mse");
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

// -log softmax(logits)[target] for a 1-D logit vector, computed in one fused
// node via the log-sum-exp trick.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, int target) {
    if (logits.ndim() != 1)
        throw ShapeError("cross_entropy: logits must be 1-D, got " + shape_str(logits.shape()));
    const int v = logits.dim(0);
    if (target < 0 || target >= v)
        throw ShapeError("cross_entropy: target " + std::to_string(target) + " out of range for vocab " +
                         std::to_string(v));
    const auto& ld = logits.data();
    S mx = ld[0];
    for (int i = 1; i < v; ++i) mx = std::max(mx, ld[i]);
    S lse = S(0);
    for (int i = 0; i < v; ++i) lse += std::exp(ld[i] - mx);
    lse = std::log(lse) + mx;
    bool tracked;
    auto r = detail::make_result<S>({1}, {lse - ld[target]}, {&logits}, nullptr, &tracked);
    if (tracked) {
        auto self = r.node().get();
        auto ln = logits.node();
        r.node()->tracked = true;
        r.node()->backward_fn = [self, ln, target, v, lse]() {
            ln->ensure_grad();
            S g = self->grad[0];
            for (int i = 0; i < v; ++i) {
                S p = std::exp(ln->data[i] - lse);
                ln->grad[i] += g * (p - (i == target ? S(1) : S(0)));
            }
        };
    }
    return r;
}

using Tensor = TensorT<double>;
using TensorNode = TensorNodeT<double>;

}  // namespace duogen
