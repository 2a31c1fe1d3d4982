#pragma once

// Dense row-major tensors with reverse-mode differentiation on an explicit
// tape. The op set is the minimum needed for transformer blocks, bottleneck
// adapters and the training losses; every op that participates in training
// carries a hand-written backward rule that is finite-difference checked.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>

#include "uniadapter/common.hpp"

namespace uniadapter {

template <typename R>
struct TensorNode {
    Shape shape;
    std::vector<R> data;
    std::vector<R> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    bool leaf = true;  // false for tensors produced by a recorded op

    std::size_t numel() const { return data.size(); }
    bool has_grad() const { return !grad.empty(); }

    void accumulate(std::size_t i, R g) {
        if (grad.empty()) grad.assign(data.size(), R(0));
        grad[i] += g;
    }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), R(0));
    }
};

template <typename R>
class Tensor;

// Records one backward closure per op, in execution order. backward() zeroes
// every non-leaf gradient it recorded, seeds d(loss)/d(loss) = 1 and replays
// the closures in reverse; leaf gradients accumulate across repeated calls.
template <typename R>
class Tape {
public:
    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

    void record(std::shared_ptr<TensorNode<R>> out, std::function<void()> back) {
        steps_.push_back(Step{std::move(out), std::move(back)});
    }

    void backward(const Tensor<R>& loss);

    void clear() { steps_.clear(); }
    bool empty() const { return steps_.empty(); }
    std::size_t size() const { return steps_.size(); }

private:
    struct Step {
        std::shared_ptr<TensorNode<R>> out;
        std::function<void()> back;
    };
    std::vector<Step> steps_;
};

// RAII activation of a tape for the current thread.
template <typename R>
class AutogradScope {
public:
    explicit AutogradScope(Tape<R>& tape) : prev_(Tape<R>::active()) { Tape<R>::active() = &tape; }
    ~AutogradScope() { Tape<R>::active() = prev_; }
    AutogradScope(const AutogradScope&) = delete;
    AutogradScope& operator=(const AutogradScope&) = delete;

private:
    Tape<R>* prev_;
};

template <typename R>
class Tensor {
public:
    using Node = TensorNode<R>;

    Tensor() : node_(std::make_shared<Node>()) {}

    explicit Tensor(Shape shape) : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        node_->data.assign(shape_numel(node_->shape), R(0));
    }

    Tensor(Shape shape, std::vector<R> data) : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, R v) {
        Tensor t(std::move(shape));
        std::fill(t.node_->data.begin(), t.node_->data.end(), v);
        return t;
    }

    static Tensor scalar(R v) { return Tensor({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, R stddev = R(1)) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, 1.0);
        for (R& x : t.node_->data) x = static_cast<R>(dist(rng)) * stddev;
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, R lo, R hi) {
        Tensor t(std::move(shape));
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        for (R& x : t.node_->data) x = static_cast<R>(dist(rng));
        return t;
    }

    // He-style init for a [fan_in x fan_out] projection applied as x*W.
    static Tensor kaiming_normal(std::size_t rows, std::size_t cols, Rng& rng) {
        return randn({rows, cols}, rng, static_cast<R>(std::sqrt(2.0 / static_cast<double>(rows))));
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t rows() const { return node_->shape.empty() ? 0 : node_->shape[0]; }
    std::size_t cols() const { return node_->shape.size() < 2 ? (node_->shape.empty() ? 0 : 1) : node_->shape[1]; }

    std::vector<R>& data() { return node_->data; }
    const std::vector<R>& data() const { return node_->data; }

    R& at(std::size_t i, std::size_t j) { return node_->data[i * cols() + j]; }
    R at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }
    R item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return node_->has_grad(); }
    const std::vector<R>& grad() const {
        if (!node_->has_grad()) throw ContractError("gradient not populated; run backward first");
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    std::shared_ptr<Node> node() const { return node_; }

    // Detached copy: same values, no tape lineage.
    Tensor detach() const {
        Tensor t;
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        return t;
    }

private:
    std::shared_ptr<Node> node_;

    template <typename R2>
    friend class ops_access;
};

// Ops reach the node directly; everything else goes through the public API.
template <typename R>
struct ops_access {
    static std::shared_ptr<TensorNode<R>>& node(Tensor<R>& t) { return t.node_; }
    static const std::shared_ptr<TensorNode<R>>& node(const Tensor<R>& t) { return t.node_; }
};

template <typename R>
void Tape<R>::backward(const Tensor<R>& loss) {
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (steps_.empty()) throw ContractError("backward on an empty tape");
    // Intermediate grads are scratch for one replay; leaves keep accumulating.
    for (auto& s : steps_) s.out->grad.assign(s.out->data.size(), R(0));
    auto seed = ops_access<R>::node(loss);
    seed->ensure_grad();
    seed->grad[0] += R(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->back();
}

namespace detail {

template <typename R>
void check_finite(const TensorNode<R>& node, const char* op) {
    if (!debug_numeric_checks()) return;
    for (R v : node.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericsError(std::string(op) + " produced a non-finite value");
}

template <typename R>
Tensor<R> make_out(Shape shape) {
    return Tensor<R>(std::move(shape));
}

template <typename R, typename Back>
void finish(Tensor<R>& out, bool any_rg, const char* op, Back&& back) {
    check_finite(*ops_access<R>::node(out), op);
    auto* tape = Tape<R>::active();
    if (tape && any_rg) {
        auto node = ops_access<R>::node(out);
        node->requires_grad = true;
        node->leaf = false;
        tape->record(node, std::forward<Back>(back));
    }
}

template <typename R>
void require_matrix(const Tensor<R>& t, const char* op) {
    if (t.shape().size() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<R> out({m, n});
    const R* pa = a.data().data();
    const R* pb = b.data().data();
    R* pc = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const R* arow = pa + i * k;
        R* crow = pc + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const R aik = arow[kk];
            if (aik == R(0)) continue;
            const R* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    bool rg = a.requires_grad() || b.requires_grad();
    detail::finish(out, rg, "matmul",
                   [an = ops_access<R>::node(a), bn = ops_access<R>::node(b), on = ops_access<R>::node(out), m, k, n]() {
                       const R* g = on->grad.data();
                       if (an->requires_grad) {
                           an->ensure_grad();
                           R* da = an->grad.data();
                           const R* pb = bn->data.data();
                           // dA[i,k] += sum_j dC[i,j] * B[k,j]
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t kk = 0; kk < k; ++kk) {
                                   R acc = R(0);
                                   const R* grow = g + i * n;
                                   const R* brow = pb + kk * n;
                                   for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                   da[i * k + kk] += acc;
                               }
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           R* db = bn->grad.data();
                           const R* pa = an->data.data();
                           // dB[k,j] += sum_i A[i,k] * dC[i,j]
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t kk = 0; kk < k; ++kk) {
                                   const R aik = pa[i * k + kk];
                                   if (aik == R(0)) continue;
                                   const R* grow = g + i * n;
                                   R* brow = db + kk * n;
                                   for (std::size_t j = 0; j < n; ++j) brow[j] += aik * grow[j];
                               }
                       }
                   });
    return out;
}

template <typename R>
Tensor<R> transpose(const Tensor<R>& a) {
    detail::require_matrix(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<R> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    detail::finish(out, a.requires_grad(), "transpose",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out), m, n]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
                   });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename R, typename Fwd, typename Back>
Tensor<R> unary_elementwise(const Tensor<R>& a, const char* op, Fwd fwd, Back dydx) {
    Tensor<R> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = fwd(a.data()[i]);
    finish(out, a.requires_grad(), op,
           [an = ops_access<R>::node(a), on = ops_access<R>::node(out), dydx]() {
               if (!an->requires_grad) return;
               an->ensure_grad();
               for (std::size_t i = 0; i < an->data.size(); ++i)
                   an->grad[i] += on->grad[i] * dydx(an->data[i], on->data[i]);
           });
    return out;
}

template <typename R>
void require_same_shape(const Tensor<R>& a, const Tensor<R>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <typename R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<R> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    bool rg = a.requires_grad() || b.requires_grad();
    detail::finish(out, rg, "add",
                   [an = ops_access<R>::node(a), bn = ops_access<R>::node(b), on = ops_access<R>::node(out)]() {
                       for (auto& node : {an, bn}) {
                           if (!node->requires_grad) continue;
                           node->ensure_grad();
                           for (std::size_t i = 0; i < node->data.size(); ++i) node->grad[i] += on->grad[i];
                       }
                   });
    return out;
}

template <typename R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<R> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    bool rg = a.requires_grad() || b.requires_grad();
    detail::finish(out, rg, "sub",
                   [an = ops_access<R>::node(a), bn = ops_access<R>::node(b), on = ops_access<R>::node(out)]() {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += on->grad[i];
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (std::size_t i = 0; i < bn->data.size(); ++i) bn->grad[i] -= on->grad[i];
                       }
                   });
    return out;
}

template <typename R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<R> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    bool rg = a.requires_grad() || b.requires_grad();
    detail::finish(out, rg, "mul",
                   [an = ops_access<R>::node(a), bn = ops_access<R>::node(b), on = ops_access<R>::node(out)]() {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < an->data.size(); ++i)
                               an->grad[i] += on->grad[i] * bn->data[i];
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (std::size_t i = 0; i < bn->data.size(); ++i)
                               bn->grad[i] += on->grad[i] * an->data[i];
                       }
                   });
    return out;
}

template <typename R>
Tensor<R> scale(const Tensor<R>& a, R c) {
    Tensor<R> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
    detail::finish(out, a.requires_grad(), "scale",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out), c]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += on->grad[i] * c;
                   });
    return out;
}

template <typename R>
Tensor<R> relu(const Tensor<R>& a) {
    return detail::unary_elementwise(
        a, "relu", [](R x) { return x > R(0) ? x : R(0); },
        [](R x, R) { return x > R(0) ? R(1) : R(0); });
}

template <typename R>
Tensor<R> gelu(const Tensor<R>& a) {
    // Exact erf form; derivative is Phi(x) + x*phi(x).
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_elementwise(
        a, "gelu",
        [=](R x) {
            double xd = static_cast<double>(x);
            return static_cast<R>(0.5 * xd * (1.0 + std::erf(xd * inv_sqrt2)));
        },
        [=](R x, R) {
            double xd = static_cast<double>(x);
            double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
            return static_cast<R>(cdf + xd * pdf);
        });
}

template <typename R>
Tensor<R> tanh_op(const Tensor<R>& a) {
    return detail::unary_elementwise(
        a, "tanh", [](R x) { return std::tanh(x); }, [](R, R y) { return R(1) - y * y; });
}

template <typename R>
Tensor<R> exp_op(const Tensor<R>& a) {
    return detail::unary_elementwise(
        a, "exp", [](R x) { return std::exp(x); }, [](R, R y) { return y; });
}

template <typename R>
Tensor<R> log_op(const Tensor<R>& a) {
    return detail::unary_elementwise(
        a, "log", [](R x) { return std::log(x); }, [](R x, R) { return R(1) / x; });
}

template <typename R>
Tensor<R> recip(const Tensor<R>& a) {
    return detail::unary_elementwise(
        a, "recip", [](R x) { return R(1) / x; }, [](R, R y) { return -y * y; });
}

// ---------------------------------------------------------------------------
// Softmax / normalization

// Row-wise numerically stabilized softmax. With causal=true, row i only
// attends to columns j <= i; masked entries are exactly zero.
template <typename R>
Tensor<R> softmax_rows(const Tensor<R>& a, bool causal = false) {
    Shape shape = a.shape();
    std::size_t m, n;
    if (shape.size() == 1) {
        m = 1;
        n = shape[0];
    } else if (shape.size() == 2) {
        m = shape[0];
        n = shape[1];
    } else {
        throw ShapeError("softmax expects a vector or matrix, got " + shape_str(shape));
    }
    if (n == 0) throw DomainError("softmax of an empty vector");
    Tensor<R> out(shape);
    for (std::size_t i = 0; i < m; ++i) {
        const R* x = a.data().data() + i * n;
        R* y = out.data().data() + i * n;
        const std::size_t lim = causal ? std::min(i + 1, n) : n;
        R mx = x[0];
        for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, x[j]);
        R sum = R(0);
        for (std::size_t j = 0; j < lim; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < lim; ++j) y[j] /= sum;
        for (std::size_t j = lim; j < n; ++j) y[j] = R(0);
    }
    detail::finish(out, a.requires_grad(), "softmax",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out), m, n, causal]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i) {
                           const R* y = on->data.data() + i * n;
                           const R* gy = on->grad.data() + i * n;
                           R* gx = an->grad.data() + i * n;
                           const std::size_t lim = causal ? std::min(i + 1, n) : n;
                           R dot = R(0);
                           for (std::size_t j = 0; j < lim; ++j) dot += gy[j] * y[j];
                           for (std::size_t j = 0; j < lim; ++j) gx[j] += y[j] * (gy[j] - dot);
                       }
                   });
    return out;
}

// Row-wise layer norm with affine parameters, biased variance.
template <typename R>
Tensor<R> layer_norm_rows(const Tensor<R>& a, const Tensor<R>& gamma, const Tensor<R>& beta, R eps = R(1e-5)) {
    detail::require_matrix(a, "layer_norm");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (gamma.numel() != n || beta.numel() != n)
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match feature width " + std::to_string(n));
    Tensor<R> out({m, n});
    std::vector<R> inv_std(m), means(m);
    for (std::size_t i = 0; i < m; ++i) {
        const R* x = a.data().data() + i * n;
        R mean = R(0);
        for (std::size_t j = 0; j < n; ++j) mean += x[j];
        mean /= static_cast<R>(n);
        R var = R(0);
        for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<R>(n);
        const R is = R(1) / std::sqrt(var + eps);
        means[i] = mean;
        inv_std[i] = is;
        R* y = out.data().data() + i * n;
        for (std::size_t j = 0; j < n; ++j) y[j] = gamma.data()[j] * ((x[j] - mean) * is) + beta.data()[j];
    }
    bool rg = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    detail::finish(out, rg, "layer_norm",
                   [an = ops_access<R>::node(a), gn = ops_access<R>::node(gamma), bn = ops_access<R>::node(beta),
                    on = ops_access<R>::node(out), m, n, means = std::move(means), inv_std = std::move(inv_std)]() {
                       std::vector<R> xhat(n), dxhat(n);
                       for (std::size_t i = 0; i < m; ++i) {
                           const R* x = an->data.data() + i * n;
                           const R* gy = on->grad.data() + i * n;
                           for (std::size_t j = 0; j < n; ++j) xhat[j] = (x[j] - means[i]) * inv_std[i];
                           if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (std::size_t j = 0; j < n; ++j) bn->grad[j] += gy[j];
                           }
                           if (gn->requires_grad) {
                               gn->ensure_grad();
                               for (std::size_t j = 0; j < n; ++j) gn->grad[j] += gy[j] * xhat[j];
                           }
                           if (an->requires_grad) {
                               an->ensure_grad();
                               R* gx = an->grad.data() + i * n;
                               R mean_dxhat = R(0), mean_dxhat_xhat = R(0);
                               for (std::size_t j = 0; j < n; ++j) {
                                   dxhat[j] = gy[j] * gn->data[j];
                                   mean_dxhat += dxhat[j];
                                   mean_dxhat_xhat += dxhat[j] * xhat[j];
                               }
                               mean_dxhat /= static_cast<R>(n);
                               mean_dxhat_xhat /= static_cast<R>(n);
                               for (std::size_t j = 0; j < n; ++j)
                                   gx[j] += inv_std[i] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                           }
                       }
                   });
    return out;
}

// Row-wise L2 normalization: y_i = x_i / ||x_i||.
template <typename R>
Tensor<R> l2_normalize_rows(const Tensor<R>& a, R eps = R(1e-12)) {
    detail::require_matrix(a, "l2_normalize");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<R> out({m, n});
    std::vector<R> inv_norm(m);
    for (std::size_t i = 0; i < m; ++i) {
        const R* x = a.data().data() + i * n;
        R ss = eps;
        for (std::size_t j = 0; j < n; ++j) ss += x[j] * x[j];
        inv_norm[i] = R(1) / std::sqrt(ss);
        R* y = out.data().data() + i * n;
        for (std::size_t j = 0; j < n; ++j) y[j] = x[j] * inv_norm[i];
    }
    detail::finish(out, a.requires_grad(), "l2_normalize",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out), m, n,
                    inv_norm = std::move(inv_norm)]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i) {
                           const R* y = on->data.data() + i * n;
                           const R* gy = on->grad.data() + i * n;
                           R* gx = an->grad.data() + i * n;
                           R dot = R(0);
                           for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                           for (std::size_t j = 0; j < n; ++j) gx[j] += (gy[j] - y[j] * dot) * inv_norm[i];
                       }
                   });
    return out;
}

// ---------------------------------------------------------------------------
// Shape surgery

template <typename R>
Tensor<R> slice_rows(const Tensor<R>& a, std::size_t begin, std::size_t count) {
    detail::require_matrix(a, "slice_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (begin + count > m)
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") exceeds " + shape_str(a.shape()));
    Tensor<R> out({count, n});
    std::copy_n(a.data().data() + begin * n, count * n, out.data().data());
    detail::finish(out, a.requires_grad(), "slice_rows",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out), begin, n, count]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < count * n; ++i) an->grad[begin * n + i] += on->grad[i];
                   });
    return out;
}

template <typename R>
Tensor<R> slice_cols(const Tensor<R>& a, std::size_t begin, std::size_t count) {
    detail::require_matrix(a, "slice_cols");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (begin + count > n)
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") exceeds " + shape_str(a.shape()));
    Tensor<R> out({m, count});
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(a.data().data() + i * n + begin, count, out.data().data() + i * count);
    detail::finish(out, a.requires_grad(), "slice_cols",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out), m, n, begin, count]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < count; ++j)
                               an->grad[i * n + begin + j] += on->grad[i * count + j];
                   });
    return out;
}

template <typename R>
Tensor<R> concat_rows(const std::vector<Tensor<R>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows of zero tensors");
    const std::size_t n = parts[0].shape().size() == 2 ? parts[0].shape()[1] : 0;
    std::size_t m = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_rows");
        if (p.shape()[1] != n)
            throw ShapeError("concat_rows: column mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        m += p.shape()[0];
    }
    Tensor<R> out({m, n});
    std::size_t row = 0;
    bool rg = false;
    std::vector<std::pair<std::shared_ptr<TensorNode<R>>, std::size_t>> srcs;
    for (const auto& p : parts) {
        std::copy_n(p.data().data(), p.numel(), out.data().data() + row * n);
        srcs.emplace_back(ops_access<R>::node(p), row);
        row += p.shape()[0];
        rg = rg || p.requires_grad();
    }
    detail::finish(out, rg, "concat_rows", [srcs = std::move(srcs), on = ops_access<R>::node(out), n]() {
        for (const auto& [node, row0] : srcs) {
            if (!node->requires_grad) continue;
            node->ensure_grad();
            for (std::size_t i = 0; i < node->data.size(); ++i) node->grad[i] += on->grad[row0 * n + i];
        }
    });
    return out;
}

template <typename R>
Tensor<R> concat_cols(const std::vector<Tensor<R>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols of zero tensors");
    const std::size_t m = parts[0].shape().size() == 2 ? parts[0].shape()[0] : 0;
    std::size_t n = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.shape()[0] != m)
            throw ShapeError("concat_cols: row mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        n += p.shape()[1];
    }
    Tensor<R> out({m, n});
    std::size_t col = 0;
    bool rg = false;
    std::vector<std::tuple<std::shared_ptr<TensorNode<R>>, std::size_t, std::size_t>> srcs;
    for (const auto& p : parts) {
        const std::size_t pn = p.shape()[1];
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(p.data().data() + i * pn, pn, out.data().data() + i * n + col);
        srcs.emplace_back(ops_access<R>::node(p), col, pn);
        col += pn;
        rg = rg || p.requires_grad();
    }
    detail::finish(out, rg, "concat_cols", [srcs = std::move(srcs), on = ops_access<R>::node(out), m, n]() {
        for (const auto& [node, col0, pn] : srcs) {
            if (!node->requires_grad) continue;
            node->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < pn; ++j) node->grad[i * pn + j] += on->grad[i * n + col0 + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Lookup / reductions / losses

template <typename R>
Tensor<R> embedding_lookup(const Tensor<R>& table, const std::vector<std::size_t>& indices) {
    detail::require_matrix(table, "embedding_lookup");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    for (std::size_t idx : indices)
        if (idx >= vocab)
            throw IndexError("embedding index " + std::to_string(idx) + " out of range for vocab " +
                             std::to_string(vocab));
    Tensor<R> out({indices.size(), d});
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(table.data().data() + indices[i] * d, d, out.data().data() + i * d);
    detail::finish(out, table.requires_grad(), "embedding_lookup",
                   [tn = ops_access<R>::node(table), on = ops_access<R>::node(out), indices, d]() {
                       if (!tn->requires_grad) return;
                       tn->ensure_grad();
                       for (std::size_t i = 0; i < indices.size(); ++i)
                           for (std::size_t j = 0; j < d; ++j) tn->grad[indices[i] * d + j] += on->grad[i * d + j];
                   });
    return out;
}

template <typename R>
Tensor<R> sum_all(const Tensor<R>& a) {
    Tensor<R> out({1});
    R s = R(0);
    for (R v : a.data()) s += v;
    out.data()[0] = s;
    detail::finish(out, a.requires_grad(), "sum",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out)]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += on->grad[0];
                   });
    return out;
}

template <typename R>
Tensor<R> mean_all(const Tensor<R>& a) {
    if (a.numel() == 0) throw DomainError("mean of an empty tensor");
    Tensor<R> out({1});
    R s = R(0);
    for (R v : a.data()) s += v;
    out.data()[0] = s / static_cast<R>(a.numel());
    detail::finish(out, a.requires_grad(), "mean",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out)]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       const R g = on->grad[0] / static_cast<R>(an->data.size());
                       for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += g;
                   });
    return out;
}

// Column means over rows: [m x n] -> [1 x n].
template <typename R>
Tensor<R> mean_rows(const Tensor<R>& a) {
    detail::require_matrix(a, "mean_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (m == 0) throw DomainError("mean_rows of an empty matrix");
    Tensor<R> out({1, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j] += a.data()[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out.data()[j] /= static_cast<R>(m);
    detail::finish(out, a.requires_grad(), "mean_rows",
                   [an = ops_access<R>::node(a), on = ops_access<R>::node(out), m, n]() {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                               an->grad[i * n + j] += on->grad[j] / static_cast<R>(m);
                   });
    return out;
}

// Scales row i of a by w[i]. Used by parameter-free frame attention.
template <typename R>
Tensor<R> scale_rows(const Tensor<R>& a, const Tensor<R>& w) {
    detail::require_matrix(a, "scale_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (w.numel() != m)
        throw ShapeError("scale_rows: weight length " + std::to_string(w.numel()) + " does not match rows of " +
                         shape_str(a.shape()));
    Tensor<R> out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = a.data()[i * n + j] * w.data()[i];
    bool rg = a.requires_grad() || w.requires_grad();
    detail::finish(out, rg, "scale_rows",
                   [an = ops_access<R>::node(a), wn = ops_access<R>::node(w), on = ops_access<R>::node(out), m, n]() {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                   an->grad[i * n + j] += on->grad[i * n + j] * wn->data[i];
                       }
                       if (wn->requires_grad) {
                           wn->ensure_grad();
                           for (std::size_t i = 0; i < m; ++i) {
                               R acc = R(0);
                               for (std::size_t j = 0; j < n; ++j) acc += on->grad[i * n + j] * an->data[i * n + j];
                               wn->grad[i] += acc;
                           }
                       }
                   });
    return out;
}

// Multiply by a one-element tensor, with gradients for both operands.
template <typename R>
Tensor<R> mul_scalar_t(const Tensor<R>& a, const Tensor<R>& s) {
    if (s.numel() != 1) throw ShapeError("mul_scalar_t expects a scalar tensor, got " + shape_str(s.shape()));
    Tensor<R> out(a.shape());
    const R sv = s.data()[0];
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * sv;
    bool rg = a.requires_grad() || s.requires_grad();
    detail::finish(out, rg, "mul_scalar_t",
                   [an = ops_access<R>::node(a), sn = ops_access<R>::node(s), on = ops_access<R>::node(out)]() {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < an->data.size(); ++i)
                               an->grad[i] += on->grad[i] * sn->data[0];
                       }
                       if (sn->requires_grad) {
                           R acc = R(0);
                           for (std::size_t i = 0; i < an->data.size(); ++i) acc += on->grad[i] * an->data[i];
                           sn->accumulate(0, acc);
                       }
                   });
    return out;
}

// Mean softmax cross-entropy over rows of logits against integer targets.
// Fused forward/backward keeps the rule exact: d logits = (p - onehot)/m.
template <typename R>
Tensor<R> softmax_cross_entropy(const Tensor<R>& logits, const std::vector<std::size_t>& targets) {
    detail::require_matrix(logits, "cross_entropy");
    const std::size_t m = logits.shape()[0], n = logits.shape()[1];
    if (targets.size() != m)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                         " rows");
    if (m == 0) throw ContractError("cross_entropy of an empty batch");
    for (std::size_t t : targets)
        if (t >= n) throw IndexError("cross_entropy target " + std::to_string(t) + " out of range " + std::to_string(n));
    Tensor<R> out({1});
    std::vector<R> probs(m * n);
    R total = R(0);
    for (std::size_t i = 0; i < m; ++i) {
        const R* x = logits.data().data() + i * n;
        R mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        R sum = R(0);
        for (std::size_t j = 0; j < n; ++j) {
            probs[i * n + j] = std::exp(x[j] - mx);
            sum += probs[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= sum;
        total += -(x[targets[i]] - mx - std::log(sum));
    }
    out.data()[0] = total / static_cast<R>(m);
    detail::finish(out, logits.requires_grad(), "cross_entropy",
                   [ln = ops_access<R>::node(logits), on = ops_access<R>::node(out), probs = std::move(probs),
                    targets, m, n]() {
                       if (!ln->requires_grad) return;
                       ln->ensure_grad();
                       const R g = on->grad[0] / static_cast<R>(m);
                       for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t j = 0; j < n; ++j) ln->grad[i * n + j] += g * probs[i * n + j];
                           ln->grad[i * n + targets[i]] -= g;
                       }
                   });
    return out;
}

// ---------------------------------------------------------------------------
// Small conveniences used throughout the model code

template <typename R>
Tensor<R> row(const Tensor<R>& a, std::size_t i) {
    return slice_rows(a, i, 1);
}

template <typename R>
Tensor<R> add3(const Tensor<R>& a, const Tensor<R>& b, const Tensor<R>& c) {
    return add(add(a, b), c);
}

}  // namespace uniadapter
