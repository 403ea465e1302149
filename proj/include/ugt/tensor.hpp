#pragma once

// Dense f64 tensors with a dynamic reverse-mode tape.
//
// Every op returns a new Tensor whose node remembers its inputs and a
// closure that pushes the output gradient back into them. Nodes are shared
// through shared_ptr, so a Tensor is a cheap handle: copying it aliases the
// same storage. Parameters are leaves created with requires_grad = true.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ugt/errors.hpp"

namespace ugt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows into it
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables taping on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                             std::to_string(values.size()) + " values");
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        return Tensor(std::move(node));
    }

    static Tensor parameter(Shape shape, std::vector<double> values) {
        Tensor t = constant(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        return t;
    }

    static Tensor zeros(Shape shape) {
        const std::size_t n = shape_numel(shape);
        return constant(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor filled(Shape shape, double v) {
        const std::size_t n = shape_numel(shape);
        return constant(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return constant({1}, {v}); }

    static Tensor identity(std::size_t n) {
        std::vector<double> v(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
        return constant({n, n}, std::move(v));
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const { return rank() == 2 ? dim(0) : 1; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const double> values() const { return node_->value; }
    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    double operator[](std::size_t i) const { return node_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

    /// In-place access for leaves only (optimizer updates, perturbation in checks).
    std::span<double> mutable_values() {
        if (node_->backward_fn) throw ContractError("mutable_values() on a non-leaf tensor");
        return node_->value;
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return !node_->backward_fn; }
    const char* op() const { return node_->op; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    double grad_at(std::size_t i) const { return has_grad() ? node_->grad[i] : 0.0; }
    void zero_grad() { node_->grad.clear(); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    /// Fresh leaf with copied values, cut from any tape.
    Tensor detach() const {
        Tensor t = constant(shape(), node_->value);
        return t;
    }

    friend Tensor make_op(const char*, Shape, std::vector<double>, std::vector<Tensor>,
                          std::function<void(detail::Node&)>);
    friend void backward(const Tensor& loss);
    friend detail::Node& node_of(const Tensor& t);

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

inline detail::Node& node_of(const Tensor& t) { return *t.node_; }

/// Wraps a freshly computed value as a taped op result.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward_fn) {
#ifndef NDEBUG
    for (double v : value) {
        assert(std::isfinite(v) && "non-finite value produced by forward op");
    }
#endif
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs_grad = false;
    if (detail::grad_enabled) {
        for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
    }
    if (needs_grad) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(std::move(in.node_));
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// interior gradients are released once propagated.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node_.get(), 0}};
    visited.insert(loss.node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (!node->backward_fn || node->grad.empty()) continue;
        node->backward_fn(*node);
        node->grad.clear();
    }
}

namespace detail {

inline std::vector<double>* grad_target(Node& self, std::size_t k) {
    Node& in = *self.inputs[k];
    return in.requires_grad ? &in.grad_buffer() : nullptr;
}

inline Tensor unary(const char* op, const Tensor& x, double (*f)(double),
                    double (*df)(double x, double y)) {
    std::vector<double> out(x.numel());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    return make_op(op, x.shape(), std::move(out), {x}, [df](Node& self) {
        auto* g = grad_target(self, 0);
        if (!g) return;
        const auto& xin = self.inputs[0]->value;
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            (*g)[i] += self.grad[i] * df(xin[i], self.value[i]);
        }
    });
}

enum class Broadcast { same, scalar, row };

inline Broadcast classify(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::same;
    if (b.numel() == 1) return Broadcast::scalar;
    if (b.rank() == 1 && b.dim(0) == a.cols()) return Broadcast::row;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

inline std::size_t b_index(Broadcast kind, std::size_t i, std::size_t cols) {
    switch (kind) {
        case Broadcast::same: return i;
        case Broadcast::scalar: return 0;
        case Broadcast::row: return i % cols;
    }
    return i;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> c(m * n, 0.0);
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &bv[p * n];
            double* crow = &c[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return make_op("matmul", {m, n}, std::move(c), {a, b}, [m, k, n](detail::Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        const auto& dc = self.grad;
        if (auto* da = detail::grad_target(self, 0)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * bv[p * n + j];
                    (*da)[i * k + p] += acc;
                }
        }
        if (auto* db = detail::grad_target(self, 1)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    if (aip == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) (*db)[p * n + j] += aip * dc[i * n + j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
    const std::size_t r = x.dim(0), c = x.dim(1);
    std::vector<double> out(r * c);
    auto xv = x.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
    return make_op("transpose", {c, r}, std::move(out), {x}, [r, c](detail::Node& self) {
        if (auto* g = detail::grad_target(self, 0)) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[j * r + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand may be a same-shape tensor, a
// single-element tensor, or (add/sub only) a vector matching the last axis.

inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto kind = detail::classify(a, b, "add");
    const std::size_t cols = a.cols();
    std::vector<double> out(a.numel());
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[detail::b_index(kind, i, cols)];
    return make_op("add", a.shape(), std::move(out), {a, b}, [kind, cols](detail::Node& self) {
        if (auto* ga = detail::grad_target(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
        if (auto* gb = detail::grad_target(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                (*gb)[detail::b_index(kind, i, cols)] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    const auto kind = detail::classify(a, b, "sub");
    const std::size_t cols = a.cols();
    std::vector<double> out(a.numel());
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[detail::b_index(kind, i, cols)];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [kind, cols](detail::Node& self) {
        if (auto* ga = detail::grad_target(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
        if (auto* gb = detail::grad_target(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                (*gb)[detail::b_index(kind, i, cols)] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.numel() == 1 && b.numel() != 1) return mul(b, a);
    const auto kind = detail::classify(a, b, "mul");
    if (kind == detail::Broadcast::row) {
        throw ShapeError("mul: row broadcast not supported for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(a.numel());
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[detail::b_index(kind, i, 0)];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [kind](detail::Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (auto* ga = detail::grad_target(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                (*ga)[i] += self.grad[i] * bv[detail::b_index(kind, i, 0)];
        if (auto* gb = detail::grad_target(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                (*gb)[detail::b_index(kind, i, 0)] += self.grad[i] * av[i];
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
    return make_op("scale", x.shape(), std::move(out), {x}, [c](detail::Node& self) {
        if (auto* g = detail::grad_target(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += c * self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Tensor relu(const Tensor& x) {
    return detail::unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    return detail::unary(
        "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + v * pdf;
        });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        "sigmoid", x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor log(const Tensor& x) {
    return detail::unary(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    const auto xv = x.values();
    double acc = 0.0;
    for (double v : xv) acc += v;
    return make_op("sum", {1}, {acc}, {x}, [](detail::Node& self) {
        if (auto* g = detail::grad_target(self, 0))
            for (double& v : *g) v += self.grad[0];
    });
}

namespace detail {

struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

/// Sums out one axis; the result drops that axis (rank-1 input gives shape [1]).
inline Tensor sum(const Tensor& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis, "sum");
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    std::vector<double> out(s.outer * s.inner, 0.0);
    auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.n; ++j)
            for (std::size_t k = 0; k < s.inner; ++k)
                out[o * s.inner + k] += xv[(o * s.n + j) * s.inner + k];
    return make_op("sum_axis", std::move(out_shape), std::move(out), {x}, [s](detail::Node& self) {
        if (auto* g = detail::grad_target(self, 0))
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t j = 0; j < s.n; ++j)
                    for (std::size_t k = 0; k < s.inner; ++k)
                        (*g)[(o * s.n + j) * s.inner + k] += self.grad[o * s.inner + k];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor mean(const Tensor& x, std::size_t axis) {
    return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Normalisations

/// Max-shifted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis, "softmax");
    std::vector<double> out(x.numel());
    auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.inner; ++k) {
            auto idx = [&](std::size_t j) { return (o * s.n + j) * s.inner + k; };
            double mx = xv[idx(0)];
            for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, xv[idx(j)]);
            double z = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) {
                out[idx(j)] = std::exp(xv[idx(j)] - mx);
                z += out[idx(j)];
            }
            for (std::size_t j = 0; j < s.n; ++j) out[idx(j)] /= z;
        }
    return make_op("softmax", x.shape(), std::move(out), {x}, [s](detail::Node& self) {
        auto* g = detail::grad_target(self, 0);
        if (!g) return;
        const auto& y = self.value;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < s.inner; ++k) {
                auto idx = [&](std::size_t j) { return (o * s.n + j) * s.inner + k; };
                double dot = 0.0;
                for (std::size_t j = 0; j < s.n; ++j) dot += self.grad[idx(j)] * y[idx(j)];
                for (std::size_t j = 0; j < s.n; ++j)
                    (*g)[idx(j)] += y[idx(j)] * (self.grad[idx(j)] - dot);
            }
    });
}

/// gamma * (x - mean) / sqrt(var + eps) + beta over the last axis (biased variance).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.cols();
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    std::vector<double> out(x.numel()), xhat(x.numel()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = &xv[r * d];
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * rstd[r];
            out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
        }
    }
    return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                   [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
                       const auto& gv = self.inputs[1]->value;
                       auto* gx = detail::grad_target(self, 0);
                       auto* gg = detail::grad_target(self, 1);
                       auto* gb = detail::grad_target(self, 2);
                       std::vector<double> dxhat(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* dy = &self.grad[r * d];
                           const double* xh = &xhat[r * d];
                           double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                               dxhat[j] = dy[j] * gv[j];
                               mean_dxhat += dxhat[j];
                               mean_dxhat_xhat += dxhat[j] * xh[j];
                               if (gg) (*gg)[j] += dy[j] * xh[j];
                               if (gb) (*gb)[j] += dy[j];
                           }
                           if (!gx) continue;
                           mean_dxhat /= static_cast<double>(d);
                           mean_dxhat_xhat /= static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j)
                               (*gx)[r * d + j] +=
                                   rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                       }
                   });
}

/// Scales each last-axis slice to unit L2 norm; all-zero slices map to zero.
inline Tensor l2_normalize(const Tensor& x) {
    const std::size_t d = x.cols();
    const std::size_t rows = x.numel() / d;
    auto xv = x.values();
    std::vector<double> out(x.numel(), 0.0), norms(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
        norms[r] = std::sqrt(ss);
        if (norms[r] == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norms[r];
    }
    return make_op("l2_normalize", x.shape(), std::move(out), {x},
                   [d, rows, norms = std::move(norms)](detail::Node& self) {
                       auto* g = detail::grad_target(self, 0);
                       if (!g) return;
                       const auto& y = self.value;
                       for (std::size_t r = 0; r < rows; ++r) {
                           if (norms[r] == 0.0) continue;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * self.grad[r * d + j];
                           for (std::size_t j = 0; j < d; ++j)
                               (*g)[r * d + j] += (self.grad[r * d + j] - y[r * d + j] * dot) / norms[r];
                       }
                   });
}

// ---------------------------------------------------------------------------
// Structural ops

/// Concatenates along the last axis; all leading dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        Shape pl(p.shape().begin(), p.shape().end() - 1);
        if (pl != lead) {
            throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                             shape_str(p.shape()));
        }
        widths.push_back(p.cols());
        total += p.cols();
    }
    const std::size_t rows = shape_numel(lead);
    std::vector<double> out(rows * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto pv = parts[k].values();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(&pv[r * widths[k]], widths[k], &out[r * total + offset]);
        offset += widths[k];
    }
    Shape shape = lead;
    shape.push_back(total);
    return make_op("concat", std::move(shape), std::move(out), parts,
                   [rows, total, widths](detail::Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                           if (auto* g = detail::grad_target(self, k))
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < widths[k]; ++j)
                                       (*g)[r * widths[k] + j] += self.grad[r * total + offset + j];
                           offset += widths[k];
                       }
                   });
}

/// Columns [begin, begin + width) of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t width) {
    const std::size_t d = x.cols();
    if (begin + width > d) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(begin + width) +
                         ") exceeds last axis of " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(rows * width);
    auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(&xv[r * d + begin], width, &out[r * width]);
    Shape shape = x.shape();
    shape.back() = width;
    return make_op("slice", std::move(shape), std::move(out), {x}, [rows, d, begin, width](detail::Node& self) {
        if (auto* g = detail::grad_target(self, 0))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < width; ++j) (*g)[r * d + begin + j] += self.grad[r * width + j];
    });
}

inline std::vector<Tensor> split(const Tensor& x, const std::vector<std::size_t>& widths) {
    const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
    if (total != x.cols()) {
        throw ShapeError("split: widths sum to " + std::to_string(total) + " but last axis of " +
                         shape_str(x.shape()) + " differs");
    }
    std::vector<Tensor> parts;
    std::size_t begin = 0;
    for (std::size_t w : widths) {
        parts.push_back(slice_last(x, begin, w));
        begin += w;
    }
    return parts;
}

/// Row lookup: out[r] = table[indices[r]].
inline Tensor gather(const Tensor& table, std::span<const std::size_t> indices) {
    if (table.rank() != 2) throw ShapeError("gather: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t n = table.dim(0), d = table.dim(1);
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    std::vector<double> out(idx.size() * d);
    auto tv = table.values();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n) {
            throw ContractError("gather: index " + std::to_string(idx[r]) + " out of range for " +
                                std::to_string(n) + " rows");
        }
        std::copy_n(&tv[idx[r] * d], d, &out[r * d]);
    }
    Shape shape{idx.size(), d};
    return make_op("gather", std::move(shape), std::move(out), {table}, [d, idx = std::move(idx)](detail::Node& self) {
        if (auto* g = detail::grad_target(self, 0))
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < d; ++j) (*g)[idx[r] * d + j] += self.grad[r * d + j];
    });
}

inline Tensor gather(const Tensor& table, std::initializer_list<std::size_t> indices) {
    return gather(table, std::span<const std::size_t>(indices.begin(), indices.size()));
}

/// Stacks 2-D blocks with equal column counts on top of each other.
inline Tensor stack_rows(const std::vector<Tensor>& blocks) {
    std::vector<Tensor> cols;
    cols.reserve(blocks.size());
    for (const auto& b : blocks) cols.push_back(transpose(b));
    return transpose(concat(cols));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return make_op("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
        if (auto* g = detail::grad_target(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    });
}

/// Squared L2 norm composed from primitives.
inline Tensor squared_norm(const Tensor& x) { return sum(mul(x, x)); }

}  // namespace ugt
