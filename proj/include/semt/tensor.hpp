// SPDX-License-Identifier: Apache-2.0
#pragma once

/**
 * @file tensor.hpp
 * @brief Dense row-major tensors with graph-based reverse-mode autodiff.
 *
 * A Tensor is a cheap handle onto a shared graph node. Operations on tensors
 * that require gradients record their inputs and a backward closure; calling
 * backward() on a scalar result walks the graph in reverse topological order
 * and accumulates gradients into every leaf that requires them.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "semt/error.hpp"

namespace semt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline thread_local int no_grad_depth = 0;

} // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

namespace testing {

/// Fault injection for verifying that gradient checks catch broken
/// backward passes. When set, the named op scales its input gradient by
/// `factor`. Never set outside tests and the gradcheck negative control.
struct BackwardFault {
    std::string op;
    double factor = 1.0;
};

inline BackwardFault& backward_fault() {
    static thread_local BackwardFault fault;
    return fault;
}

class ScopedBackwardFault {
public:
    ScopedBackwardFault(std::string op, double factor) {
        backward_fault() = BackwardFault{std::move(op), factor};
    }
    ~ScopedBackwardFault() { backward_fault() = BackwardFault{}; }
    ScopedBackwardFault(const ScopedBackwardFault&) = delete;
    ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;
};

inline double fault_factor(const char* op) {
    const auto& f = backward_fault();
    return (!f.op.empty() && f.op == op) ? f.factor : 1.0;
}

} // namespace testing

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false) {
        std::vector<double> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw ShapeError("ragged matrix literal");
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(data), requires_grad);
    }

    template <class Rng>
    static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = dist(rng);
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(rank() - 1); }

    std::span<const double> data() const { return node_->data; }
    /// Direct write access; only meaningful on leaves (parameters, inputs).
    std::span<double> mutable_data() { return node_->data; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }
    const char* op() const { return node_->op; }

    /// Identity of the underlying storage; two handles alias iff equal.
    const void* storage_id() const { return node_.get(); }

    /// Copy of the values with no graph history.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    Tensor reshaped(Shape s) const;

    /// Reverse-mode sweep from a single-element tensor. Interior gradients
    /// are recomputed on every call; leaf gradients accumulate.
    void backward(double seed = 1.0) const {
        if (numel() != 1) {
            throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
        }
        if (!node_->requires_grad) return;

        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                auto* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        for (auto* n : order) {
            if (n->backward) n->grad.assign(n->data.size(), 0.0);
        }
        node_->grad_buffer()[0] += seed;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward) (*it)->backward(**it);
        }
    }

    // Internal: used by op implementations.
    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

/// Builds an op result. The backward closure receives the output node and
/// is responsible for accumulating into parents that require gradients.
inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs, const char* op,
                          std::function<void(Node&)> backward) {
    check_finite(data, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto* t : inputs) needs = needs || t->requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto* t : inputs) node->parents.push_back(t->node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline Tensor make_result_n(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                            const char* op, std::function<void(Node&)> backward) {
    check_finite(data, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& t : inputs) needs = needs || t.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& t : inputs) node->parents.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// C[m×n] += A[m×k]·B[k×n]
inline void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* __restrict crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m×k] += A[m×n]·B[k×n]ᵀ, via an explicit transpose of B so the inner loop
// is an axpy rather than a reduction.
inline void gemm_nt(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                    std::size_t n, std::size_t k) {
    thread_local std::vector<double> bt;
    bt.resize(n * k);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    gemm_nn(a, bt.data(), c, m, n, k);
}

// C[k×n] += A[m×k]ᵀ·B[m×n]
inline void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* __restrict brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* __restrict crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

inline Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    }
    return detail::make_result(std::move(s), node_->data, {this}, "reshape", [](detail::Node& out) {
        auto& g = out.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
}

/// Matrix product. `a` is [..., m, k]; `b` is either [k, n] (shared across the
/// leading batch dimensions of `a`) or [..., k, n] with identical leading dims.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    auto mismatch = [&] {
        return ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    };
    if (a.rank() < 2 || b.rank() < 2) throw mismatch();
    const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != k2) throw mismatch();
    const bool shared_b = b.rank() == 2;
    if (!shared_b) {
        if (a.rank() != b.rank() ||
            !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
            throw mismatch();
        }
    }
    const std::size_t batch = a.numel() / (m * k);
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<double> out(batch * m * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t s = 0; s < batch; ++s) {
        detail::gemm_nn(ad + s * m * k, bd + (shared_b ? 0 : s * k * n), out.data() + s * m * n, m, k, n);
    }
    return detail::make_result(std::move(out_shape), std::move(out), {&a, &b}, "matmul",
                               [=](detail::Node& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        for (std::size_t s = 0; s < batch; ++s) {
            const double* g = o.grad.data() + s * m * n;
            const std::size_t boff = shared_b ? 0 : s * k * n;
            if (pa.requires_grad) {
                detail::gemm_nt(g, pb.data.data() + boff, pa.grad_buffer().data() + s * m * k, m, n, k);
            }
            if (pb.requires_grad) {
                detail::gemm_tn(pa.data.data() + s * m * k, g, pb.grad_buffer().data() + boff, m, k, n);
            }
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank2(x, "transpose");
    const std::size_t r = x.rows(), c = x.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return detail::make_result({c, r}, std::move(out), {&x}, "transpose", [=](detail::Node& o) {
        auto& g = o.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
    });
}

/// Elementwise sum. `b` may also be a vector matching the last axis of `a`,
/// in which case it is broadcast over rows.
inline Tensor add(const Tensor& a, const Tensor& b) {
    const bool row_broadcast = b.rank() == 1 && a.shape() != b.shape() && a.cols() == b.numel();
    if (!row_broadcast) detail::require_same_shape(a, b, "add");
    const std::size_t n = b.numel();
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "add", [n](detail::Node& o) {
        if (o.parents[0]->requires_grad) {
            auto& g = o.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            auto& g = o.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % n] += o.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "sub", [](detail::Node& o) {
        if (o.parents[0]->requires_grad) {
            auto& g = o.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            auto& g = o.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "mul", [](detail::Node& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.data[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= s;
    return detail::make_result(x.shape(), std::move(out), {&x}, "scale", [s](detail::Node& o) {
        auto& g = o.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
    });
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return detail::make_result(x.shape(), std::move(out), {&x}, "relu", [](detail::Node& o) {
        auto& p = *o.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (p.data[i] > 0.0) g[i] += o.grad[i];
        }
    });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return detail::make_result(x.shape(), std::move(out), {&x}, "sigmoid", [](detail::Node& o) {
        const double f = testing::fault_factor("sigmoid");
        auto& g = o.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = o.data[i];
            g[i] += f * o.grad[i] * y * (1.0 - y);
        }
    });
}

/// Softmax over the last axis with max-subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t n = x.cols();
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * n;
        double* y = out.data() + r * n;
        const double mx = *std::max_element(in, in + n);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += (y[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
    }
    return detail::make_result(x.shape(), std::move(out), {&x}, "softmax_rows",
                               [n, rows](detail::Node& o) {
        const double f = testing::fault_factor("softmax_rows");
        auto& g = o.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = o.data.data() + r * n;
            const double* gy = o.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += f * y[j] * (gy[j] - dot);
        }
    });
}

/// Scales each row (last axis) to unit L2 norm. All-zero rows stay zero and
/// pass no gradient.
inline Tensor l2_normalize_rows(const Tensor& x) {
    const std::size_t n = x.cols();
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel(), 0.0);
    std::vector<double> norms(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * n;
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += in[j] * in[j];
        norms[r] = std::sqrt(ss);
        if (norms[r] > 0.0) {
            for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[j] / norms[r];
        }
    }
    return detail::make_result(x.shape(), std::move(out), {&x}, "l2_normalize_rows",
                               [n, rows, norms = std::move(norms)](detail::Node& o) {
        auto& g = o.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            if (norms[r] == 0.0) continue;
            const double* y = o.data.data() + r * n;
            const double* gy = o.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += (gy[j] - y[j] * dot) / norms[r];
        }
    });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Normalizes the last axis to zero mean / unit variance, then applies the
/// learnable per-feature scale and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& scale_, const Tensor& shift,
                         double eps = kLayerNormEpsilon) {
    const std::size_t n = x.cols();
    if (scale_.numel() != n || shift.numel() != n) {
        throw ShapeError("layer_norm: scale/shift of size " + std::to_string(scale_.numel()) +
                         " do not match feature width " + std::to_string(n));
    }
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += in[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (in[j] - mean) * inv_std[r];
            xhat[r * n + j] = h;
            out[r * n + j] = h * scale_[j] + shift[j];
        }
    }
    return detail::make_result(x.shape(), std::move(out), {&x, &scale_, &shift}, "layer_norm",
                               [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& o) {
        auto& px = *o.parents[0];
        auto& pg = *o.parents[1];
        auto& pb = *o.parents[2];
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gy = o.grad.data() + r * n;
            const double* h = xhat.data() + r * n;
            if (pg.requires_grad) {
                auto& g = pg.grad_buffer();
                for (std::size_t j = 0; j < n; ++j) g[j] += gy[j] * h[j];
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_buffer();
                for (std::size_t j = 0; j < n; ++j) g[j] += gy[j];
            }
            if (px.requires_grad) {
                double mean_d = 0.0, mean_dh = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = gy[j] * pg.data[j];
                    mean_d += d;
                    mean_dh += d * h[j];
                }
                mean_d /= static_cast<double>(n);
                mean_dh /= static_cast<double>(n);
                auto& g = px.grad_buffer();
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = gy[j] * pg.data[j];
                    g[r * n + j] += inv_std[r] * (d - mean_d - h[j] * mean_dh);
                }
            }
        }
    });
}

/// Joins matrices along the column axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts[0].rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<double> out(rows * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p.data().data() + r * p.cols(), p.cols(), out.data() + r * total + off);
        }
        off += p.cols();
    }
    return detail::make_result_n({rows, total}, std::move(out), parts, "concat_cols",
                                 [rows, total, widths](detail::Node& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            auto& p = *o.parents[k];
            if (p.requires_grad) {
                auto& g = p.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += o.grad[r * total + off + j];
            }
            off += widths[k];
        }
    });
}

/// Stacks matrices along the row axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = parts[0].cols();
    std::vector<std::size_t> sizes;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.cols() != cols) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        sizes.push_back(p.numel());
        rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(rows * cols);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return detail::make_result_n({rows, cols}, std::move(out), parts, "concat_rows",
                                 [sizes](detail::Node& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            auto& p = *o.parents[k];
            if (p.requires_grad) {
                auto& g = p.grad_buffer();
                for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += o.grad[off + i];
            }
            off += sizes[k];
        }
    });
}

/// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_rank2(x, "slice_cols");
    if (begin >= end || end > x.cols()) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for " + shape_str(x.shape()));
    }
    const std::size_t rows = x.rows(), cols = x.cols(), w = end - begin;
    std::vector<double> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.data().data() + r * cols + begin, w, out.data() + r * w);
    }
    return detail::make_result({rows, w}, std::move(out), {&x}, "slice_cols",
                               [=](detail::Node& o) {
        auto& g = o.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) g[r * cols + begin + j] += o.grad[r * w + j];
    });
}

/// x·W + b with W laid out [in × out].
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

/// Gathers rows of `table` by id.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
    detail::require_rank2(table, "embedding");
    const std::size_t v = table.rows(), d = table.cols();
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
            throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table of " +
                             std::to_string(v) + " rows");
        }
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    if (ids.empty()) throw ShapeError("embedding: empty id list");
    std::vector<int> idv(ids.begin(), ids.end());
    return detail::make_result({ids.size(), d}, std::move(out), {&table}, "embedding",
                               [d, idv = std::move(idv)](detail::Node& o) {
        auto& g = o.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idv[i]) * d + j] += o.grad[i * d + j];
    });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_result({1}, {s}, {&x}, "sum", [](detail::Node& o) {
        auto& g = o.parents[0]->grad_buffer();
        for (auto& v : g) v += o.grad[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Inverted dropout; identity when rate is zero.
template <class Rng>
Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<double> maskv(x.numel());
    for (auto& m : maskv) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
    return mul(x, Tensor(x.shape(), std::move(maskv)));
}

/// Mean token-level negative log-likelihood of `targets` under row-wise
/// softmax(logits), skipping positions whose target is `pad_id`.
inline Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> targets, int pad_id) {
    detail::require_rank2(logits, "cross_entropy_loss");
    const std::size_t L = logits.rows(), V = logits.cols();
    if (targets.size() > L) {
        throw ShapeError("cross_entropy_loss: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(L) + " logit rows");
    }
    std::vector<double> probs(L * V, 0.0);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (targets[t] == pad_id) continue;
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V) {
            throw ShapeError("cross_entropy_loss: target id " + std::to_string(targets[t]) + " out of range");
        }
        const double* row = logits.data().data() + t * V;
        const double mx = *std::max_element(row, row + V);
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        const double log_z = mx + std::log(z);
        for (std::size_t j = 0; j < V; ++j) probs[t * V + j] = std::exp(row[j] - log_z);
        total += log_z - row[targets[t]];
        ++count;
    }
    if (count == 0) throw TrainingError("empty loss support: every target position is padding");
    std::vector<int> tv(targets.begin(), targets.end());
    const double inv = 1.0 / static_cast<double>(count);
    return detail::make_result({1}, {total * inv}, {&logits}, "cross_entropy",
                               [V, inv, pad_id, tv = std::move(tv), probs = std::move(probs)](detail::Node& o) {
        auto& g = o.parents[0]->grad_buffer();
        const double gs = o.grad[0] * inv;
        for (std::size_t t = 0; t < tv.size(); ++t) {
            if (tv[t] == pad_id) continue;
            for (std::size_t j = 0; j < V; ++j) g[t * V + j] += gs * probs[t * V + j];
            g[t * V + static_cast<std::size_t>(tv[t])] -= gs;
        }
    });
}

} // namespace semt
