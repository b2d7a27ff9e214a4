#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tensor is a shared handle to a graph node. Nodes are immutable once
// built; only leaves expose their storage for optimizer updates between
// graph constructions. Binary ops broadcast over leading dimensions only:
// the smaller operand's shape must be a suffix of the larger one's.

#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace quantlab {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

} // namespace detail

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        for (auto dim : shape) {
            if (dim == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape));
        }
        if (values.size() != numel(shape)) {
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                             shape_string(shape));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto n = numel(shape);
        return from(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::span<const double> values() const { return node_->value; }
    double operator[](std::size_t i) const { return node_->value[i]; }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::string_view op() const { return node_->op; }
    bool is_leaf() const { return node_->op == "leaf"; }

    double item() const {
        if (size() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
        return node_->value[0];
    }

    // Leaf storage, for optimizers and codebook maintenance between graph builds.
    std::span<double> mutable_values() {
        if (!is_leaf()) throw Error("mutable_values: only leaf tensors may be updated in place");
        return node_->value;
    }

    void zero_grad() { node_->grad.clear(); }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> value,
                          std::vector<std::shared_ptr<Node>> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    node->requires_grad =
        std::any_of(inputs.begin(), inputs.end(), [](const auto& in) { return in->requires_grad; });
    if (node->requires_grad) {
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline Shape broadcast_shape(std::string_view op, const Shape& a, const Shape& b) {
    if (a == b) return a;
    if (is_suffix(b, a)) return a;
    if (is_suffix(a, b)) return b;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

// out[i] = f(a[i % na], b[i % nb]); da/db give partial derivatives given (x, y, out).
template <class F, class DA, class DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
    Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
    const std::size_t n = numel(out_shape);
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    auto av = a.values();
    auto bv = b.values();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i % na], bv[i % nb]);
    return make_result(op, std::move(out_shape), std::move(out), {a.node(), b.node()}, [na, nb, da, db](Node& self) {
        Node& x = *self.inputs[0];
        Node& y = *self.inputs[1];
        const std::size_t count = self.value.size();
        if (x.requires_grad) {
            x.ensure_grad();
            for (std::size_t i = 0; i < count; ++i) {
                x.grad[i % na] += self.grad[i] * da(x.value[i % na], y.value[i % nb], self.value[i]);
            }
        }
        if (y.requires_grad) {
            y.ensure_grad();
            for (std::size_t i = 0; i < count; ++i) {
                y.grad[i % nb] += self.grad[i] * db(x.value[i % na], y.value[i % nb], self.value[i]);
            }
        }
    });
}

// out[i] = f(x[i]); df(x, out) is the derivative.
template <class F, class DF>
Tensor unary(std::string_view op, const Tensor& a, F f, DF df) {
    auto av = a.values();
    std::vector<double> out(av.size());
    std::transform(av.begin(), av.end(), out.begin(), f);
    return make_result(op, a.shape(), std::move(out), {a.node()}, [df](Node& self) {
        Node& x = *self.inputs[0];
        x.ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i) x.grad[i] += self.grad[i] * df(x.value[i], self.value[i]);
    });
}

inline void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
    }
}

} // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::unary(
        "scale", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary(
        "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor tanh(const Tensor& a) {
    return detail::unary(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor tan(const Tensor& a) {
    return detail::unary(
        "tan", a, [](double x) { return std::tan(x); }, [](double, double y) { return 1.0 + y * y; });
}

inline Tensor arccos(const Tensor& a) {
    return detail::unary(
        "arccos", a, [](double x) { return std::acos(x); },
        [](double x, double) { return -1.0 / std::sqrt(1.0 - x * x); });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }

// ---- gradient control ------------------------------------------------------

/// Forward copy that contributes nothing to the backward pass.
inline Tensor stop_gradient(const Tensor& a) {
    return detail::make_result("stop_gradient", a.shape(), std::vector<double>(a.values().begin(), a.values().end()),
                               {}, {});
}

/// Round half away from zero. Piecewise constant, so the result carries no gradient.
inline Tensor round(const Tensor& a) {
    std::vector<double> out(a.size());
    std::transform(a.values().begin(), a.values().end(), out.begin(), [](double x) { return std::round(x); });
    return detail::make_result("round", a.shape(), std::move(out), {}, {});
}

/// Round with straight-through gradients: x + stop_gradient(round(x) - x).
inline Tensor round_ste(const Tensor& x) { return x + stop_gradient(round(x) - x); }

// ---- shape -----------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
    }
    return detail::make_result("reshape", std::move(shape), std::vector<double>(a.values().begin(), a.values().end()),
                               {a.node()}, [](detail::Node& self) {
                                   detail::Node& x = *self.inputs[0];
                                   x.ensure_grad();
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
                               });
}

// ---- linear algebra --------------------------------------------------------

/// (n, k) x (k, m) -> (n, m).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    }
    std::vector<double> out(n * m, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* row = out.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = av[i * k + p];
            if (s == 0.0) continue;
            const double* brow = bv + p * m;
            for (std::size_t j = 0; j < m; ++j) row[j] += s * brow[j];
        }
    }
    return detail::make_result("matmul", {n, m}, std::move(out), {a.node(), b.node()},
                               [n, k, m](detail::Node& self) {
                                   detail::Node& x = *self.inputs[0];
                                   detail::Node& y = *self.inputs[1];
                                   const double* g = self.grad.data();
                                   if (x.requires_grad) {
                                       x.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i) {
                                           for (std::size_t p = 0; p < k; ++p) {
                                               const double* yrow = y.value.data() + p * m;
                                               const double* grow = g + i * m;
                                               double acc = 0.0;
                                               for (std::size_t j = 0; j < m; ++j) acc += grow[j] * yrow[j];
                                               x.grad[i * k + p] += acc;
                                           }
                                       }
                                   }
                                   if (y.requires_grad) {
                                       y.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i) {
                                           const double* grow = g + i * m;
                                           for (std::size_t p = 0; p < k; ++p) {
                                               const double s = x.value[i * k + p];
                                               if (s == 0.0) continue;
                                               double* gy = y.grad.data() + p * m;
                                               for (std::size_t j = 0; j < m; ++j) gy[j] += s * grow[j];
                                           }
                                       }
                                   }
                               });
}

/// Squared Euclidean distances between rows: (n, d), (k, d) -> (n, k).
inline Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
    detail::require_rank("pairwise_sq_dist", a, 2);
    detail::require_rank("pairwise_sq_dist", b, 2);
    const std::size_t n = a.dim(0), d = a.dim(1), k = b.dim(0);
    if (b.dim(1) != d) {
        throw ShapeError("pairwise_sq_dist: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    std::vector<double> out(n * k);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = av[i * d + c] - bv[j * d + c];
                acc += diff * diff;
            }
            out[i * k + j] = acc;
        }
    }
    return detail::make_result("pairwise_sq_dist", {n, k}, std::move(out), {a.node(), b.node()},
                               [n, d, k](detail::Node& self) {
                                   detail::Node& x = *self.inputs[0];
                                   detail::Node& y = *self.inputs[1];
                                   if (x.requires_grad) x.ensure_grad();
                                   if (y.requires_grad) y.ensure_grad();
                                   for (std::size_t i = 0; i < n; ++i) {
                                       for (std::size_t j = 0; j < k; ++j) {
                                           const double g = 2.0 * self.grad[i * k + j];
                                           if (g == 0.0) continue;
                                           for (std::size_t c = 0; c < d; ++c) {
                                               const double diff = x.value[i * d + c] - y.value[j * d + c];
                                               if (x.requires_grad) x.grad[i * d + c] += g * diff;
                                               if (y.requires_grad) y.grad[j * d + c] -= g * diff;
                                           }
                                       }
                                   }
                               });
}

/// Row lookup: table (v, e), indices -> (indices.size(), e). Gradients scatter-add.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
    detail::require_rank("gather_rows", table, 2);
    const std::size_t v = table.dim(0), e = table.dim(1);
    std::vector<double> out(indices.size() * e);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= v) {
            throw ShapeError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " +
                             shape_string(table.shape()));
        }
        std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(indices[r] * e), e, out.begin() + static_cast<std::ptrdiff_t>(r * e));
    }
    std::vector<std::size_t> saved(indices.begin(), indices.end());
    return detail::make_result("gather_rows", {indices.size(), e}, std::move(out), {table.node()},
                               [saved = std::move(saved), e](detail::Node& self) {
                                   detail::Node& t = *self.inputs[0];
                                   t.ensure_grad();
                                   for (std::size_t r = 0; r < saved.size(); ++r) {
                                       for (std::size_t c = 0; c < e; ++c) t.grad[saved[r] * e + c] += self.grad[r * e + c];
                                   }
                               });
}

/// Picks one entry per row: x (n, k), columns (n) -> (n).
inline Tensor pick_columns(const Tensor& x, std::span<const std::size_t> columns) {
    detail::require_rank("pick_columns", x, 2);
    const std::size_t n = x.dim(0), k = x.dim(1);
    if (columns.size() != n) {
        throw ShapeError("pick_columns: " + std::to_string(columns.size()) + " columns for shape " +
                         shape_string(x.shape()));
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (columns[i] >= k) throw ShapeError("pick_columns: column " + std::to_string(columns[i]) + " out of range");
        out[i] = x[i * k + columns[i]];
    }
    std::vector<std::size_t> saved(columns.begin(), columns.end());
    return detail::make_result("pick_columns", {n}, std::move(out), {x.node()},
                               [saved = std::move(saved), k](detail::Node& self) {
                                   detail::Node& in = *self.inputs[0];
                                   in.ensure_grad();
                                   for (std::size_t i = 0; i < saved.size(); ++i) in.grad[i * k + saved[i]] += self.grad[i];
                               });
}

/// Column-wise concatenation of matrices: (n, p), (n, q) -> (n, p + q).
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    detail::require_rank("concat_cols", a, 2);
    detail::require_rank("concat_cols", b, 2);
    const std::size_t n = a.dim(0), p = a.dim(1), q = b.dim(1);
    if (b.dim(0) != n) {
        throw ShapeError("concat_cols: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    std::vector<double> out(n * (p + q));
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.values().data() + i * p, p, out.data() + i * (p + q));
        std::copy_n(b.values().data() + i * q, q, out.data() + i * (p + q) + p);
    }
    return detail::make_result("concat_cols", {n, p + q}, std::move(out), {a.node(), b.node()},
                               [n, p, q](detail::Node& self) {
                                   detail::Node& x = *self.inputs[0];
                                   detail::Node& y = *self.inputs[1];
                                   if (x.requires_grad) x.ensure_grad();
                                   if (y.requires_grad) y.ensure_grad();
                                   for (std::size_t i = 0; i < n; ++i) {
                                       const double* g = self.grad.data() + i * (p + q);
                                       if (x.requires_grad) {
                                           for (std::size_t c = 0; c < p; ++c) x.grad[i * p + c] += g[c];
                                       }
                                       if (y.requires_grad) {
                                           for (std::size_t c = 0; c < q; ++c) y.grad[i * q + c] += g[p + c];
                                       }
                                   }
                               });
}

// ---- reductions ------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    return detail::make_result("sum", {}, {acc}, {a.node()}, [](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (double& g : x.grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    return detail::make_result("mean", {}, {acc * inv}, {a.node()}, [inv](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (double& g : x.grad) g += self.grad[0] * inv;
    });
}

/// Sum over the last axis; (..., k) -> (...).
inline Tensor sum_last(const Tensor& a) {
    if (a.rank() == 0) return sum(a);
    const std::size_t k = a.shape().back();
    const std::size_t rows = a.size() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < k; ++c) out[r] += a[r * k + c];
    }
    return detail::make_result("sum_last", std::move(out_shape), std::move(out), {a.node()}, [k](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (std::size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += self.grad[i / k];
    });
}

/// Mean over the leading axis of a matrix; (n, k) -> (k).
inline Tensor mean_rows(const Tensor& a) {
    detail::require_rank("mean_rows", a, 2);
    const std::size_t n = a.dim(0), k = a.dim(1);
    const double inv = 1.0 / static_cast<double>(n);
    std::vector<double> out(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) out[j] += a[i * k + j];
    }
    for (double& v : out) v *= inv;
    return detail::make_result("mean_rows", {k}, std::move(out), {a.node()}, [k, inv](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (std::size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += self.grad[i % k] * inv;
    });
}

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
    if (a.rank() == 0) throw ShapeError("softmax: scalar input");
    const std::size_t k = a.shape().back();
    const std::size_t rows = a.size() / k;
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = a.values().data() + r * k;
        double* o = out.data() + r * k;
        const double mx = *std::max_element(in, in + k);
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < k; ++c) o[c] /= z;
    }
    return detail::make_result("softmax", a.shape(), std::move(out), {a.node()}, [k, rows](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * k;
            const double* g = self.grad.data() + r * k;
            double dot = 0.0;
            for (std::size_t c = 0; c < k; ++c) dot += g[c] * y[c];
            for (std::size_t c = 0; c < k; ++c) x.grad[r * k + c] += y[c] * (g[c] - dot);
        }
    });
}

/// log(softmax(x)) over the last axis, computed stably.
inline Tensor log_softmax(const Tensor& a) {
    if (a.rank() == 0) throw ShapeError("log_softmax: scalar input");
    const std::size_t k = a.shape().back();
    const std::size_t rows = a.size() / k;
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = a.values().data() + r * k;
        double* o = out.data() + r * k;
        const double mx = *std::max_element(in, in + k);
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(in[c] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t c = 0; c < k; ++c) o[c] = in[c] - lz;
    }
    return detail::make_result("log_softmax", a.shape(), std::move(out), {a.node()}, [k, rows](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * k;
            const double* g = self.grad.data() + r * k;
            double gs = 0.0;
            for (std::size_t c = 0; c < k; ++c) gs += g[c];
            for (std::size_t c = 0; c < k; ++c) x.grad[r * k + c] += g[c] - std::exp(y[c]) * gs;
        }
    });
}

// ---- backward --------------------------------------------------------------

/// Accumulates d(loss)/d(t) into every tensor on the path that requires grad.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
    visited.insert(loss.node().get());
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

    detail::Node& root = *loss.node();
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node& node = **it;
        if (node.backward && !node.grad.empty()) node.backward(node);
    }
}

} // namespace quantlab
