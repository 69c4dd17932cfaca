// SPDX-License-Identifier: Apache-2.0
//
// Tensor-level reverse-mode differentiation.
//
// A Tape<T> records primitive operations in topological order. gradient()
// runs the adjoint sweep in the tape's scalar type; instantiating the tape
// with Dual<double> and seeding leaf tangents with v yields Hessian-vector
// products from the same backward rules (forward-over-reverse).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsynsam/errors.hpp"
#include "fedsynsam/tensor.hpp"

namespace fedsyn {

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
};

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    AddRow,
    Relu,
    SoftmaxXent,
    Sum,
    Dot,
};

namespace detail {

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a(i, p);
            for (std::size_t j = 0; j < m; ++j) out(i, j) += aip * b(p, j);
        }
    return out;
}

// a^T * b
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor<T> out({k, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a(i, p);
            for (std::size_t j = 0; j < m; ++j) out(p, j) += aip * b(i, j);
        }
    return out;
}

// a * b^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.rows(), m = a.cols(), k = b.rows();
    Tensor<T> out({n, k});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            T acc{};
            for (std::size_t j = 0; j < m; ++j) acc += a(i, j) * b(p, j);
            out(i, p) = acc;
        }
    return out;
}

template <class T>
void accumulate(std::optional<Tensor<T>>& slot, const Tensor<T>& g) {
    if (!slot) {
        slot = g;
        return;
    }
    auto dst = slot->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace detail

template <class T>
class Tape {
public:
    struct Node {
        OpKind op = OpKind::Leaf;
        std::size_t a = 0;
        std::size_t b = 0;
        double scalar = 0.0;
        std::shared_ptr<const std::vector<int>> labels;
        Tensor<T> value;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Tensor<T> v) {
        Node n;
        n.op = OpKind::Leaf;
        n.value = std::move(v);
        return push(std::move(n));
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_.at(i); }
    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }

    Var<T> add(Var<T> x, Var<T> y) { return binary_same_shape(OpKind::Add, x, y); }
    Var<T> sub(Var<T> x, Var<T> y) { return binary_same_shape(OpKind::Sub, x, y); }
    Var<T> mul(Var<T> x, Var<T> y) { return binary_same_shape(OpKind::Mul, x, y); }

    Var<T> scale(Var<T> x, double c) {
        Node n;
        n.op = OpKind::Scale;
        n.a = x.id;
        n.scalar = c;
        return push(std::move(n));
    }

    Var<T> matmul(Var<T> x, Var<T> y) {
        const auto& xs = value(x);
        const auto& ys = value(y);
        if (xs.rank() != 2 || ys.rank() != 2 || xs.cols() != ys.rows())
            throw ContractError("matmul: incompatible shapes " + shape_string(xs.shape()) + " x " +
                                shape_string(ys.shape()));
        return binary(OpKind::MatMul, x, y);
    }

    /// Adds a rank-1 row vector to every row of a matrix.
    Var<T> add_row(Var<T> x, Var<T> row) {
        const auto& xs = value(x);
        const auto& rs = value(row);
        if (xs.rank() != 2 || rs.rank() != 1 || rs.size() != xs.cols())
            throw ContractError("add_row: incompatible shapes " + shape_string(xs.shape()) + " + " +
                                shape_string(rs.shape()));
        return binary(OpKind::AddRow, x, row);
    }

    Var<T> relu(Var<T> x) {
        Node n;
        n.op = OpKind::Relu;
        n.a = x.id;
        return push(std::move(n));
    }

    /// Mean softmax cross-entropy of logits (n x c) against integer labels.
    Var<T> softmax_xent(Var<T> logits, std::shared_ptr<const std::vector<int>> labels) {
        const auto& ls = value(logits);
        if (ls.rank() != 2 || !labels || labels->size() != ls.rows())
            throw ContractError("softmax_xent: logits/labels mismatch");
        if (ls.rows() == 0) throw ContractError("softmax_xent: empty batch");
        for (int y : *labels)
            if (y < 0 || static_cast<std::size_t>(y) >= ls.cols())
                throw ContractError("softmax_xent: label " + std::to_string(y) + " out of range");
        Node n;
        n.op = OpKind::SoftmaxXent;
        n.a = logits.id;
        n.labels = std::move(labels);
        return push(std::move(n));
    }

    Var<T> sum(Var<T> x) {
        Node n;
        n.op = OpKind::Sum;
        n.a = x.id;
        return push(std::move(n));
    }

    Var<T> dot(Var<T> x, Var<T> y) { return binary_same_shape(OpKind::Dot, x, y); }

    /// Re-evaluates every node with new leaf values (in leaf creation order).
    void replay(std::span<const Tensor<T>> leaves) {
        std::size_t next = 0;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (n.op == OpKind::Leaf) {
                if (next >= leaves.size()) throw ContractError("Tape::replay: too few leaf values");
                if (!leaves[next].same_shape(n.value)) throw ContractError("Tape::replay: leaf shape changed");
                n.value = leaves[next++];
            } else {
                n.value = forward(n);
            }
        }
        if (next != leaves.size()) throw ContractError("Tape::replay: too many leaf values");
    }

    /// d(out)/d(wrt) for a scalar node `out`.
    std::vector<Tensor<T>> gradient(Var<T> out, std::span<const Var<T>> wrt) const {
        if (!value(out).is_scalar()) throw ContractError("gradient: output is not a scalar");
        std::vector<std::optional<Tensor<T>>> adj(out.id + 1);
        adj[out.id] = Tensor<T>(value(out).shape(), T(1.0));
        for (std::size_t i = out.id + 1; i-- > 0;) {
            if (!adj[i]) continue;
            const Node& n = nodes_[i];
            if (auto bad = adj[i]->first_non_finite(); bad >= 0)
                throw NumericalError("gradient: non-finite adjoint at tape node", static_cast<std::ptrdiff_t>(i));
            backward(n, *adj[i], adj);
        }
        std::vector<Tensor<T>> grads;
        grads.reserve(wrt.size());
        for (const auto& w : wrt) {
            if (w.id < adj.size() && adj[w.id])
                grads.push_back(*adj[w.id]);
            else
                grads.push_back(Tensor<T>(value(w).shape()));
        }
        return grads;
    }

private:
    std::vector<Node> nodes_;

    Var<T> push(Node n) {
        if (n.op != OpKind::Leaf) n.value = forward(n);
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    Var<T> binary(OpKind op, Var<T> x, Var<T> y) {
        Node n;
        n.op = op;
        n.a = x.id;
        n.b = y.id;
        return push(std::move(n));
    }

    Var<T> binary_same_shape(OpKind op, Var<T> x, Var<T> y) {
        if (!value(x).same_shape(value(y)))
            throw ContractError("elementwise op: shape mismatch " + shape_string(value(x).shape()) + " vs " +
                                shape_string(value(y).shape()));
        return binary(op, x, y);
    }

    Tensor<T> forward(const Node& n) const {
        using std::exp;
        using std::log;
        const Tensor<T>& x = nodes_[n.a].value;
        switch (n.op) {
        case OpKind::Leaf:
            return n.value;
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            const Tensor<T>& y = nodes_[n.b].value;
            Tensor<T> out(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i)
                out[i] = n.op == OpKind::Add ? x[i] + y[i] : n.op == OpKind::Sub ? x[i] - y[i] : x[i] * y[i];
            return out;
        }
        case OpKind::Scale:
            return x.map([c = T(n.scalar)](const T& v) { return c * v; });
        case OpKind::MatMul:
            return detail::matmul(x, nodes_[n.b].value);
        case OpKind::AddRow: {
            const Tensor<T>& r = nodes_[n.b].value;
            Tensor<T> out = x;
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += r[j];
            return out;
        }
        case OpKind::Relu:
            return x.map([](const T& v) { return primal(v) > 0.0 ? v : T(0.0); });
        case OpKind::SoftmaxXent: {
            const auto& labels = *n.labels;
            T total(0.0);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double mx = primal(x(i, 0));
                for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, primal(x(i, j)));
                T s(0.0);
                for (std::size_t j = 0; j < x.cols(); ++j) s += exp(x(i, j) - T(mx));
                total += log(s) + T(mx) - x(i, static_cast<std::size_t>(labels[i]));
            }
            return Tensor<T>::scalar(total / T(static_cast<double>(x.rows())));
        }
        case OpKind::Sum: {
            T s(0.0);
            for (const auto& v : x.data()) s += v;
            return Tensor<T>::scalar(s);
        }
        case OpKind::Dot: {
            const Tensor<T>& y = nodes_[n.b].value;
            T s(0.0);
            for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
            return Tensor<T>::scalar(s);
        }
        }
        throw ContractError("Tape: unknown op");
    }

    void backward(const Node& n, const Tensor<T>& g, std::vector<std::optional<Tensor<T>>>& adj) const {
        using detail::accumulate;
        using std::exp;
        const Tensor<T>& x = nodes_[n.a].value;
        switch (n.op) {
        case OpKind::Leaf:
            return;
        case OpKind::Add:
            accumulate(adj[n.a], g);
            accumulate(adj[n.b], g);
            return;
        case OpKind::Sub:
            accumulate(adj[n.a], g);
            accumulate(adj[n.b], g.map([](const T& v) { return -v; }));
            return;
        case OpKind::Mul: {
            const Tensor<T>& y = nodes_[n.b].value;
            Tensor<T> ga(g.shape()), gb(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] = g[i] * y[i];
                gb[i] = g[i] * x[i];
            }
            accumulate(adj[n.a], ga);
            accumulate(adj[n.b], gb);
            return;
        }
        case OpKind::Scale:
            accumulate(adj[n.a], g.map([c = T(n.scalar)](const T& v) { return c * v; }));
            return;
        case OpKind::MatMul: {
            const Tensor<T>& y = nodes_[n.b].value;
            accumulate(adj[n.a], detail::matmul_nt(g, y));
            accumulate(adj[n.b], detail::matmul_tn(x, g));
            return;
        }
        case OpKind::AddRow: {
            accumulate(adj[n.a], g);
            Tensor<T> gr({x.cols()});
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
            accumulate(adj[n.b], gr);
            return;
        }
        case OpKind::Relu: {
            Tensor<T> gx(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = primal(x[i]) > 0.0 ? g[i] : T(0.0);
            accumulate(adj[n.a], gx);
            return;
        }
        case OpKind::SoftmaxXent: {
            const auto& labels = *n.labels;
            const T scale = g[0] / T(static_cast<double>(x.rows()));
            Tensor<T> gx(x.shape());
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double mx = primal(x(i, 0));
                for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, primal(x(i, j)));
                T s(0.0);
                for (std::size_t j = 0; j < x.cols(); ++j) {
                    gx(i, j) = exp(x(i, j) - T(mx));
                    s += gx(i, j);
                }
                for (std::size_t j = 0; j < x.cols(); ++j) gx(i, j) = gx(i, j) / s * scale;
                gx(i, static_cast<std::size_t>(labels[i])) -= scale;
            }
            accumulate(adj[n.a], gx);
            return;
        }
        case OpKind::Sum:
            accumulate(adj[n.a], Tensor<T>(x.shape(), g[0]));
            return;
        case OpKind::Dot: {
            const Tensor<T>& y = nodes_[n.b].value;
            accumulate(adj[n.a], y.map([s = g[0]](const T& v) { return s * v; }));
            accumulate(adj[n.b], x.map([s = g[0]](const T& v) { return s * v; }));
            return;
        }
        }
    }
};

/// Value and gradient of a taped scalar function.
///
/// `f` is called as f(tape, leaves) with one leaf per parameter and must
/// return a scalar Var on that tape.
template <class F>
std::pair<double, std::vector<Tensor<double>>> value_and_grad(F&& f, std::span<const Tensor<double>> params) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Var<double> out = f(tape, std::span<const Var<double>>(leaves));
    if (!tape.value(out).is_scalar()) throw ContractError("grad: function output is not a scalar");
    return {tape.value(out).item(), tape.gradient(out, leaves)};
}

template <class F>
std::vector<Tensor<double>> grad(F&& f, std::span<const Tensor<double>> params) {
    return value_and_grad(std::forward<F>(f), params).second;
}

/// Hessian-vector product (d^2 f / d params^2) * v via forward-over-reverse.
/// `f` must be generic over the tape scalar type.
template <class F>
std::vector<Tensor<double>> hvp(F&& f, std::span<const Tensor<double>> params, std::span<const Tensor<double>> v) {
    if (params.size() != v.size()) throw ContractError("hvp: direction count differs from parameter count");
    using D = Dual<double>;
    Tape<D> tape;
    std::vector<Var<D>> leaves;
    leaves.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].same_shape(v[i]))
            throw ContractError("hvp: direction shape " + shape_string(v[i].shape()) + " differs from parameter " +
                                shape_string(params[i].shape()));
        Tensor<D> p(params[i].shape());
        for (std::size_t j = 0; j < p.size(); ++j) p[j] = D(params[i][j], v[i][j]);
        leaves.push_back(tape.leaf(std::move(p)));
    }
    Var<D> out = f(tape, std::span<const Var<D>>(leaves));
    if (!tape.value(out).is_scalar()) throw ContractError("hvp: function output is not a scalar");
    auto g = tape.gradient(out, leaves);
    std::vector<Tensor<double>> result;
    result.reserve(g.size());
    for (const auto& gi : g) {
        Tensor<double> t(gi.shape());
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = gi[j].d;
        result.push_back(std::move(t));
    }
    return result;
}

} // namespace fedsyn
