// Shared fixtures and numerical oracles for the test suite.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "fedsynsam/fedsynsam.hpp"

namespace fedsyn {
/// Tests measure diagnostics directly.
struct MeasurementTool {
    static DiagnosticsAccess token() { return {}; }
};
} // namespace fedsyn

namespace fedsyn::testing {

/// f(w) = 1/2 (w - c)^T A (w - c), independent of the batch.
class Quadratic final : public Model {
public:
    Quadratic(std::vector<std::vector<double>> a, std::vector<double> center = {})
        : a_(std::move(a)), c_(center.empty() ? std::vector<double>(a_.size(), 0.0) : std::move(center)) {}

    std::size_t param_count() const override { return a_.size(); }
    std::size_t input_dim() const override { return 1; }
    int num_classes() const override { return 2; }
    std::vector<ParamBlock> blocks() const override { return {{"w", 0, a_.size()}}; }
    std::string describe() const override { return "quadratic"; }
    WeightVector init(Rng rng) const override {
        WeightVector w(a_.size());
        for (auto& x : w.values()) x = rng.normal();
        return w;
    }
    double loss(const WeightVector& w, const Dataset&) const override {
        const WeightVector r = shifted(w);
        return 0.5 * dot(r, apply(r));
    }
    LossGrad loss_and_grad(const WeightVector& w, const Dataset& b) const override {
        return {loss(w, b), apply(shifted(w))};
    }
    Tensor<double> logits(const WeightVector&, const Tensor<double>& x) const override {
        return Tensor<double>({x.rows(), 2});
    }
    WeightVector hvp(const WeightVector&, const Dataset&, const WeightVector& v) const override { return apply(v); }
    SecondOrderTerms second_order(const WeightVector& w, const Dataset& b, const WeightVector& v) const override {
        return {hvp(w, b, v), Tensor<double>(b.features.shape())};
    }
    Tensor<double> feature_grad(const WeightVector&, const Dataset& b) const override {
        return Tensor<double>(b.features.shape());
    }

    WeightVector apply(const WeightVector& v) const {
        WeightVector out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            for (std::size_t j = 0; j < v.size(); ++j) out[i] += a_[i][j] * v[j];
        return out;
    }

private:
    std::vector<std::vector<double>> a_;
    std::vector<double> c_;

    WeightVector shifted(const WeightVector& w) const {
        WeightVector r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) r[i] = w[i] - c_[i];
        return r;
    }
};

inline std::vector<std::vector<double>> diagonal(std::vector<double> d) {
    std::vector<std::vector<double>> a(d.size(), std::vector<double>(d.size(), 0.0));
    for (std::size_t i = 0; i < d.size(); ++i) a[i][i] = d[i];
    return a;
}

/// One-row dataset for models that ignore their input.
inline Dataset dummy_batch() {
    Dataset ds;
    ds.classes = 2;
    ds.features = Tensor<double>({1, 1});
    ds.labels = {0};
    return ds;
}

/// ||a - b|| / max(||b||, floor)
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), floor);
}
inline double rel_err(const WeightVector& a, const WeightVector& b, double floor = 1e-12) {
    return rel_err(a.values(), b.values(), floor);
}

inline WeightVector gaussian_vector(std::size_t n, Rng& rng, double scale = 1.0) {
    WeightVector v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = scale * rng.normal();
    return v;
}

inline Dataset random_dataset(std::size_t n, std::size_t d, int classes, Rng rng) {
    Dataset ds;
    ds.classes = classes;
    ds.features = Tensor<double>({n, d});
    ds.labels.resize(n);
    for (auto& x : ds.features.values()) x = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    return ds;
}

/// Central differences of a scalar function of a flat vector.
inline WeightVector fd_gradient(const std::function<double(const WeightVector&)>& f, const WeightVector& w,
                                double h) {
    WeightVector g(w.size());
    WeightVector p = w;
    for (std::size_t i = 0; i < w.size(); ++i) {
        p[i] = w[i] + h;
        const double up = f(p);
        p[i] = w[i] - h;
        const double down = f(p);
        p[i] = w[i];
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// (grad f(w + h v) - grad f(w - h v)) / 2h
inline WeightVector fd_hvp(const Model& m, const WeightVector& w, const Dataset& ds, const WeightVector& v, double h) {
    WeightVector up = w, down = w;
    axpy(h, v, up);
    axpy(-h, v, down);
    const auto gu = m.loss_and_grad(up, ds).grad;
    const auto gd = m.loss_and_grad(down, ds).grad;
    return (1.0 / (2.0 * h)) * (gu - gd);
}

/// Dense Hessian assembled column by column from HVPs with basis vectors.
inline std::vector<std::vector<double>> dense_hessian(const Model& m, const WeightVector& w, const Dataset& ds) {
    const std::size_t n = w.size();
    std::vector<std::vector<double>> h(n, std::vector<double>(n));
    for (std::size_t j = 0; j < n; ++j) {
        WeightVector e(n, 0.0);
        e[j] = 1.0;
        const auto col = m.hvp(w, ds, e);
        for (std::size_t i = 0; i < n; ++i) h[i][j] = col[i];
    }
    return h;
}

/// Federated blobs problem small enough for bitwise engine checks.
inline FederatedData toy_federation(std::size_t clients, bool iid, std::uint64_t seed, int classes = 3,
                                    std::size_t dims = 4, std::size_t per_class = 40) {
    Rng rng(seed, "toy");
    Dataset all = make_blobs(classes, per_class + 10, dims, 3.0, rng.derive("blobs"));
    auto [train, test] = split_per_class(all, 10, rng.derive("split"));
    FederatedData fd;
    fd.train = std::move(train);
    fd.test = std::move(test);
    fd.partition = iid ? partition_iid(fd.train, clients, rng.derive("part"))
                       : partition_dirichlet(fd.train, clients, 0.1, rng.derive("part"));
    return fd;
}

} // namespace fedsyn::testing
