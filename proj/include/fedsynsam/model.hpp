// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedsynsam/autodiff.hpp"
#include "fedsynsam/data.hpp"
#include "fedsynsam/errors.hpp"
#include "fedsynsam/rng.hpp"
#include "fedsynsam/weights.hpp"

namespace fedsyn {

/// Contiguous slice of a WeightVector holding one weight matrix or bias.
struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct LossGrad {
    double loss = 0.0;
    WeightVector grad;
};

/// Second-order terms at (w, X) along a weight-space direction v.
struct SecondOrderTerms {
    WeightVector hessian_vector;   ///< (d^2 F / dw^2) v
    Tensor<double> feature_vector; ///< d/dX < dF/dw, v >, shaped like X
};

struct Evaluation {
    double accuracy = 0.0;
    double loss = 0.0;
};

/// Mean-loss classifier over flat weights. fed-engine, distill and metrics
/// only go through this interface.
class Model {
public:
    virtual ~Model() = default;

    virtual std::size_t param_count() const = 0;
    virtual std::size_t input_dim() const = 0;
    virtual int num_classes() const = 0;
    virtual std::vector<ParamBlock> blocks() const = 0;
    virtual std::string describe() const = 0;

    virtual WeightVector init(Rng rng) const = 0;

    /// Mean per-sample loss on the batch.
    virtual double loss(const WeightVector& w, const Dataset& batch) const = 0;
    virtual LossGrad loss_and_grad(const WeightVector& w, const Dataset& batch) const = 0;
    virtual Tensor<double> logits(const WeightVector& w, const Tensor<double>& features) const = 0;
    virtual WeightVector hvp(const WeightVector& w, const Dataset& batch, const WeightVector& v) const = 0;
    virtual SecondOrderTerms second_order(const WeightVector& w, const Dataset& batch, const WeightVector& v) const = 0;

    /// Gradient of the mean loss with respect to the batch features.
    virtual Tensor<double> feature_grad(const WeightVector& w, const Dataset& batch) const = 0;

protected:
    void check_batch(const WeightVector& w, const Dataset& batch) const {
        if (w.size() != param_count())
            throw ContractError("model: weight vector has " + std::to_string(w.size()) + " entries, expected " +
                                std::to_string(param_count()));
        if (batch.empty()) throw ContractError("model: empty batch");
        if (batch.dims() != input_dim())
            throw ContractError("model: batch has " + std::to_string(batch.dims()) + " features, expected " +
                                std::to_string(input_dim()));
        for (int y : batch.labels)
            if (y < 0 || y >= num_classes()) throw ContractError("model: label " + std::to_string(y) + " out of range");
    }
};

/// Accuracy (argmax, ties to the lowest class index) and mean loss.
inline Evaluation evaluate(const Model& model, const WeightVector& w, const Dataset& ds) {
    if (ds.empty()) throw ContractError("evaluate: empty dataset");
    const Tensor<double> z = model.logits(w, ds.features);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < z.cols(); ++j)
            if (z(i, j) > z(i, best)) best = j;
        if (static_cast<int>(best) == ds.labels[i]) ++correct;
    }
    return {static_cast<double>(correct) / static_cast<double>(ds.size()), model.loss(w, ds)};
}

/// Layer sizes (input, hidden..., output); ReLU between layers, softmax
/// cross-entropy on the output.
struct MlpSpec {
    std::vector<std::size_t> layers;

    void validate() const {
        if (layers.size() < 2) throw ContractError("MlpSpec: need at least input and output sizes");
        for (auto s : layers)
            if (s == 0) throw ContractError("MlpSpec: layer sizes must be positive");
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < layers.size(); ++l) n += layers[l] * layers[l + 1] + layers[l + 1];
        return n;
    }
};

class Mlp final : public Model {
public:
    explicit Mlp(MlpSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < spec_.layers.size(); ++l) {
            const std::size_t in = spec_.layers[l], out = spec_.layers[l + 1];
            blocks_.push_back({"W" + std::to_string(l), off, in * out});
            off += in * out;
            blocks_.push_back({"b" + std::to_string(l), off, out});
            off += out;
        }
    }

    const MlpSpec& spec() const noexcept { return spec_; }
    std::size_t param_count() const override { return spec_.param_count(); }
    std::size_t input_dim() const override { return spec_.layers.front(); }
    int num_classes() const override { return static_cast<int>(spec_.layers.back()); }
    std::vector<ParamBlock> blocks() const override { return blocks_; }

    std::string describe() const override {
        std::ostringstream os;
        os << "mlp";
        for (auto s : spec_.layers) os << '-' << s;
        return os.str();
    }

    /// He-uniform weights, zero biases.
    WeightVector init(Rng rng) const override {
        WeightVector w(param_count());
        for (std::size_t l = 0; l + 1 < spec_.layers.size(); ++l) {
            const auto& blk = blocks_[2 * l];
            const double limit = std::sqrt(6.0 / static_cast<double>(spec_.layers[l]));
            Rng layer_rng = rng.derive(blk.name);
            for (std::size_t i = 0; i < blk.size; ++i) w[blk.offset + i] = layer_rng.uniform(-limit, limit);
        }
        return w;
    }

    /// Per-layer tensors (W0, b0, W1, b1, ...) viewing a flat vector.
    std::vector<Tensor<double>> unflatten(const WeightVector& w) const {
        if (w.size() != param_count()) throw ContractError("Mlp::unflatten: wrong length");
        std::vector<Tensor<double>> out;
        for (std::size_t l = 0; l + 1 < spec_.layers.size(); ++l) {
            const std::size_t in = spec_.layers[l], o = spec_.layers[l + 1];
            const auto& wb = blocks_[2 * l];
            const auto& bb = blocks_[2 * l + 1];
            out.push_back(Tensor<double>::matrix(in, o, {w.begin() + static_cast<std::ptrdiff_t>(wb.offset),
                                                         w.begin() + static_cast<std::ptrdiff_t>(wb.offset + wb.size)}));
            out.push_back(Tensor<double>::vector({w.begin() + static_cast<std::ptrdiff_t>(bb.offset),
                                                  w.begin() + static_cast<std::ptrdiff_t>(bb.offset + bb.size)}));
        }
        return out;
    }

    WeightVector flatten(std::span<const Tensor<double>> params) const {
        WeightVector w;
        w.values().reserve(param_count());
        for (const auto& p : params) w.values().insert(w.values().end(), p.data().begin(), p.data().end());
        if (w.size() != param_count()) throw ContractError("Mlp::flatten: wrong total size");
        return w;
    }

    /// Taped mean cross-entropy; params are (W0, b0, W1, b1, ...).
    template <class T>
    Var<T> taped_loss(Tape<T>& tape, std::span<const Var<T>> params, Var<T> features,
                      std::shared_ptr<const std::vector<int>> labels) const {
        Var<T> h = features;
        const std::size_t layers = params.size() / 2;
        for (std::size_t l = 0; l < layers; ++l) {
            h = tape.add_row(tape.matmul(h, params[2 * l]), params[2 * l + 1]);
            if (l + 1 < layers) h = tape.relu(h);
        }
        return tape.softmax_xent(h, std::move(labels));
    }

    double loss(const WeightVector& w, const Dataset& batch) const override {
        check_batch(w, batch);
        Tape<double> tape;
        auto leaves = leaves_of(tape, unflatten(w));
        auto x = tape.leaf(batch.features);
        return tape.value(taped_loss<double>(tape, leaves, x, labels_of(batch))).item();
    }

    LossGrad loss_and_grad(const WeightVector& w, const Dataset& batch) const override {
        check_batch(w, batch);
        Tape<double> tape;
        auto leaves = leaves_of(tape, unflatten(w));
        auto x = tape.leaf(batch.features);
        auto out = taped_loss<double>(tape, leaves, x, labels_of(batch));
        auto g = tape.gradient(out, leaves);
        return {tape.value(out).item(), flatten(g)};
    }

    Tensor<double> feature_grad(const WeightVector& w, const Dataset& batch) const override {
        check_batch(w, batch);
        Tape<double> tape;
        auto leaves = leaves_of(tape, unflatten(w));
        auto x = tape.leaf(batch.features);
        auto out = taped_loss<double>(tape, leaves, x, labels_of(batch));
        std::vector<Var<double>> wrt{x};
        return tape.gradient(out, wrt).front();
    }

    Tensor<double> logits(const WeightVector& w, const Tensor<double>& features) const override {
        if (features.rank() != 2 || features.cols() != input_dim()) throw ContractError("Mlp::logits: bad features");
        const auto params = unflatten(w);
        Tensor<double> h = features;
        const std::size_t layers = params.size() / 2;
        for (std::size_t l = 0; l < layers; ++l) {
            h = detail::matmul(h, params[2 * l]);
            for (std::size_t i = 0; i < h.rows(); ++i)
                for (std::size_t j = 0; j < h.cols(); ++j) {
                    h(i, j) += params[2 * l + 1][j];
                    if (l + 1 < layers && !(h(i, j) > 0.0)) h(i, j) = 0.0;
                }
        }
        return h;
    }

    WeightVector hvp(const WeightVector& w, const Dataset& batch, const WeightVector& v) const override {
        return second_order(w, batch, v).hessian_vector;
    }

    SecondOrderTerms second_order(const WeightVector& w, const Dataset& batch, const WeightVector& v) const override {
        check_batch(w, batch);
        require_same_length(w, v, "Mlp::second_order");
        using D = Dual<double>;
        Tape<D> tape;
        const auto wp = unflatten(w);
        const auto vp = unflatten(v);
        std::vector<Var<D>> leaves;
        for (std::size_t i = 0; i < wp.size(); ++i) {
            Tensor<D> t(wp[i].shape());
            for (std::size_t j = 0; j < t.size(); ++j) t[j] = D(wp[i][j], vp[i][j]);
            leaves.push_back(tape.leaf(std::move(t)));
        }
        Tensor<D> xf(batch.features.shape());
        for (std::size_t j = 0; j < xf.size(); ++j) xf[j] = D(batch.features[j]);
        auto x = tape.leaf(std::move(xf));
        auto out = taped_loss<D>(tape, leaves, x, labels_of(batch));
        std::vector<Var<D>> wrt = leaves;
        wrt.push_back(x);
        auto g = tape.gradient(out, wrt);
        SecondOrderTerms res;
        res.hessian_vector = WeightVector(param_count());
        std::size_t pos = 0;
        for (std::size_t i = 0; i < leaves.size(); ++i)
            for (const auto& e : g[i].data()) res.hessian_vector[pos++] = e.d;
        res.feature_vector = Tensor<double>(batch.features.shape());
        for (std::size_t j = 0; j < res.feature_vector.size(); ++j) res.feature_vector[j] = g.back()[j].d;
        return res;
    }

private:
    MlpSpec spec_;
    std::vector<ParamBlock> blocks_;

    template <class T>
    static std::vector<Var<T>> leaves_of(Tape<T>& tape, std::vector<Tensor<T>> params) {
        std::vector<Var<T>> leaves;
        leaves.reserve(params.size());
        for (auto& p : params) leaves.push_back(tape.leaf(std::move(p)));
        return leaves;
    }

    static std::shared_ptr<const std::vector<int>> labels_of(const Dataset& batch) {
        return std::make_shared<const std::vector<int>>(batch.labels);
    }
};

} // namespace fedsyn
