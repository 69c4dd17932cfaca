// SPDX-License-Identifier: Apache-2.0
//
// Trajectory-matching condensation. A synthetic set (X, Y) and an inner step
// size alpha are learned so that s full-batch SGD steps on (X, Y) started at
// a recorded global snapshot w^r land near w^{r+s}.
//
// The meta-gradient is the exact adjoint of the unrolled inner loop
//   w_{n+1} = w_n - alpha g_n,   g_n = grad_w F(w_n, X):
//   lam_s  = 2 (w_s - target)
//   dL/dalpha += -<lam_{n+1}, g_n>
//   dL/dX     += -alpha d/dX <g_n, lam_{n+1}>
//   lam_n  = lam_{n+1} - alpha H_n lam_{n+1}
// where H_n lam and the mixed term come from one forward-over-reverse pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fedsynsam/data.hpp"
#include "fedsynsam/errors.hpp"
#include "fedsynsam/model.hpp"
#include "fedsynsam/rng.hpp"
#include "fedsynsam/weights.hpp"

namespace fedsyn {

inline constexpr double kMinInnerStep = 1e-8;

/// Global snapshots in round order.
class TrajectoryBuffer {
public:
    void append(std::size_t round, WeightVector w) {
        if (!rounds_.empty() && round <= rounds_.back())
            throw ContractError("TrajectoryBuffer: round " + std::to_string(round) + " does not follow " +
                                std::to_string(rounds_.back()));
        if (!snapshots_.empty()) require_same_length(snapshots_.front(), w, "TrajectoryBuffer");
        rounds_.push_back(round);
        snapshots_.push_back(std::move(w));
    }

    std::size_t size() const noexcept { return snapshots_.size(); }
    bool empty() const noexcept { return snapshots_.empty(); }
    const WeightVector& operator[](std::size_t i) const { return snapshots_.at(i); }
    const std::vector<WeightVector>& snapshots() const noexcept { return snapshots_; }
    const std::vector<std::size_t>& rounds() const noexcept { return rounds_; }

private:
    std::vector<std::size_t> rounds_;
    std::vector<WeightVector> snapshots_;
};

/// Learnable features with fixed, exactly balanced labels (ipc rows per class,
/// in class blocks) and a learnable inner step size.
struct SyntheticDataset {
    Dataset data;
    double alpha = 0.01;
    std::size_t ipc = 0;

    void validate() const {
        data.validate();
        if (ipc == 0) throw ContractError("SyntheticDataset: ipc must be positive");
        if (data.size() != ipc * static_cast<std::size_t>(data.classes))
            throw ContractError("SyntheticDataset: row count must be ipc * classes");
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data.labels[i] != static_cast<int>(i / ipc)) throw ContractError("SyntheticDataset: labels not balanced");
        if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ContractError("SyntheticDataset: alpha must be positive");
    }
};

/// Gaussian-noise initialization N(mean, std^2) per feature.
inline SyntheticDataset init_synthetic(int classes, std::size_t ipc, std::size_t dims, double alpha, Rng rng,
                                       double mean = 0.5, double stddev = 0.25) {
    if (classes <= 0 || ipc == 0 || dims == 0) throw ContractError("init_synthetic: sizes must be positive");
    SyntheticDataset syn;
    syn.ipc = ipc;
    syn.alpha = alpha;
    syn.data.classes = classes;
    const std::size_t n = ipc * static_cast<std::size_t>(classes);
    syn.data.features = Tensor<double>({n, dims});
    syn.data.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) syn.data.labels[i] = static_cast<int>(i / ipc);
    for (std::size_t j = 0; j < syn.data.features.size(); ++j) syn.data.features[j] = rng.normal(mean, stddev);
    syn.validate();
    return syn;
}

enum class OuterOptimizer { Sgd, Adam };

struct DistillConfig {
    std::size_t iterations = 200; ///< M
    std::size_t inner_steps = 3;  ///< s
    double lr_x = 0.05;
    double lr_alpha = 1e-5;
    std::size_t ipc = 20;
    OuterOptimizer optimizer = OuterOptimizer::Adam;
    std::optional<double> alpha_init; ///< defaults to the local learning rate
    double init_mean = 0.5;
    double init_std = 0.25;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (inner_steps == 0) throw ContractError("distill.inner_steps must be >= 1");
        if (ipc == 0) throw ContractError("distill.ipc must be >= 1");
        if (!(lr_x >= 0.0) || !(lr_alpha >= 0.0)) throw ContractError("distill learning rates must be >= 0");
        if (alpha_init && !(*alpha_init > 0.0)) throw ContractError("distill.alpha_init must be positive");
        if (!(init_std >= 0.0)) throw ContractError("distill.init_std must be >= 0");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0))
            throw ContractError("distill: invalid Adam constants");
    }
};

/// Inner iterates and gradients kept for the adjoint pass.
struct InnerTrace {
    std::vector<WeightVector> iterates; ///< w_0 .. w_{s-1}
    std::vector<WeightVector> grads;    ///< g_0 .. g_{s-1}
};

/// s full-batch SGD steps on the synthetic data with step alpha.
inline WeightVector inner_train(const Model& model, const Dataset& syn, const WeightVector& start, double alpha,
                                std::size_t steps, InnerTrace* trace = nullptr) {
    if (steps == 0) throw ContractError("inner_train: steps must be >= 1");
    if (trace) {
        trace->iterates.clear();
        trace->grads.clear();
    }
    WeightVector w = start;
    for (std::size_t n = 0; n < steps; ++n) {
        LossGrad lg = model.loss_and_grad(w, syn);
        WeightVector next(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) next[i] = w[i] - alpha * lg.grad[i];
        if (!all_finite(next)) throw NumericalError("inner_train: non-finite weights at inner step", static_cast<std::ptrdiff_t>(n));
        if (trace) {
            trace->iterates.push_back(std::move(w));
            trace->grads.push_back(std::move(lg.grad));
        }
        w = std::move(next);
    }
    return w;
}

struct MetaGradient {
    double loss = 0.0;
    Tensor<double> grad_x;
    double grad_alpha = 0.0;
};

/// L = ||inner_train(start) - target||^2 with exact gradients in X and alpha.
inline MetaGradient meta_gradient(const Model& model, const SyntheticDataset& syn, const WeightVector& start,
                                  const WeightVector& target, std::size_t steps) {
    require_same_length(start, target, "meta_gradient");
    InnerTrace trace;
    const WeightVector end = inner_train(model, syn.data, start, syn.alpha, steps, &trace);
    MetaGradient out;
    WeightVector lam(end.size());
    for (std::size_t i = 0; i < end.size(); ++i) {
        const double r = end[i] - target[i];
        out.loss += r * r;
        lam[i] = 2.0 * r;
    }
    out.grad_x = Tensor<double>(syn.data.features.shape());
    for (std::size_t k = steps; k-- > 0;) {
        out.grad_alpha -= dot(lam, trace.grads[k]);
        SecondOrderTerms so = model.second_order(trace.iterates[k], syn.data, lam);
        for (std::size_t j = 0; j < out.grad_x.size(); ++j) out.grad_x[j] -= syn.alpha * so.feature_vector[j];
        for (std::size_t i = 0; i < lam.size(); ++i) lam[i] -= syn.alpha * so.hessian_vector[i];
    }
    if (!std::isfinite(out.loss) || !std::isfinite(out.grad_alpha) || out.grad_x.first_non_finite() >= 0)
        throw NumericalError("meta_gradient: non-finite result");
    return out;
}

inline double segment_loss(const Model& model, const SyntheticDataset& syn, const WeightVector& start,
                           const WeightVector& target, std::size_t steps) {
    const WeightVector end = inner_train(model, syn.data, start, syn.alpha, steps);
    return squared_norm(end - target);
}

/// Mean of the segment loss over every valid start r in [0, size - 1 - s].
inline double mean_segment_loss(const Model& model, const SyntheticDataset& syn, const TrajectoryBuffer& traj,
                                std::size_t steps) {
    if (traj.size() < steps + 1) throw ContractError("mean_segment_loss: trajectory shorter than s + 1");
    double sum = 0.0;
    const std::size_t starts = traj.size() - steps;
    for (std::size_t r = 0; r < starts; ++r) sum += segment_loss(model, syn, traj[r], traj[r + steps], steps);
    return sum / static_cast<double>(starts);
}

/// Mean over snapshots of cos(grad F(w^t, D_syn), grad F(w^t)), where the
/// global gradient is the unweighted mean of the client gradients.
/// Snapshots where either gradient vanishes are skipped.
inline std::optional<double> gradient_match_cosine(const Model& model, const Dataset& syn,
                                                   const std::vector<ClientData>& clients, const TrajectoryBuffer& traj) {
    if (clients.empty()) throw ContractError("gradient_match_cosine: no clients");
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& w : traj.snapshots()) {
        WeightVector global(w.size(), 0.0);
        for (const auto& c : clients) axpy(1.0, model.loss_and_grad(w, c.full()).grad, global);
        auto c = cosine(model.loss_and_grad(w, syn).grad, global);
        if (c) {
            sum += *c;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct CondenseResult {
    SyntheticDataset synthetic;
    std::vector<double> losses;       ///< per outer iteration, before the update
    std::vector<std::size_t> starts;  ///< sampled segment starts
};

/// M outer iterations; each samples r uniformly in [0, size - 1 - s].
inline CondenseResult condense(const Model& model, const TrajectoryBuffer& traj, const DistillConfig& cfg,
                               SyntheticDataset init, Rng rng) {
    cfg.validate();
    init.validate();
    if (traj.size() < cfg.inner_steps + 1)
        throw ContractError("condense: trajectory has " + std::to_string(traj.size()) + " snapshots, need at least s + 1 = " +
                            std::to_string(cfg.inner_steps + 1));
    CondenseResult res{std::move(init), {}, {}};
    auto& syn = res.synthetic;
    const std::size_t starts = traj.size() - cfg.inner_steps;
    const std::size_t nx = syn.data.features.size();
    std::vector<double> m_x(nx, 0.0), v_x(nx, 0.0);
    double m_a = 0.0, v_a = 0.0;
    double b1t = 1.0, b2t = 1.0;

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const std::size_t r = rng.below(starts);
        res.starts.push_back(r);
        const MetaGradient mg = meta_gradient(model, syn, traj[r], traj[r + cfg.inner_steps], cfg.inner_steps);
        res.losses.push_back(mg.loss);
        auto& x = syn.data.features;
        if (cfg.optimizer == OuterOptimizer::Sgd) {
            for (std::size_t j = 0; j < nx; ++j) x[j] -= cfg.lr_x * mg.grad_x[j];
            syn.alpha -= cfg.lr_alpha * mg.grad_alpha;
        } else {
            b1t *= cfg.adam_beta1;
            b2t *= cfg.adam_beta2;
            const double c1 = 1.0 - b1t, c2 = 1.0 - b2t;
            for (std::size_t j = 0; j < nx; ++j) {
                const double g = mg.grad_x[j];
                m_x[j] = cfg.adam_beta1 * m_x[j] + (1.0 - cfg.adam_beta1) * g;
                v_x[j] = cfg.adam_beta2 * v_x[j] + (1.0 - cfg.adam_beta2) * g * g;
                x[j] -= cfg.lr_x * (m_x[j] / c1) / (std::sqrt(v_x[j] / c2) + cfg.adam_eps);
            }
            const double g = mg.grad_alpha;
            m_a = cfg.adam_beta1 * m_a + (1.0 - cfg.adam_beta1) * g;
            v_a = cfg.adam_beta2 * v_a + (1.0 - cfg.adam_beta2) * g * g;
            syn.alpha -= cfg.lr_alpha * (m_a / c1) / (std::sqrt(v_a / c2) + cfg.adam_eps);
        }
        syn.alpha = std::max(syn.alpha, kMinInnerStep);
    }
    return res;
}

} // namespace fedsyn
