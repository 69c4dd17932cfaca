// SPDX-License-Identifier: Apache-2.0
//
// SAM two-step local update with pluggable ascent-direction estimators:
//   local-grad : grad F(w, xi)                                  (FedSAM)
//   lesam      : w^{t-1} - w^t, the previous global step        (FedLESAM)
//   synsam     : b grad F(w, xi) + (1 - b) grad F(w, zeta), t > R (FedSynSAM)
// The lesam sign follows the literal "previous model minus current model";
// some formulations of that method negate it.
#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedsynsam/data.hpp"
#include "fedsynsam/errors.hpp"
#include "fedsynsam/model.hpp"
#include "fedsynsam/weights.hpp"

namespace fedsyn {

enum class PerturbKind { LocalGrad, Lesam, SynSam };

inline std::string to_string(PerturbKind k) {
    switch (k) {
    case PerturbKind::LocalGrad:
        return "local-grad";
    case PerturbKind::Lesam:
        return "lesam";
    case PerturbKind::SynSam:
        return "synsam";
    }
    return "?";
}

struct PerturbEstimator {
    PerturbKind kind = PerturbKind::LocalGrad;
    double rho = 0.05;
    double beta = 0.9;
    std::size_t sync_rounds = 30; ///< R: synsam uses the local gradient while t <= R
    std::shared_ptr<const Dataset> synthetic;
    std::optional<WeightVector> previous_update; ///< w^{t-1} - w^t

    void validate() const {
        if (!(rho >= 0.0) || !std::isfinite(rho)) throw ContractError("PerturbEstimator: rho must be >= 0");
        if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("PerturbEstimator: beta must be in [0, 1]");
    }

    /// Whether the interpolated estimate is active in round t.
    bool interpolating(std::size_t round) const { return kind == PerturbKind::SynSam && round > sync_rounds; }
};

struct AscentDirection {
    WeightVector direction;
    std::optional<double> local_loss; ///< F(w, xi) when it was computed on the way
};

/// Unnormalized ascent direction for round `round`.
inline AscentDirection estimate_ascent_direction(const Model& model, const PerturbEstimator& est, const WeightVector& w,
                                                 const Dataset& local_batch, const Dataset* syn_batch,
                                                 std::size_t round) {
    switch (est.kind) {
    case PerturbKind::Lesam:
        if (est.previous_update) {
            require_same_length(*est.previous_update, w, "lesam direction");
            return {*est.previous_update, std::nullopt};
        }
        break;
    case PerturbKind::SynSam:
        if (est.interpolating(round)) {
            if (!est.synthetic || syn_batch == nullptr)
                throw ContractError("synsam: synthetic dataset required after round " + std::to_string(est.sync_rounds));
            auto local = model.loss_and_grad(w, local_batch);
            const auto syn = model.loss_and_grad(w, *syn_batch);
            const double b = est.beta, c = 1.0 - est.beta;
            WeightVector g(w.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = b * local.grad[i] + c * syn.grad[i];
            return {std::move(g), local.loss};
        }
        break;
    case PerturbKind::LocalGrad:
        break;
    }
    auto local = model.loss_and_grad(w, local_batch);
    return {std::move(local.grad), local.loss};
}

struct SamStep {
    WeightVector descent_gradient;       ///< grad F(w~, xi)
    std::optional<WeightVector> perturbed; ///< w~ (absent when the perturbation was skipped)
    double loss = 0.0;                   ///< F(w, xi)
};

/// w~ = w + rho g / ||g||, descent gradient at w~ on the same minibatch.
/// rho == 0 or a zero ascent direction degrades to the plain SGD gradient.
inline SamStep sam_descent(const Model& model, const PerturbEstimator& est, const WeightVector& w,
                           const Dataset& local_batch, const Dataset* syn_batch, std::size_t round) {
    SamStep step;
    if (est.rho == 0.0) {
        auto lg = model.loss_and_grad(w, local_batch);
        step.descent_gradient = std::move(lg.grad);
        step.loss = lg.loss;
        return step;
    }
    AscentDirection asc = estimate_ascent_direction(model, est, w, local_batch, syn_batch, round);
    const double gn = norm(asc.direction);
    if (!std::isfinite(gn)) throw NumericalError("sam: non-finite ascent direction norm");
    if (gn == 0.0) {
        auto lg = model.loss_and_grad(w, local_batch);
        step.descent_gradient = std::move(lg.grad);
        step.loss = lg.loss;
        return step;
    }
    WeightVector tilde(w.size());
    const double s = est.rho / gn;
    for (std::size_t i = 0; i < w.size(); ++i) tilde[i] = w[i] + s * asc.direction[i];
    step.descent_gradient = model.loss_and_grad(tilde, local_batch).grad;
    step.loss = asc.local_loss ? *asc.local_loss : model.loss(w, local_batch);
    step.perturbed = std::move(tilde);
    return step;
}

/// One SAM update: w' = w - lr * grad F(w~, xi).
inline WeightVector sam_two_step(const Model& model, const WeightVector& w, const PerturbEstimator& est,
                                 const Dataset& local_batch, const Dataset* syn_batch, double lr, std::size_t round) {
    const SamStep step = sam_descent(model, est, w, local_batch, syn_batch, round);
    WeightVector out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] - lr * step.descent_gradient[i];
    return out;
}

// ---------------------------------------------------------------------------
// Diagnostics

class FedRunner;
struct MeasurementTool;

/// Capability for measurement code that reads every client's data. Only the
/// engine's evaluation path and a MeasurementTool (defined by the command
/// line and by tests) can mint one; training code never receives it.
class DiagnosticsAccess {
    DiagnosticsAccess() = default;
    friend class FedRunner;
    friend struct MeasurementTool;
};

struct PerturbDiagnostics {
    std::vector<std::optional<double>> client_cosine; ///< per client, empty when a norm vanishes
    std::optional<double> mean_cosine;                ///< over clients with a defined cosine
    double sigma_g = 0.0;                             ///< estimate: max_i ||grad F_i - grad F||
    std::optional<double> smoothness;                 ///< estimate of L as supplied
    std::optional<double> gamma;                      ///< max_i 2 sigma_g^2 + 4 L^2 rho^2 (1 - cos_i)
};

/// Cosine between each client's estimated global ascent direction and the
/// true full-batch global gradient (1/N) sum_i grad F_i(w).
inline PerturbDiagnostics perturbation_cosine(const Model& model, const PerturbEstimator& est, const WeightVector& w,
                                              const std::vector<ClientData>& clients, std::size_t round,
                                              std::optional<double> smoothness, const DiagnosticsAccess&) {
    if (clients.empty()) throw ContractError("perturbation_cosine: no clients");
    std::vector<WeightVector> local;
    local.reserve(clients.size());
    WeightVector global(w.size(), 0.0);
    for (const auto& c : clients) {
        local.push_back(model.loss_and_grad(w, c.full()).grad);
        axpy(1.0, local.back(), global);
    }
    global = (1.0 / static_cast<double>(clients.size())) * global;

    std::optional<WeightVector> syn_grad;
    if (est.interpolating(round)) {
        if (!est.synthetic) throw ContractError("perturbation_cosine: synsam needs a synthetic dataset");
        syn_grad = model.loss_and_grad(w, *est.synthetic).grad;
    }

    PerturbDiagnostics out;
    out.smoothness = smoothness;
    double sum = 0.0;
    std::size_t defined = 0;
    std::optional<double> worst_gamma;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        out.sigma_g = std::max(out.sigma_g, norm(local[i] - global));
        WeightVector estimate;
        if (est.kind == PerturbKind::Lesam && est.previous_update) {
            estimate = *est.previous_update;
        } else if (syn_grad) {
            estimate = WeightVector(w.size());
            for (std::size_t j = 0; j < w.size(); ++j)
                estimate[j] = est.beta * local[i][j] + (1.0 - est.beta) * (*syn_grad)[j];
        } else {
            estimate = local[i];
        }
        auto c = cosine(estimate, global);
        out.client_cosine.push_back(c);
        if (c) {
            sum += *c;
            ++defined;
        }
    }
    if (defined > 0) out.mean_cosine = sum / static_cast<double>(defined);
    if (smoothness) {
        const double L = *smoothness;
        for (const auto& c : out.client_cosine) {
            if (!c) continue;
            const double g = 2.0 * out.sigma_g * out.sigma_g + 4.0 * L * L * est.rho * est.rho * (1.0 - *c);
            worst_gamma = worst_gamma ? std::max(*worst_gamma, g) : g;
        }
        out.gamma = worst_gamma;
    }
    return out;
}

} // namespace fedsyn
