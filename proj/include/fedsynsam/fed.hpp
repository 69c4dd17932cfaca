// SPDX-License-Identifier: Apache-2.0
//
// Round loop for FedAvg / FedSAM / FedLESAM / FedSynSAM / DynaFed.
//
// Rounds are numbered t = 0 .. T-1. Snapshot w^0 and every w^{t+1} with
// t <= R are kept; condensation runs at the end of round R and the
// synthetic set is in use from round R + 1 on.
//
// Random streams, all children of Rng(seed, "fed"):
//   init                       model initialization
//   round/<t>/sample           client selection
//   round/<t>/client/<i>/batch local minibatches
//   round/<t>/client/<i>/syn   synthetic minibatches
//   round/<t>/client/<i>/quant quantizer
//   condense, syn-init         distillation
// The algorithm never enters a stream label, so two algorithms that draw the
// same things draw the same numbers.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fedsynsam/compress.hpp"
#include "fedsynsam/data.hpp"
#include "fedsynsam/distill.hpp"
#include "fedsynsam/errors.hpp"
#include "fedsynsam/metrics.hpp"
#include "fedsynsam/model.hpp"
#include "fedsynsam/rng.hpp"
#include "fedsynsam/sam.hpp"
#include "fedsynsam/weights.hpp"

namespace fedsyn {

enum class Algorithm { FedAvg, FedSam, FedLesam, FedSynSam, DynaFed };

inline std::string to_string(Algorithm a) {
    switch (a) {
    case Algorithm::FedAvg:
        return "fedavg";
    case Algorithm::FedSam:
        return "fedsam";
    case Algorithm::FedLesam:
        return "fedlesam";
    case Algorithm::FedSynSam:
        return "fedsynsam";
    case Algorithm::DynaFed:
        return "dynafed";
    }
    return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
    for (auto a : {Algorithm::FedAvg, Algorithm::FedSam, Algorithm::FedLesam, Algorithm::FedSynSam, Algorithm::DynaFed})
        if (to_string(a) == s) return a;
    throw ContractError("unknown algorithm '" + s + "'");
}

inline bool uses_sam(Algorithm a) {
    return a == Algorithm::FedSam || a == Algorithm::FedLesam || a == Algorithm::FedSynSam;
}
inline bool condenses(Algorithm a) { return a == Algorithm::FedSynSam || a == Algorithm::DynaFed; }

struct FedConfig {
    Algorithm algorithm = Algorithm::FedAvg;
    std::size_t clients = 10;      ///< N
    std::size_t sampled = 10;      ///< S
    std::size_t rounds = 100;      ///< T
    std::size_t local_steps = 10;  ///< K
    std::size_t batch_size = 128;  ///< 0 = full local dataset
    double lr_local = 0.05;
    double lr_global = 1.0;
    double rho = 0.05;
    double beta = 0.9;
    std::size_t sync_rounds = 30;  ///< R
    CompressorSpec compressor;
    DistillConfig distill;
    std::size_t syn_batch_size = 0; ///< 0 = whole synthetic set
    std::size_t dynafed_steps = 10;
    std::size_t eval_every = 5;     ///< final round is always evaluated
    std::size_t diag_every = 0;     ///< cosine diagnostics cadence, 0 = off
    bool diag_smoothness = false;   ///< also estimate L for the gamma bound
    bool final_eig = false;
    double eig_tol = 1e-6;
    std::size_t eig_max_iters = 300;
    std::size_t threads = 1;

    void validate() const {
        if (clients == 0) throw ContractError("clients must be >= 1");
        if (sampled == 0 || sampled > clients) throw ContractError("sampled must be in [1, clients]");
        if (local_steps == 0) throw ContractError("local_steps must be >= 1");
        if (!(lr_local >= 0.0) || !std::isfinite(lr_local)) throw ContractError("lr_local must be >= 0");
        if (!(lr_global > 0.0) || !std::isfinite(lr_global)) throw ContractError("lr_global must be > 0");
        if (!(rho >= 0.0) || !std::isfinite(rho)) throw ContractError("rho must be >= 0");
        if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("beta must be in [0, 1]");
        if (eval_every == 0) throw ContractError("eval_every must be >= 1");
        if (!(eig_tol > 0.0) || eig_max_iters == 0) throw ContractError("eig settings must be positive");
        compressor.validate();
        distill.validate();
        if (condenses(algorithm)) {
            if (sync_rounds >= rounds)
                throw ContractError("sync_rounds must be < rounds for " + to_string(algorithm));
            if (distill.inner_steps > sync_rounds)
                throw ContractError("distill.inner_steps must be <= sync_rounds");
        }
    }
};

struct RoundRecord {
    std::size_t round = 0;
    std::optional<double> test_accuracy;
    std::optional<double> test_loss;
    double train_loss = 0.0;         ///< mean minibatch loss over sampled clients and local steps
    double compression_error = 0.0;  ///< mean ||Q(D_i) - D_i||
    double update_norm = 0.0;        ///< mean ||D_i||
    std::uint64_t payload_bits = 0;  ///< total uplink this round
    bool synthetic_active = false;
    std::optional<double> cosine;        ///< this run's estimator
    std::optional<double> cosine_local;  ///< local-gradient estimator at the same point
    std::optional<double> cosine_lesam;  ///< previous-update estimator at the same point
    std::optional<double> sigma_g;
    std::optional<double> smoothness;
    std::optional<double> gamma;

    friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

/// Train/test split and a client partition of the train split.
struct FederatedData {
    Dataset train;
    Dataset test;
    Partition partition;

    std::vector<ClientData> clients() const {
        std::vector<ClientData> out;
        out.reserve(partition.num_clients());
        for (const auto& idx : partition.clients) out.emplace_back(train, idx);
        return out;
    }
};

struct RunResult {
    std::vector<RoundRecord> records;
    WeightVector initial_weights;
    WeightVector final_weights;
    Evaluation final_eval;
    TrajectoryBuffer trajectory;
    std::optional<SyntheticDataset> synthetic;
    std::vector<double> condense_losses;
    std::optional<EigEstimate> final_eig;
    std::optional<WeightVector> last_update; ///< w^{T-1} - w^T
};

/// Uniform S-subset of [0, N) without replacement, ascending.
inline std::vector<std::size_t> sample_clients(std::size_t n, std::size_t s, Rng rng) {
    if (s > n) throw ContractError("sample_clients: S > N");
    return rng.sample_without_replacement(n, s);
}

struct LocalUpdate {
    WeightVector delta;    ///< w_{i,K} - w^t
    double mean_loss = 0.0;
};

/// K local steps from w^t on one client's data only. The update is
/// accumulated in displacement form, w_{i,k} = w^t + D.
inline LocalUpdate local_round(const Model& model, const ClientData& client, const WeightVector& global,
                               const FedConfig& cfg, const PerturbEstimator& est, const Dataset* synthetic,
                               std::size_t round, Rng rng) {
    Rng batch_rng = rng.derive("batch");
    Rng syn_rng = rng.derive("syn");
    const bool sam = uses_sam(cfg.algorithm);
    LocalUpdate out{WeightVector(global.size(), 0.0), 0.0};
    WeightVector w(global.size());
    for (std::size_t k = 0; k < cfg.local_steps; ++k) {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = global[i] + out.delta[i];
        const Dataset batch = client.sample(cfg.batch_size, batch_rng);
        WeightVector g;
        double loss = 0.0;
        if (sam) {
            std::optional<Dataset> syn_batch;
            if (est.interpolating(round)) {
                if (synthetic == nullptr) throw ContractError("local_round: synsam needs the synthetic dataset");
                syn_batch = sample_batch(*synthetic, cfg.syn_batch_size, syn_rng);
            }
            SamStep step = sam_descent(model, est, w, batch, syn_batch ? &*syn_batch : nullptr, round);
            g = std::move(step.descent_gradient);
            loss = step.loss;
        } else {
            LossGrad lg = model.loss_and_grad(w, batch);
            g = std::move(lg.grad);
            loss = lg.loss;
        }
        for (std::size_t i = 0; i < w.size(); ++i) out.delta[i] -= cfg.lr_local * g[i];
        out.mean_loss += loss;
    }
    out.mean_loss /= static_cast<double>(cfg.local_steps);
    if (!all_finite(out.delta)) throw NumericalError("local_round: non-finite model update");
    return out;
}

/// w^{t+1} = w^t + (lr_global / S) sum_i Q(D_i), summed in the given order.
inline WeightVector aggregate(const WeightVector& global, const std::vector<WeightVector>& updates, double lr_global) {
    if (updates.empty()) throw ContractError("aggregate: no updates");
    WeightVector sum(global.size(), 0.0);
    for (const auto& u : updates) axpy(1.0, u, sum);
    const double scale = lr_global / static_cast<double>(updates.size());
    WeightVector out(global.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = global[i] + scale * sum[i];
    return out;
}

/// Drives one run. Owns the only path that mints diagnostics access.
class FedRunner {
public:
    using RoundObserver = std::function<void(std::size_t round, const WeightVector& next)>;

    FedRunner(const Model& model, const FederatedData& data, FedConfig cfg, std::uint64_t seed)
        : model_(model), data_(data), cfg_(std::move(cfg)), root_(seed, "fed") {
        cfg_.validate();
        if (data_.partition.num_clients() != cfg_.clients)
            throw ContractError("FedRunner: partition has " + std::to_string(data_.partition.num_clients()) +
                                " clients, config says " + std::to_string(cfg_.clients));
        data_.partition.validate(data_.train.size());
        if (data_.test.empty()) throw ContractError("FedRunner: empty test split");
    }

    void on_round(RoundObserver obs) { observer_ = std::move(obs); }

    /// Start from these weights instead of the seeded initialization.
    void set_initial_weights(WeightVector w) {
        require_same_length(w, WeightVector(model_.param_count()), "set_initial_weights");
        initial_ = std::move(w);
    }

    RunResult run() {
        const auto clients = data_.clients();
        RunResult res;
        WeightVector w = initial_ ? *initial_ : model_.init(root_.derive("init"));
        res.initial_weights = w;
        res.trajectory.append(0, w);

        PerturbEstimator est;
        est.kind = cfg_.algorithm == Algorithm::FedLesam    ? PerturbKind::Lesam
                   : cfg_.algorithm == Algorithm::FedSynSam ? PerturbKind::SynSam
                                                            : PerturbKind::LocalGrad;
        est.rho = cfg_.rho;
        est.beta = cfg_.beta;
        est.sync_rounds = cfg_.sync_rounds;
        std::optional<WeightVector> previous_update;

        for (std::size_t t = 0; t < cfg_.rounds; ++t) {
            const Rng round_rng = root_.derive("round").derive(t);
            est.previous_update = previous_update;
            if (res.synthetic && !est.synthetic) est.synthetic = std::make_shared<const Dataset>(res.synthetic->data);
            RoundRecord rec;
            rec.round = t;
            rec.synthetic_active = est.interpolating(t);
            if (cfg_.diag_every > 0 && t % cfg_.diag_every == 0) measure(rec, est, w, clients, t, previous_update);

            const auto chosen = sample_clients(cfg_.clients, cfg_.sampled, round_rng.derive("sample"));
            const Dataset* syn = res.synthetic ? &res.synthetic->data : nullptr;
            std::vector<LocalUpdate> updates(chosen.size());
            std::vector<CompressionReport> reports(chosen.size());
            std::vector<WeightVector> compressed(chosen.size());
            auto work = [&](std::size_t j) {
                const Rng crng = round_rng.derive("client").derive(chosen[j]);
                updates[j] = local_round(model_, clients[chosen[j]], w, cfg_, est, syn, t, crng);
                Rng qrng = crng.derive("quant");
                auto [q, rep] = apply(cfg_.compressor, updates[j].delta, qrng);
                compressed[j] = std::move(q);
                reports[j] = rep;
            };
            for_each_client(chosen.size(), work);

            for (std::size_t j = 0; j < chosen.size(); ++j) {
                rec.train_loss += updates[j].mean_loss;
                rec.compression_error += reports[j].error_norm;
                rec.update_norm += reports[j].input_norm;
                rec.payload_bits += reports[j].payload_bits;
            }
            const double s = static_cast<double>(chosen.size());
            rec.train_loss /= s;
            rec.compression_error /= s;
            rec.update_norm /= s;

            WeightVector next = aggregate(w, compressed, cfg_.lr_global);
            if (t <= cfg_.sync_rounds) res.trajectory.append(t + 1, next);
            if (condenses(cfg_.algorithm) && t == cfg_.sync_rounds) {
                auto cres = condense_now(res.trajectory);
                res.condense_losses = std::move(cres.losses);
                res.synthetic = std::move(cres.synthetic);
            }
            if (cfg_.algorithm == Algorithm::DynaFed && res.synthetic)
                next = inner_train(model_, res.synthetic->data, next, cfg_.lr_local, cfg_.dynafed_steps);
            if (!all_finite(next)) throw NumericalError("round " + std::to_string(t) + ": non-finite global model");

            previous_update = w - next;
            w = std::move(next);
            if ((t + 1) % cfg_.eval_every == 0 || t + 1 == cfg_.rounds) {
                const Evaluation ev = evaluate(model_, w, data_.test);
                rec.test_accuracy = ev.accuracy;
                rec.test_loss = ev.loss;
            }
            if (observer_) observer_(t, w);
            res.records.push_back(rec);
        }

        res.final_weights = w;
        res.last_update = previous_update;
        res.final_eval = evaluate(model_, w, data_.test);
        if (cfg_.final_eig)
            res.final_eig = top_eigenvalue(model_, w, data_.train, cfg_.eig_tol, cfg_.eig_max_iters, root_.derive("eig"));
        return res;
    }

private:
    const Model& model_;
    const FederatedData& data_;
    FedConfig cfg_;
    Rng root_;
    RoundObserver observer_;
    std::optional<WeightVector> initial_;

    CondenseResult condense_now(const TrajectoryBuffer& traj) const {
        const double alpha = cfg_.distill.alpha_init.value_or(cfg_.lr_local > 0.0 ? cfg_.lr_local : kMinInnerStep);
        SyntheticDataset init = init_synthetic(data_.train.classes, cfg_.distill.ipc, data_.train.dims(), alpha,
                                               root_.derive("syn-init"), cfg_.distill.init_mean, cfg_.distill.init_std);
        return condense(model_, traj, cfg_.distill, std::move(init), root_.derive("condense"));
    }

    void measure(RoundRecord& rec, const PerturbEstimator& est, const WeightVector& w,
                 const std::vector<ClientData>& clients, std::size_t t,
                 const std::optional<WeightVector>& previous_update) const {
        const DiagnosticsAccess token;
        std::optional<double> smooth;
        if (cfg_.diag_smoothness)
            smooth = top_eigenvalue(model_, w, data_.train, cfg_.eig_tol, cfg_.eig_max_iters,
                                    root_.derive("diag-eig").derive(t))
                         .lambda;
        const auto own = perturbation_cosine(model_, est, w, clients, t, smooth, token);
        rec.cosine = own.mean_cosine;
        rec.sigma_g = own.sigma_g;
        rec.smoothness = smooth;
        rec.gamma = own.gamma;

        PerturbEstimator local = est;
        local.kind = PerturbKind::LocalGrad;
        rec.cosine_local = perturbation_cosine(model_, local, w, clients, t, std::nullopt, token).mean_cosine;
        if (previous_update) {
            PerturbEstimator lesam = est;
            lesam.kind = PerturbKind::Lesam;
            lesam.previous_update = previous_update;
            rec.cosine_lesam = perturbation_cosine(model_, lesam, w, clients, t, std::nullopt, token).mean_cosine;
        }
    }

    template <class Fn>
    void for_each_client(std::size_t n, Fn& fn) const {
        const std::size_t workers = std::min(cfg_.threads, n);
        if (workers <= 1) {
            for (std::size_t j = 0; j < n; ++j) fn(j);
            return;
        }
        std::vector<std::exception_ptr> errors(workers);
        {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < workers; ++w)
                pool.emplace_back([&, w] {
                    try {
                        for (std::size_t j = w; j < n; j += workers) fn(j);
                    } catch (...) {
                        errors[w] = std::current_exception();
                    }
                });
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
};

/// Convenience wrapper around FedRunner.
inline RunResult run(const Model& model, const FederatedData& data, const FedConfig& cfg, std::uint64_t seed) {
    FedRunner runner(model, data, cfg, seed);
    return runner.run();
}

} // namespace fedsyn
