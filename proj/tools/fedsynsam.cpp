// SPDX-License-Identifier: Apache-2.0
//
// fedsynsam: run experiment plans and inspect their artifacts.
//
//   fedsynsam run configs/toy.cfg --out runs/toy
//   fedsynsam eig runs/toy/fedavg/seed_1/checkpoint.fss
//   fedsynsam landscape runs/toy/fedavg/seed_1/checkpoint.fss --resolution 21
//   fedsynsam cosine runs/toy/fedsynsam/seed_1/checkpoint.fss
//   fedsynsam condense runs/toy/fedsynsam/seed_1
//
// The default output directory comes from FEDSYN_OUT when --out is absent.
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "fedsynsam/fedsynsam.hpp"

namespace fs = std::filesystem;
using namespace fedsyn;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t threads = 0;
};

std::optional<fs::path> default_out(const Globals& g) {
    if (!g.out.empty()) return fs::path(g.out);
    if (const char* env = std::getenv("FEDSYN_OUT"); env && *env) return fs::path(env);
    return std::nullopt;
}

int cmd_run(const Globals& g, const std::string& config) {
    ExperimentPlan plan = parse_config(config);
    if (g.seed) plan.seeds = {*g.seed};
    if (g.threads) plan.threads = g.threads;
    const fs::path out = default_out(g).value_or(fs::path(plan.output_dir));
    const PlanOutcome res = run_plan(plan, out);
    std::cout << "executed " << res.executed << ", skipped " << res.skipped << ", failed " << res.failures.size()
              << "; summary at " << (out / "summary.csv").string() << "\n";
    return res.exit_code;
}

int cmd_eig(const Globals& g, const std::string& ckpt, double tol, std::size_t iters) {
    const LoadedRun lr = load_run(ckpt);
    const Mlp model(lr.checkpoint.spec);
    const EigEstimate e =
        top_eigenvalue(model, lr.checkpoint.weights, lr.data.train, tol, iters, Rng(g.seed.value_or(lr.seed), "eig"));
    const std::string line = to_json(e).dump();
    std::cout << line << "\n";
    if (auto out = default_out(g)) atomic_write(*out, line + "\n");
    return e.converged ? 0 : 2;
}

int cmd_landscape(const Globals& g, const std::string& ckpt, std::size_t resolution, double extent) {
    const fs::path out = default_out(g).value_or(fs::path(ckpt).parent_path() / "landscape.csv");
    const LandscapeGrid grid = export_landscape(ckpt, resolution, extent, g.seed.value_or(1), out);
    std::cout << "wrote " << grid.loss.size() << " cells to " << out.string() << "\n";
    return 0;
}

int cmd_cosine(const std::string& ckpt);

int cmd_condense(const Globals& g, const std::string& dir) {
    fs::path src = dir;
    if (fs::is_directory(src)) src /= "trajectory.fss";
    json meta;
    const TrajectoryBuffer traj = load_trajectory(src, &meta);
    const Cell cell = cell_from_provenance(meta);
    const std::uint64_t seed = g.seed.value_or(meta.at("seed").get<std::uint64_t>());
    const FederatedData data = build_data(cell, seed);
    const Mlp model(model_spec(cell, data.train));
    const auto& dc = cell.fed.distill;
    const double alpha = dc.alpha_init.value_or(cell.fed.lr_local);
    SyntheticDataset init = init_synthetic(data.train.classes, dc.ipc, data.train.dims(), alpha,
                                           Rng(seed, "fed").derive("syn-init"), dc.init_mean, dc.init_std);
    const std::size_t s = std::min(dc.inner_steps, traj.size() - 1);
    DistillConfig cfg = dc;
    cfg.inner_steps = s;
    const double before = mean_segment_loss(model, init, traj, s);
    CondenseResult res = condense(model, traj, cfg, init, Rng(seed, "fed").derive("condense"));
    const double after = mean_segment_loss(model, res.synthetic, traj, s);
    const fs::path out = default_out(g).value_or(src.parent_path());
    json prov = meta;
    prov.erase("rounds");
    prov["iterations"] = cfg.iterations;
    save_synthetic(out / "synthetic.fss", res.synthetic, prov);
    std::ostringstream csv;
    csv.precision(17);
    csv << "iteration,segment_loss\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i) csv << i << ',' << res.losses[i] << '\n';
    atomic_write(out / "condense.csv", csv.str());
    std::cout << json{{"mean_segment_loss_init", before}, {"mean_segment_loss_final", after}, {"alpha", res.synthetic.alpha}}
                     .dump()
              << "\n";
    return 0;
}

} // namespace

namespace fedsyn {
/// The cosine command is a measurement tool and may read every client's data.
struct MeasurementTool {
    static DiagnosticsAccess token() { return {}; }
};
} // namespace fedsyn

namespace {

int cmd_cosine(const std::string& ckpt) {
    const LoadedRun lr = load_run(ckpt);
    const Mlp model(lr.checkpoint.spec);
    const auto clients = lr.data.clients();
    const auto token = MeasurementTool::token();
    const auto& w = lr.checkpoint.weights;
    json out;
    PerturbEstimator local;
    local.rho = lr.cell.fed.rho;
    const auto d_local = perturbation_cosine(model, local, w, clients, 0, std::nullopt, token);
    out["cosine_local"] = detail::opt(d_local.mean_cosine);
    out["sigma_g"] = d_local.sigma_g;
    if (lr.checkpoint.previous_update) {
        PerturbEstimator lesam = local;
        lesam.kind = PerturbKind::Lesam;
        lesam.previous_update = lr.checkpoint.previous_update;
        out["cosine_lesam"] = detail::opt(perturbation_cosine(model, lesam, w, clients, 0, std::nullopt, token).mean_cosine);
    }
    const fs::path syn_path = fs::path(ckpt).parent_path() / "synthetic.fss";
    if (fs::exists(syn_path)) {
        PerturbEstimator syn = local;
        syn.kind = PerturbKind::SynSam;
        syn.beta = lr.cell.fed.beta;
        syn.sync_rounds = 0;
        syn.synthetic = std::make_shared<const Dataset>(load_synthetic(syn_path).data);
        out["cosine_synsam"] = detail::opt(perturbation_cosine(model, syn, w, clients, 1, std::nullopt, token).mean_cosine);
    }
    std::cout << out.dump() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated SAM experiment engine"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    std::uint64_t seed_flag = 0;
    auto* seed_opt = app.add_option("--seed", seed_flag, "Override the seed (a single seed for `run`)");
    app.add_option("--out", g.out, "Output directory or file (default: $FEDSYN_OUT)");
    app.add_option("--threads", g.threads, "Runs executed in parallel");

    std::string config, ckpt, trajdir;
    double tol = 1e-6, extent = 1.0;
    std::size_t iters = 300, resolution = 21;

    auto* run = app.add_subcommand("run", "Execute an experiment plan");
    run->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
    auto* eig = app.add_subcommand("eig", "Top Hessian eigenvalue of a checkpoint on its training split");
    eig->add_option("checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    eig->add_option("--tol", tol, "Residual tolerance");
    eig->add_option("--max-iters", iters, "Iteration cap");
    auto* land = app.add_subcommand("landscape", "Loss surface CSV around a checkpoint");
    land->add_option("checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    land->add_option("--resolution", resolution, "Odd grid size");
    land->add_option("--extent", extent, "Half-width of the grid");
    auto* cos = app.add_subcommand("cosine", "Perturbation cosine diagnostics of a checkpoint");
    cos->add_option("checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    auto* cond = app.add_subcommand("condense", "Condense a synthetic set from a recorded trajectory");
    cond->add_option("trajectory", trajdir, "Run directory or trajectory file")->required()->check(CLI::ExistingPath);
    auto* keys = app.add_subcommand("keys", "List config keys and their defaults");

    CLI11_PARSE(app, argc, argv);
    if (seed_opt->count()) g.seed = seed_flag;
    try {
        if (*run) return cmd_run(g, config);
        if (*eig) return cmd_eig(g, ckpt, tol, iters);
        if (*land) return cmd_landscape(g, ckpt, resolution, extent);
        if (*cos) return cmd_cosine(ckpt);
        if (*cond) return cmd_condense(g, trajdir);
        if (*keys) {
            std::cout << describe_keys();
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
