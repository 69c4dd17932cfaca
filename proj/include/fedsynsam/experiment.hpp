// SPDX-License-Identifier: Apache-2.0
//
// Plan execution and persistence.
//
// Layout under the output directory:
//   <cell>/seed_<s>/records.jsonl   one JSON object per line, "record" is
//                                   "round", "eig", "condense" or "final"
//   <cell>/seed_<s>/manifest.json   hash, seed, version, timestamps, artifacts
//   <cell>/seed_<s>/checkpoint.fss  final weights (+ previous global update)
//   <cell>/seed_<s>/trajectory.fss  w^0 .. w^{R+1}
//   <cell>/seed_<s>/synthetic.fss   condensed set, when one was built
//   summary.csv                     cell,seed,metric,value,mean,std
//
// Records hold no wall-clock values, so reruns are byte-identical; timings
// live in the manifest.
#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedsynsam/config.hpp"
#include "fedsynsam/data.hpp"
#include "fedsynsam/fed.hpp"
#include "fedsynsam/io.hpp"
#include "fedsynsam/metrics.hpp"
#include "fedsynsam/model.hpp"
#include "fedsynsam/version.hpp"

namespace fedsyn {

namespace fs = std::filesystem;

/// Builds train/test splits and the client partition for one seed.
inline FederatedData build_data(const Cell& cell, std::uint64_t seed) {
    const DataSpec& ds = cell.data;
    Rng data_rng(seed, "data");
    FederatedData fd;
    if (ds.kind == DatasetKind::Blobs) {
        Dataset all = make_blobs(ds.classes, ds.per_class + ds.test_per_class, ds.dims, ds.separation,
                                 data_rng.derive("blobs"));
        auto [train, test] = split_per_class(all, ds.test_per_class, data_rng.derive("split"));
        fd.train = std::move(train);
        fd.test = std::move(test);
    } else {
        fd.train = load_idx(ds.train_images, ds.train_labels);
        fd.test = load_idx(ds.test_images, ds.test_labels);
        fd.test.classes = fd.train.classes = std::max(fd.train.classes, fd.test.classes);
        auto subset = [](const Dataset& d, std::size_t n, Rng rng) {
            if (n == 0 || n >= d.size()) return d;
            const auto picks = rng.sample_without_replacement(d.size(), n);
            return gather(d, picks);
        };
        fd.train = subset(fd.train, ds.train_subset, data_rng.derive("train-subset"));
        fd.test = subset(fd.test, ds.test_subset, data_rng.derive("test-subset"));
    }
    Rng prng(seed, "partition");
    switch (ds.partition) {
    case PartitionKind::Iid:
        fd.partition = partition_iid(fd.train, cell.fed.clients, prng);
        break;
    case PartitionKind::Dirichlet:
        fd.partition = partition_dirichlet(fd.train, cell.fed.clients, ds.alpha, prng);
        break;
    case PartitionKind::Pathological:
        fd.partition = partition_pathological(fd.train, cell.fed.clients, ds.shards, prng);
        break;
    }
    return fd;
}

inline MlpSpec model_spec(const Cell& cell, const Dataset& train) {
    MlpSpec spec;
    spec.layers.push_back(train.dims());
    for (auto h : cell.hidden) spec.layers.push_back(h);
    spec.layers.push_back(static_cast<std::size_t>(train.classes));
    return spec;
}

// ---------------------------------------------------------------------------
// JSON encoding of records

namespace detail {

inline json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> opt_of(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return it->get<double>();
}

} // namespace detail

inline json to_json(const RoundRecord& r) {
    return json{{"record", "round"},
                {"round", r.round},
                {"test_accuracy", detail::opt(r.test_accuracy)},
                {"test_loss", detail::opt(r.test_loss)},
                {"train_loss", r.train_loss},
                {"compression_error", r.compression_error},
                {"update_norm", r.update_norm},
                {"payload_bits", r.payload_bits},
                {"synthetic_active", r.synthetic_active},
                {"cosine", detail::opt(r.cosine)},
                {"cosine_local", detail::opt(r.cosine_local)},
                {"cosine_lesam", detail::opt(r.cosine_lesam)},
                {"sigma_g", detail::opt(r.sigma_g)},
                {"smoothness", detail::opt(r.smoothness)},
                {"gamma", detail::opt(r.gamma)}};
}

inline RoundRecord round_from_json(const json& j) {
    RoundRecord r;
    r.round = j.at("round").get<std::size_t>();
    r.test_accuracy = detail::opt_of(j, "test_accuracy");
    r.test_loss = detail::opt_of(j, "test_loss");
    r.train_loss = j.at("train_loss").get<double>();
    r.compression_error = j.at("compression_error").get<double>();
    r.update_norm = j.at("update_norm").get<double>();
    r.payload_bits = j.at("payload_bits").get<std::uint64_t>();
    r.synthetic_active = j.at("synthetic_active").get<bool>();
    r.cosine = detail::opt_of(j, "cosine");
    r.cosine_local = detail::opt_of(j, "cosine_local");
    r.cosine_lesam = detail::opt_of(j, "cosine_lesam");
    r.sigma_g = detail::opt_of(j, "sigma_g");
    r.smoothness = detail::opt_of(j, "smoothness");
    r.gamma = detail::opt_of(j, "gamma");
    return r;
}

inline json to_json(const EigEstimate& e) {
    return json{{"record", "eig"},       {"split", "train"},        {"lambda_max", e.lambda},
                {"iterations", e.iterations}, {"residual", e.residual}, {"converged", e.converged}};
}

inline std::string records_jsonl(const RunResult& res) {
    std::string out;
    for (const auto& r : res.records) out += to_json(r).dump() + "\n";
    for (std::size_t i = 0; i < res.condense_losses.size(); ++i)
        out += json{{"record", "condense"}, {"iteration", i}, {"segment_loss", res.condense_losses[i]}}.dump() + "\n";
    if (res.final_eig) out += to_json(*res.final_eig).dump() + "\n";
    out += json{{"record", "final"},
                {"test_accuracy", res.final_eval.accuracy},
                {"test_loss", res.final_eval.loss},
                {"synthetic_alpha", res.synthetic ? json(res.synthetic->alpha) : json(nullptr)}}
               .dump() +
           "\n";
    return out;
}

inline std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<json> rows;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            rows.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return rows;
}

/// Scalar metrics of one run, derived from its JSONL rows only.
inline std::map<std::string, double> run_metrics(const std::vector<json>& rows) {
    std::map<std::string, double> m;
    double cos_sum = 0.0, cos_lesam = 0.0, cos_local = 0.0, err = 0.0;
    std::size_t cos_n = 0, lesam_n = 0, local_n = 0, rounds = 0;
    std::optional<double> first_condense, last_condense;
    for (const auto& r : rows) {
        const std::string kind = r.at("record").get<std::string>();
        if (kind == "round") {
            ++rounds;
            err += r.at("compression_error").get<double>();
            if (auto c = detail::opt_of(r, "cosine")) cos_sum += *c, ++cos_n;
            if (auto c = detail::opt_of(r, "cosine_lesam")) cos_lesam += *c, ++lesam_n;
            if (auto c = detail::opt_of(r, "cosine_local")) cos_local += *c, ++local_n;
        } else if (kind == "condense") {
            const double l = r.at("segment_loss").get<double>();
            if (!first_condense) first_condense = l;
            last_condense = l;
        } else if (kind == "eig") {
            m["lambda_max"] = r.at("lambda_max").get<double>();
        } else if (kind == "final") {
            m["final_accuracy"] = r.at("test_accuracy").get<double>();
            m["final_loss"] = r.at("test_loss").get<double>();
        }
    }
    if (rounds) m["mean_compression_error"] = err / static_cast<double>(rounds);
    if (cos_n) m["mean_cosine"] = cos_sum / static_cast<double>(cos_n);
    if (lesam_n) m["mean_cosine_lesam"] = cos_lesam / static_cast<double>(lesam_n);
    if (local_n) m["mean_cosine_local"] = cos_local / static_cast<double>(local_n);
    if (first_condense) {
        m["condense_loss_first"] = *first_condense;
        m["condense_loss_last"] = *last_condense;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Running

struct RunPaths {
    fs::path dir, records, manifest, checkpoint, trajectory, synthetic;
};

inline RunPaths run_paths(const fs::path& out_dir, const std::string& cell, std::uint64_t seed) {
    RunPaths p;
    p.dir = out_dir / cell / ("seed_" + std::to_string(seed));
    p.records = p.dir / "records.jsonl";
    p.manifest = p.dir / "manifest.json";
    p.checkpoint = p.dir / "checkpoint.fss";
    p.trajectory = p.dir / "trajectory.fss";
    p.synthetic = p.dir / "synthetic.fss";
    return p;
}

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// True when a complete manifest for exactly this config and seed exists.
inline bool run_is_complete(const RunPaths& p, const Cell& cell, std::uint64_t seed) {
    if (!fs::exists(p.manifest) || !fs::exists(p.records)) return false;
    try {
        const json m = json::parse(read_text(p.manifest));
        return m.value("complete", false) && m.value("config_hash", std::string()) == hex64(config_hash(cell)) &&
               m.value("seed", std::uint64_t{0}) == seed;
    } catch (const std::exception&) {
        return false;
    }
}

/// Provenance shared by every artifact of a run.
inline json provenance(const Cell& cell, std::uint64_t seed) {
    return json{{"cell", cell.name},
                {"seed", seed},
                {"config", canonical_cell(cell)},
                {"config_hash", hex64(config_hash(cell))},
                {"code_version", kVersion}};
}

/// Rebuilds the cell stored in an artifact's provenance.
inline Cell cell_from_provenance(const json& meta) {
    Cell c = parse_config_text(meta.at("config").get<std::string>(), "<artifact config>").cells.at(0);
    c.name = meta.value("cell", std::string("main"));
    return c;
}

/// Executes one (cell, seed) and writes its artifacts. Returns the result.
inline RunResult execute_run(const Cell& cell, std::uint64_t seed, const fs::path& out_dir) {
    const RunPaths p = run_paths(out_dir, cell.name, seed);
    fs::create_directories(p.dir);
    const std::string started = utc_now();
    const auto t0 = std::chrono::steady_clock::now();

    const FederatedData data = build_data(cell, seed);
    const Mlp model(model_spec(cell, data.train));
    FedRunner runner(model, data, cell.fed, seed);
    RunResult res = runner.run();

    atomic_write(p.records, records_jsonl(res));
    json prov = provenance(cell, seed);
    Checkpoint ck{model.spec(), res.final_weights, prov, res.last_update};
    save_checkpoint(p.checkpoint, ck);
    save_trajectory(p.trajectory, res.trajectory, prov);
    if (res.synthetic) {
        json sp = prov;
        sp["sync_rounds"] = cell.fed.sync_rounds;
        sp["iterations"] = cell.fed.distill.iterations;
        save_synthetic(p.synthetic, *res.synthetic, sp);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json manifest = prov;
    manifest["started_at"] = started;
    manifest["finished_at"] = utc_now();
    manifest["wall_seconds"] = secs;
    manifest["complete"] = true;
    manifest["artifacts"] = {{"records", p.records.filename().string()},
                             {"checkpoint", p.checkpoint.filename().string()},
                             {"trajectory", p.trajectory.filename().string()}};
    if (res.synthetic) manifest["artifacts"]["synthetic"] = p.synthetic.filename().string();
    atomic_write(p.manifest, manifest.dump(2) + "\n");
    return res;
}

struct SummaryRow {
    std::string cell;
    std::uint64_t seed = 0;
    std::string metric;
    double value = 0.0, mean = 0.0, stddev = 0.0;
};

/// Per (cell, metric): mean and sample standard deviation across seeds,
/// computed from the JSONL files on disk.
inline std::vector<SummaryRow> summarize(const ExperimentPlan& plan, const fs::path& out_dir) {
    std::vector<SummaryRow> rows;
    for (const auto& cell : plan.cells) {
        std::map<std::string, std::vector<std::pair<std::uint64_t, double>>> by_metric;
        for (auto seed : plan.seeds) {
            const auto p = run_paths(out_dir, cell.name, seed);
            if (!fs::exists(p.records)) continue;
            for (const auto& [k, v] : run_metrics(read_jsonl(p.records))) by_metric[k].push_back({seed, v});
        }
        for (const auto& [metric, vals] : by_metric) {
            double mean = 0.0;
            for (const auto& sv : vals) mean += sv.second;
            mean /= static_cast<double>(vals.size());
            double ss = 0.0;
            for (const auto& sv : vals) ss += (sv.second - mean) * (sv.second - mean);
            const double sd = vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1)) : 0.0;
            for (const auto& [seed, v] : vals) rows.push_back({cell.name, seed, metric, v, mean, sd});
        }
    }
    return rows;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "cell,seed,metric,value,mean,std\n";
    for (const auto& r : rows)
        os << r.cell << ',' << r.seed << ',' << r.metric << ',' << r.value << ',' << r.mean << ',' << r.stddev << '\n';
    return os.str();
}

struct PlanOutcome {
    int exit_code = 0;
    std::size_t executed = 0;
    std::size_t skipped = 0;
    std::vector<std::string> failures;
};

/// Runs every (cell, seed) not already complete, then writes summary.csv.
/// A failing run is reported and the rest of the plan continues.
inline PlanOutcome run_plan(const ExperimentPlan& plan, const fs::path& out_dir, std::ostream* log = &std::cerr) {
    plan.validate();
    struct Job {
        const Cell* cell;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& c : plan.cells)
        for (auto s : plan.seeds) jobs.push_back({&c, s});

    PlanOutcome outcome;
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
            const Job& job = jobs[j];
            const auto p = run_paths(out_dir, job.cell->name, job.seed);
            if (run_is_complete(p, *job.cell, job.seed)) {
                std::lock_guard lock(mu);
                ++outcome.skipped;
                if (log) *log << "skip " << job.cell->name << " seed " << job.seed << " (complete)\n";
                continue;
            }
            try {
                const RunResult res = execute_run(*job.cell, job.seed, out_dir);
                std::lock_guard lock(mu);
                ++outcome.executed;
                if (log)
                    *log << "done " << job.cell->name << " seed " << job.seed << " accuracy " << res.final_eval.accuracy
                         << "\n";
            } catch (const std::exception& e) {
                std::lock_guard lock(mu);
                outcome.failures.push_back(job.cell->name + " seed " + std::to_string(job.seed) + ": " + e.what());
                if (log) *log << "FAIL " << outcome.failures.back() << "\n";
            }
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(plan.threads, jobs.size()));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(worker);
    }
    fs::create_directories(out_dir);
    atomic_write(out_dir / "summary.csv", summary_csv(summarize(plan, out_dir)));
    outcome.exit_code = outcome.failures.empty() ? 0 : 1;
    return outcome;
}

// ---------------------------------------------------------------------------
// Checkpoint tools

struct LoadedRun {
    Cell cell;
    std::uint64_t seed = 0;
    FederatedData data;
    Checkpoint checkpoint;
};

/// Loads a checkpoint and rebuilds the data it was trained on.
inline LoadedRun load_run(const fs::path& checkpoint_path) {
    LoadedRun lr;
    lr.checkpoint = load_checkpoint(checkpoint_path);
    lr.cell = cell_from_provenance(lr.checkpoint.meta);
    lr.seed = lr.checkpoint.meta.at("seed").get<std::uint64_t>();
    lr.data = build_data(lr.cell, lr.seed);
    return lr;
}

/// Landscape CSV (x,y,loss) for a checkpoint on its training split.
inline LandscapeGrid export_landscape(const fs::path& checkpoint_path, std::size_t resolution, double extent,
                                      std::uint64_t seed, const fs::path& out_path) {
    const LoadedRun lr = load_run(checkpoint_path);
    const Mlp model(lr.checkpoint.spec);
    LandscapeGrid g = landscape_slice(model, lr.checkpoint.weights, lr.data.train, resolution, extent,
                                      Rng(seed, "landscape"));
    std::ostringstream os;
    write_landscape_csv(g, os);
    atomic_write(out_path, os.str());
    return g;
}

} // namespace fedsyn
