#include <catch_amalgamated.hpp>

#include <filesystem>
#include <sstream>

#include "test_support.hpp"

using namespace fedsyn;
namespace fs = std::filesystem;

namespace {

const char* kTinyPlan = R"(
seeds = 1, 2, 3
data.classes = 3
data.dims = 4
data.per_class = 20
data.test_per_class = 5
model.hidden = 8
clients = 3
sampled = 2
rounds = 5
sync_rounds = 2
local_steps = 2
batch_size = 8
eval_every = 2
diag_every = 2
compressor = quant
compressor.bits = 4
[cell avg]
algorithm = fedavg
[cell syn]
algorithm = fedsynsam
distill.iterations = 4
distill.ipc = 2
distill.inner_steps = 2
eig = true
)";

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / "fedsyn_test_experiment" / name;
    fs::remove_all(d);
    return d;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cols.push_back(cell);
        rows.push_back(cols);
    }
    return rows;
}

} // namespace

TEST_CASE("a plan with no cells writes an empty summary") {
    const fs::path out = fresh_dir("empty");
    ExperimentPlan plan;
    const PlanOutcome res = run_plan(plan, out, nullptr);
    CHECK(res.exit_code == 0);
    CHECK(res.executed == 0);
    CHECK(read_text(out / "summary.csv") == "cell,seed,metric,value,mean,std\n");
}

TEST_CASE("a plan writes every artifact and reruns skip complete runs") {
    const fs::path out = fresh_dir("full");
    const ExperimentPlan plan = parse_config_text(kTinyPlan, "tiny.cfg");
    const PlanOutcome first = run_plan(plan, out, nullptr);
    CHECK(first.exit_code == 0);
    CHECK(first.executed == 6);
    for (const auto& cell : plan.cells)
        for (auto seed : plan.seeds) {
            const RunPaths p = run_paths(out, cell.name, seed);
            CHECK(fs::exists(p.records));
            CHECK(fs::exists(p.manifest));
            CHECK(fs::exists(p.checkpoint));
            CHECK(fs::exists(p.trajectory));
            CHECK(fs::exists(p.synthetic) == (cell.name == "syn"));
            CHECK(run_is_complete(p, cell, seed));
        }
    const std::string records = read_text(run_paths(out, "syn", 2).records);
    CHECK(records.find("wall") == std::string::npos);
    CHECK(records.find("\"record\":\"eig\"") != std::string::npos);
    CHECK(json::parse(read_text(run_paths(out, "syn", 2).manifest)).contains("wall_seconds"));

    const PlanOutcome second = run_plan(plan, out, nullptr);
    CHECK(second.executed == 0);
    CHECK(second.skipped == 6);
    CHECK(read_text(run_paths(out, "syn", 2).records) == records);

    ExperimentPlan changed = plan;
    changed.cells[0].fed.rounds = 6;
    const PlanOutcome third = run_plan(changed, out, nullptr);
    CHECK(third.executed == 3);
    CHECK(third.skipped == 3);
}

TEST_CASE("summary rows agree with a recomputation from the JSONL files") {
    const fs::path out = fresh_dir("summary");
    const ExperimentPlan plan = parse_config_text(kTinyPlan, "tiny.cfg");
    REQUIRE(run_plan(plan, out, nullptr).exit_code == 0);
    const auto rows = csv_rows(read_text(out / "summary.csv"));
    REQUIRE(rows.size() > 1);
    CHECK(rows[0] == std::vector<std::string>{"cell", "seed", "metric", "value", "mean", "std"});
    std::size_t checked = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& r = rows[i];
        REQUIRE(r.size() == 6);
        if (r[2] != "final_accuracy") continue;
        std::vector<double> accs;
        for (auto seed : plan.seeds) {
            for (const auto& row : read_jsonl(run_paths(out, r[0], seed).records))
                if (row.at("record") == "final") accs.push_back(row.at("test_accuracy").get<double>());
        }
        REQUIRE(accs.size() == 3);
        const double mean = (accs[0] + accs[1] + accs[2]) / 3.0;
        double ss = 0;
        for (double a : accs) ss += (a - mean) * (a - mean);
        CHECK(std::abs(std::stod(r[4]) - mean) <= 1e-12);
        CHECK(std::abs(std::stod(r[5]) - std::sqrt(ss / 2.0)) <= 1e-12);
        CHECK(std::abs(std::stod(r[3]) - accs[std::stoul(r[1]) - 1]) <= 1e-12);
        ++checked;
    }
    CHECK(checked == 6);
}

TEST_CASE("records are identical across output directories") {
    const ExperimentPlan plan = parse_config_text(kTinyPlan, "tiny.cfg");
    const fs::path a = fresh_dir("det-a"), b = fresh_dir("det-b");
    execute_run(plan.cells[1], 3, a);
    execute_run(plan.cells[1], 3, b);
    CHECK(read_text(run_paths(a, "syn", 3).records) == read_text(run_paths(b, "syn", 3).records));
    CHECK(read_text(run_paths(a, "syn", 3).checkpoint) == read_text(run_paths(b, "syn", 3).checkpoint));
}

TEST_CASE("record JSON round-trips") {
    RoundRecord r;
    r.round = 4;
    r.test_accuracy = 0.5;
    r.train_loss = 1.25;
    r.payload_bits = 99;
    r.synthetic_active = true;
    r.cosine = -0.125;
    CHECK(round_from_json(to_json(r)) == r);
    CHECK(to_json(r).at("record") == "round");
    CHECK(to_json(r).at("cosine_lesam").is_null());
}

TEST_CASE("a failing run is reported and the rest of the plan continues") {
    const fs::path out = fresh_dir("fail");
    ExperimentPlan plan = parse_config_text(kTinyPlan, "tiny.cfg");
    plan.seeds = {1};
    Cell broken = plan.cells[0];
    broken.name = "broken";
    broken.data.kind = DatasetKind::Idx;
    broken.data.train_images = broken.data.train_labels = "/nonexistent/file";
    broken.data.test_images = broken.data.test_labels = "/nonexistent/file";
    plan.cells.insert(plan.cells.begin(), broken);
    const PlanOutcome res = run_plan(plan, out, nullptr);
    CHECK(res.exit_code != 0);
    REQUIRE(res.failures.size() == 1);
    CHECK(res.failures[0].find("broken") != std::string::npos);
    CHECK(res.executed == 2);
    CHECK(fs::exists(out / "summary.csv"));
}

TEST_CASE("provenance rebuilds the cell") {
    const ExperimentPlan plan = parse_config_text(kTinyPlan, "tiny.cfg");
    const json prov = provenance(plan.cells[1], 7);
    const Cell back = cell_from_provenance(prov);
    CHECK(back.name == "syn");
    CHECK(config_hash(back) == config_hash(plan.cells[1]));
    CHECK(prov.at("config_hash") == hex64(config_hash(plan.cells[1])));
}

TEST_CASE("landscape export from a checkpoint") {
    const fs::path out = fresh_dir("land");
    const ExperimentPlan plan = parse_config_text(kTinyPlan, "tiny.cfg");
    execute_run(plan.cells[0], 1, out);
    const RunPaths p = run_paths(out, "avg", 1);
    const LandscapeGrid g = export_landscape(p.checkpoint, 3, 0.5, 1, p.dir / "landscape.csv");
    const auto rows = csv_rows(read_text(p.dir / "landscape.csv"));
    CHECK(rows.size() == 10);
    const LoadedRun lr = load_run(p.checkpoint);
    const Mlp m(lr.checkpoint.spec);
    CHECK(g.at(1, 1) == m.loss(lr.checkpoint.weights, lr.data.train));
    CHECK(export_landscape(p.checkpoint, 3, 0.5, 1, p.dir / "again.csv").loss == g.loss);
    CHECK(read_text(p.dir / "again.csv") == read_text(p.dir / "landscape.csv"));
}
