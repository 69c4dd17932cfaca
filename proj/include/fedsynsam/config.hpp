// SPDX-License-Identifier: Apache-2.0
//
// Plain-text experiment configs.
//
//   # comment
//   seeds = 1, 2, 3
//   output_dir = runs/demo
//   algorithm = fedavg          <- base values shared by all cells
//   rounds = 150
//   [cell fedsam-q4]            <- one cell; keys here override the base
//   algorithm = fedsam
//   compressor = quant
//   compressor.bits = 4
//
// A file without [cell] sections describes a single cell named "main".
// The full key list with defaults is printed by `fedsynsam keys`.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "fedsynsam/errors.hpp"
#include "fedsynsam/fed.hpp"
#include "fedsynsam/io.hpp"
#include "fedsynsam/rng.hpp"

namespace fedsyn {

enum class DatasetKind { Blobs, Idx };
enum class PartitionKind { Iid, Dirichlet, Pathological };

struct DataSpec {
    DatasetKind kind = DatasetKind::Blobs;
    int classes = 4;
    std::size_t per_class = 250;
    std::size_t dims = 16;
    double separation = 3.0;
    std::size_t test_per_class = 50;
    std::string train_images, train_labels, test_images, test_labels;
    std::size_t train_subset = 0; ///< 0 = whole file; otherwise a seeded random subset
    std::size_t test_subset = 0;
    PartitionKind partition = PartitionKind::Dirichlet;
    double alpha = 0.1;
    std::size_t shards = 1;
};

struct Cell {
    std::string name = "main";
    DataSpec data;
    std::vector<std::size_t> hidden{200};
    FedConfig fed;
};

struct ExperimentPlan {
    std::vector<Cell> cells;
    std::vector<std::uint64_t> seeds{1};
    std::string output_dir = "runs";
    std::size_t threads = 1;        ///< cells run in parallel
    std::size_t client_threads = 1; ///< clients within a round run in parallel

    void validate() const {
        if (seeds.empty()) throw ConfigError("plan: at least one seed is required");
        std::set<std::string> names;
        for (const auto& c : cells)
            if (!names.insert(c.name).second) throw ConfigError("plan: duplicate cell name '" + c.name + "'");
        if (threads == 0 || client_threads == 0) throw ConfigError("plan: thread counts must be >= 1");
    }
};

namespace config_detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return ec == std::errc{} ? std::string(buf, p) : std::to_string(v);
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("expected a number, got '" + s + "'");
    return v;
}

inline std::uint64_t parse_uint(const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw ConfigError("expected a non-negative integer, got '" + s + "'");
    return v;
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("expected true or false, got '" + s + "'");
}

template <class E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table) {
    std::string names;
    for (const auto& [n, e] : table) {
        if (s == n) return e;
        names += names.empty() ? n : std::string(", ") + n;
    }
    throw ConfigError("expected one of {" + names + "}, got '" + s + "'");
}

template <class E>
std::string enum_name(E v, std::initializer_list<std::pair<const char*, E>> table) {
    for (const auto& [n, e] : table)
        if (e == v) return n;
    return "?";
}

inline const std::initializer_list<std::pair<const char*, DatasetKind>> kDatasets{{"blobs", DatasetKind::Blobs},
                                                                                  {"idx", DatasetKind::Idx}};
inline const std::initializer_list<std::pair<const char*, PartitionKind>> kPartitions{
    {"iid", PartitionKind::Iid}, {"dirichlet", PartitionKind::Dirichlet}, {"pathological", PartitionKind::Pathological}};
inline const std::initializer_list<std::pair<const char*, CompressorKind>> kCompressors{
    {"none", CompressorKind::None}, {"quant", CompressorKind::Quantize}, {"topk", CompressorKind::TopK}};
inline const std::initializer_list<std::pair<const char*, OuterOptimizer>> kOptimizers{{"sgd", OuterOptimizer::Sgd},
                                                                                       {"adam", OuterOptimizer::Adam}};

/// Compressor fields are kept apart from CompressorSpec while parsing so
/// that keys can arrive in any order.
struct CellDraft {
    Cell cell;
    CompressorKind compressor = CompressorKind::None;
    int bits = 4;
    double k = 0.1;
};

struct Key {
    std::string name;
    std::function<void(CellDraft&, const std::string&)> set;
    std::function<std::string(const CellDraft&)> get;
    std::function<bool(const CellDraft&)> applies; ///< false: irrelevant for this cell, left out of the hash
};

inline bool is_blobs(const CellDraft& d) { return d.cell.data.kind == DatasetKind::Blobs; }
inline bool is_idx(const CellDraft& d) { return d.cell.data.kind == DatasetKind::Idx; }
inline bool always(const CellDraft&) { return true; }
inline bool sam_algo(const CellDraft& d) { return uses_sam(d.cell.fed.algorithm); }
inline bool condensing(const CellDraft& d) { return condenses(d.cell.fed.algorithm); }

#define FEDSYN_SIZE_KEY(key, field, pred)                                                                            \
    Key { key, [](CellDraft& d, const std::string& v) { d.field = parse_uint(v); },                            \
          [](const CellDraft& d) { return std::to_string(d.field); }, pred }
#define FEDSYN_DOUBLE_KEY(key, field, pred)                                                                          \
    Key { key, [](CellDraft& d, const std::string& v) { d.field = parse_double(v); },                          \
          [](const CellDraft& d) { return fmt_double(d.field); }, pred }
#define FEDSYN_BOOL_KEY(key, field, pred)                                                                            \
    Key { key, [](CellDraft& d, const std::string& v) { d.field = parse_bool(v); },                            \
          [](const CellDraft& d) { return std::string(d.field ? "true" : "false"); }, pred }
#define FEDSYN_STRING_KEY(key, field, pred)                                                                          \
    Key { key, [](CellDraft& d, const std::string& v) { d.field = v; }, [](const CellDraft& d) { return d.field; }, \
          pred }

inline const std::vector<Key>& cell_keys() {
    static const std::vector<Key> keys = [] {
        std::vector<Key> k;
        k.push_back({"algorithm", [](CellDraft& d, const std::string& v) {
                         try {
                             d.cell.fed.algorithm = parse_algorithm(v);
                         } catch (const ContractError& e) {
                             throw ConfigError(e.what());
                         }
                     },
                     [](const CellDraft& d) { return to_string(d.cell.fed.algorithm); }, always});
        k.push_back({"dataset", [](CellDraft& d, const std::string& v) { d.cell.data.kind = parse_enum(v, kDatasets); },
                     [](const CellDraft& d) { return enum_name(d.cell.data.kind, kDatasets); }, always});
        k.push_back({"data.classes",
                     [](CellDraft& d, const std::string& v) { d.cell.data.classes = static_cast<int>(parse_uint(v)); },
                     [](const CellDraft& d) { return std::to_string(d.cell.data.classes); }, is_blobs});
        k.push_back(FEDSYN_SIZE_KEY("data.per_class", cell.data.per_class, is_blobs));
        k.push_back(FEDSYN_SIZE_KEY("data.dims", cell.data.dims, is_blobs));
        k.push_back(FEDSYN_DOUBLE_KEY("data.separation", cell.data.separation, is_blobs));
        k.push_back(FEDSYN_SIZE_KEY("data.test_per_class", cell.data.test_per_class, is_blobs));
        k.push_back(FEDSYN_STRING_KEY("data.train_images", cell.data.train_images, is_idx));
        k.push_back(FEDSYN_STRING_KEY("data.train_labels", cell.data.train_labels, is_idx));
        k.push_back(FEDSYN_STRING_KEY("data.test_images", cell.data.test_images, is_idx));
        k.push_back(FEDSYN_STRING_KEY("data.test_labels", cell.data.test_labels, is_idx));
        k.push_back(FEDSYN_SIZE_KEY("data.train_subset", cell.data.train_subset, is_idx));
        k.push_back(FEDSYN_SIZE_KEY("data.test_subset", cell.data.test_subset, is_idx));
        k.push_back({"partition",
                     [](CellDraft& d, const std::string& v) { d.cell.data.partition = parse_enum(v, kPartitions); },
                     [](const CellDraft& d) { return enum_name(d.cell.data.partition, kPartitions); }, always});
        k.push_back(FEDSYN_DOUBLE_KEY("partition.alpha", cell.data.alpha,
                                      [](const CellDraft& d) { return d.cell.data.partition == PartitionKind::Dirichlet; }));
        k.push_back(FEDSYN_SIZE_KEY("partition.shards", cell.data.shards, [](const CellDraft& d) {
            return d.cell.data.partition == PartitionKind::Pathological;
        }));
        k.push_back({"model.hidden",
                     [](CellDraft& d, const std::string& v) {
                         d.cell.hidden.clear();
                         if (v == "none") return;
                         for (const auto& item : split_list(v)) d.cell.hidden.push_back(parse_uint(item));
                     },
                     [](const CellDraft& d) {
                         if (d.cell.hidden.empty()) return std::string("none");
                         std::string s;
                         for (auto h : d.cell.hidden) s += (s.empty() ? "" : ",") + std::to_string(h);
                         return s;
                     },
                     always});
        k.push_back(FEDSYN_SIZE_KEY("clients", cell.fed.clients, always));
        k.push_back(FEDSYN_SIZE_KEY("sampled", cell.fed.sampled, always));
        k.push_back(FEDSYN_SIZE_KEY("rounds", cell.fed.rounds, always));
        k.push_back(FEDSYN_SIZE_KEY("local_steps", cell.fed.local_steps, always));
        k.push_back(FEDSYN_SIZE_KEY("batch_size", cell.fed.batch_size, always));
        k.push_back(FEDSYN_DOUBLE_KEY("lr_local", cell.fed.lr_local, always));
        k.push_back(FEDSYN_DOUBLE_KEY("lr_global", cell.fed.lr_global, always));
        k.push_back(FEDSYN_DOUBLE_KEY("rho", cell.fed.rho, sam_algo));
        k.push_back(FEDSYN_DOUBLE_KEY("beta", cell.fed.beta,
                                      [](const CellDraft& d) { return d.cell.fed.algorithm == Algorithm::FedSynSam; }));
        k.push_back(FEDSYN_SIZE_KEY("sync_rounds", cell.fed.sync_rounds, always));
        k.push_back({"compressor", [](CellDraft& d, const std::string& v) { d.compressor = parse_enum(v, kCompressors); },
                     [](const CellDraft& d) { return enum_name(d.compressor, kCompressors); }, always});
        k.push_back({"compressor.bits",
                     [](CellDraft& d, const std::string& v) { d.bits = static_cast<int>(parse_uint(v)); },
                     [](const CellDraft& d) { return std::to_string(d.bits); },
                     [](const CellDraft& d) { return d.compressor == CompressorKind::Quantize; }});
        k.push_back(FEDSYN_DOUBLE_KEY("compressor.k", k,
                                      [](const CellDraft& d) { return d.compressor == CompressorKind::TopK; }));
        k.push_back(FEDSYN_SIZE_KEY("distill.iterations", cell.fed.distill.iterations, condensing));
        k.push_back(FEDSYN_SIZE_KEY("distill.inner_steps", cell.fed.distill.inner_steps, condensing));
        k.push_back(FEDSYN_DOUBLE_KEY("distill.lr_x", cell.fed.distill.lr_x, condensing));
        k.push_back(FEDSYN_DOUBLE_KEY("distill.lr_alpha", cell.fed.distill.lr_alpha, condensing));
        k.push_back(FEDSYN_SIZE_KEY("distill.ipc", cell.fed.distill.ipc, condensing));
        k.push_back({"distill.optimizer",
                     [](CellDraft& d, const std::string& v) { d.cell.fed.distill.optimizer = parse_enum(v, kOptimizers); },
                     [](const CellDraft& d) { return enum_name(d.cell.fed.distill.optimizer, kOptimizers); },
                     condensing});
        k.push_back({"distill.alpha_init",
                     [](CellDraft& d, const std::string& v) {
                         if (v == "auto")
                             d.cell.fed.distill.alpha_init.reset();
                         else
                             d.cell.fed.distill.alpha_init = parse_double(v);
                     },
                     [](const CellDraft& d) {
                         return d.cell.fed.distill.alpha_init ? fmt_double(*d.cell.fed.distill.alpha_init)
                                                              : std::string("auto");
                     },
                     condensing});
        k.push_back(FEDSYN_DOUBLE_KEY("distill.init_mean", cell.fed.distill.init_mean, condensing));
        k.push_back(FEDSYN_DOUBLE_KEY("distill.init_std", cell.fed.distill.init_std, condensing));
        k.push_back(FEDSYN_SIZE_KEY("syn_batch_size", cell.fed.syn_batch_size,
                                    [](const CellDraft& d) { return d.cell.fed.algorithm == Algorithm::FedSynSam; }));
        k.push_back(FEDSYN_SIZE_KEY("dynafed.server_steps", cell.fed.dynafed_steps,
                                    [](const CellDraft& d) { return d.cell.fed.algorithm == Algorithm::DynaFed; }));
        k.push_back(FEDSYN_SIZE_KEY("eval_every", cell.fed.eval_every, always));
        k.push_back(FEDSYN_SIZE_KEY("diag_every", cell.fed.diag_every, always));
        k.push_back(FEDSYN_BOOL_KEY("diag.smoothness", cell.fed.diag_smoothness,
                                    [](const CellDraft& d) { return d.cell.fed.diag_every > 0; }));
        k.push_back(FEDSYN_BOOL_KEY("eig", cell.fed.final_eig, always));
        k.push_back(FEDSYN_DOUBLE_KEY("eig.tol", cell.fed.eig_tol, [](const CellDraft& d) {
            return d.cell.fed.final_eig || d.cell.fed.diag_smoothness;
        }));
        k.push_back(FEDSYN_SIZE_KEY("eig.max_iters", cell.fed.eig_max_iters, [](const CellDraft& d) {
            return d.cell.fed.final_eig || d.cell.fed.diag_smoothness;
        }));
        return k;
    }();
    return keys;
}

#undef FEDSYN_SIZE_KEY
#undef FEDSYN_DOUBLE_KEY
#undef FEDSYN_BOOL_KEY
#undef FEDSYN_STRING_KEY

inline const Key* find_key(const std::string& name) {
    for (const auto& k : cell_keys())
        if (k.name == name) return &k;
    return nullptr;
}

inline CellDraft draft_of(const Cell& c) {
    CellDraft d;
    d.cell = c;
    d.compressor = c.fed.compressor.kind;
    if (c.fed.compressor.kind == CompressorKind::Quantize) d.bits = c.fed.compressor.bits;
    if (c.fed.compressor.kind == CompressorKind::TopK) d.k = c.fed.compressor.fraction;
    return d;
}

inline Cell finish(CellDraft d, const std::string& where) {
    switch (d.compressor) {
    case CompressorKind::None:
        d.cell.fed.compressor = CompressorSpec::none();
        break;
    case CompressorKind::Quantize:
        d.cell.fed.compressor = CompressorSpec::quantize(d.bits);
        break;
    case CompressorKind::TopK:
        d.cell.fed.compressor = CompressorSpec::topk(d.k);
        break;
    }
    try {
        d.cell.fed.validate();
    } catch (const ContractError& e) {
        throw ConfigError(where + ": " + e.what());
    }
    const auto& ds = d.cell.data;
    if (ds.kind == DatasetKind::Blobs && (ds.classes < 2 || ds.per_class == 0 || ds.dims == 0))
        throw ConfigError(where + ": blobs need classes >= 2 and positive per_class, dims");
    if (ds.kind == DatasetKind::Idx &&
        (ds.train_images.empty() || ds.train_labels.empty() || ds.test_images.empty() || ds.test_labels.empty()))
        throw ConfigError(where + ": dataset = idx needs data.train_images, data.train_labels, data.test_images, "
                                  "data.test_labels");
    if (ds.partition == PartitionKind::Dirichlet && !(ds.alpha > 0.0))
        throw ConfigError(where + ".partition.alpha: must be positive");
    if (ds.partition == PartitionKind::Pathological && ds.shards == 0)
        throw ConfigError(where + ".partition.shards: must be >= 1");
    for (auto h : d.cell.hidden)
        if (h == 0) throw ConfigError(where + ".model.hidden: layer sizes must be positive");
    return d.cell;
}

} // namespace config_detail

/// Parses a config text; `source` names the file in error messages.
inline ExperimentPlan parse_config_text(const std::string& text, const std::string& source = "<config>") {
    using namespace config_detail;
    ExperimentPlan plan;
    struct Section {
        std::string name;
        std::vector<std::pair<std::string, std::pair<std::string, int>>> entries;
    };
    std::vector<std::pair<std::string, std::pair<std::string, int>>> base;
    std::vector<Section> sections;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string at = source + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(at + ": unterminated section header");
            const std::string inner = trim(line.substr(1, line.size() - 2));
            if (inner.rfind("cell", 0) != 0 || inner.size() < 6 || (inner[4] != ' ' && inner[4] != '\t'))
                throw ConfigError(at + ": sections must be written [cell NAME]");
            sections.push_back({trim(inner.substr(5)), {}});
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(at + ": expected key = value");
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        auto& target = sections.empty() ? base : sections.back().entries;
        for (const auto& [k, v] : target)
            if (k == key) throw ConfigError(at + ": key '" + key + "' repeated (first on line " + std::to_string(v.second) + ")");
        target.push_back({key, {value, lineno}});
    }

    CellDraft base_draft;
    for (const auto& [key, vl] : base) {
        const std::string at = source + ":" + std::to_string(vl.second) + ": " + key;
        try {
            if (key == "seeds") {
                plan.seeds.clear();
                for (const auto& s : split_list(vl.first)) plan.seeds.push_back(parse_uint(s));
            } else if (key == "output_dir") {
                plan.output_dir = vl.first;
            } else if (key == "threads") {
                plan.threads = parse_uint(vl.first);
            } else if (key == "client_threads") {
                plan.client_threads = parse_uint(vl.first);
            } else if (const Key* k = find_key(key)) {
                k->set(base_draft, vl.first);
            } else {
                throw ConfigError("unknown key");
            }
        } catch (const ConfigError& e) {
            throw ConfigError(at + ": " + e.what());
        }
    }

    if (sections.empty()) {
        base_draft.cell.name = "main";
        plan.cells.push_back(finish(base_draft, source + ": [cell main]"));
    }
    for (const auto& sec : sections) {
        if (sec.name.empty()) throw ConfigError(source + ": cell with an empty name");
        CellDraft d = base_draft;
        d.cell.name = sec.name;
        for (const auto& [key, vl] : sec.entries) {
            const std::string at = source + ":" + std::to_string(vl.second) + ": [cell " + sec.name + "] " + key;
            const Key* k = find_key(key);
            if (!k) throw ConfigError(at + ": unknown key");
            try {
                k->set(d, vl.first);
            } catch (const ConfigError& e) {
                throw ConfigError(at + ": " + e.what());
            }
        }
        plan.cells.push_back(finish(d, source + ": [cell " + sec.name + "]"));
    }
    plan.validate();
    for (auto& c : plan.cells) c.fed.threads = plan.client_threads;
    return plan;
}

inline ExperimentPlan parse_config(const std::filesystem::path& path) {
    return parse_config_text(read_text(path), path.string());
}

/// Sorted key = value lines of the keys that matter for this cell.
inline std::string canonical_cell(const Cell& c) {
    using namespace config_detail;
    const CellDraft d = draft_of(c);
    std::map<std::string, std::string> kv;
    for (const auto& k : cell_keys())
        if (k.applies(d)) kv[k.name] = k.get(d);
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

/// Canonical text form: plan keys, then each cell in order with every key
/// that applies to it.
inline std::string serialize(const ExperimentPlan& plan) {
    std::string out = "seeds = ";
    for (std::size_t i = 0; i < plan.seeds.size(); ++i) out += (i ? ", " : "") + std::to_string(plan.seeds[i]);
    out += "\noutput_dir = " + plan.output_dir + "\nthreads = " + std::to_string(plan.threads) +
           "\nclient_threads = " + std::to_string(plan.client_threads) + "\n";
    for (const auto& c : plan.cells) out += "\n[cell " + c.name + "]\n" + canonical_cell(c);
    return out;
}

/// Stable across platforms: FNV-1a-64 of the canonical cell text.
inline std::uint64_t config_hash(const Cell& c) { return detail::fnv1a64(canonical_cell(c)); }

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Key reference: name, default, and whether it is a plan-level key.
inline std::string describe_keys() {
    using namespace config_detail;
    const CellDraft d;
    std::string out = "plan keys: seeds (1), output_dir (runs), threads (1), client_threads (1)\ncell keys:\n";
    for (const auto& k : cell_keys()) out += "  " + k.name + " = " + k.get(d) + "\n";
    return out;
}

} // namespace fedsyn
