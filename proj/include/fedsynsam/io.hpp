// SPDX-License-Identifier: Apache-2.0
//
// Artifact container used for checkpoints, synthetic sets and trajectories.
//
//   bytes 0..7   magic "FSSBIN\0\1"
//   bytes 8..15  header length H, little-endian u64
//   next H bytes UTF-8 JSON header: {"format_version", "kind", "meta",
//                "arrays": [{"name", "shape", "offset"}]}
//   remainder    float64 little-endian payload; offsets count doubles
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include <json.hpp>

#include "fedsynsam/data.hpp"
#include "fedsynsam/distill.hpp"
#include "fedsynsam/errors.hpp"
#include "fedsynsam/model.hpp"
#include "fedsynsam/tensor.hpp"
#include "fedsynsam/weights.hpp"

namespace fedsyn {

using json = nlohmann::json;

inline constexpr char kContainerMagic[8] = {'F', 'S', 'S', 'B', 'I', 'N', '\0', '\1'};
inline constexpr int kContainerVersion = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Container {
    std::string kind;
    json meta = json::object();
    std::map<std::string, Tensor<double>> arrays;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(in[off + i])} << (8 * i);
    return v;
}

inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

} // namespace detail

inline std::string encode_container(const Container& c) {
    json header;
    header["format_version"] = kContainerVersion;
    header["kind"] = c.kind;
    header["meta"] = c.meta;
    header["arrays"] = json::array();
    std::string payload;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : c.arrays) {
        header["arrays"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        for (double d : t.data()) detail::put_f64(payload, d);
        offset += t.size();
    }
    const std::string h = header.dump();
    std::string out(kContainerMagic, 8);
    detail::put_u64(out, h.size());
    out += h;
    out += payload;
    return out;
}

inline Container decode_container(const std::string& bytes, const std::string& where) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic, 8) != 0)
        throw IoError(where + ": not a fedsynsam container");
    const std::uint64_t hlen = detail::get_u64(bytes, 8);
    if (16 + hlen > bytes.size()) throw IoError(where + ": truncated header");
    json header;
    try {
        header = json::parse(bytes.substr(16, hlen));
    } catch (const json::exception& e) {
        throw IoError(where + ": bad header: " + e.what());
    }
    if (header.value("format_version", 0) != kContainerVersion)
        throw IoError(where + ": unsupported container version");
    Container c;
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.value("meta", json::object());
    const std::size_t base = 16 + hlen;
    for (const auto& a : header.at("arrays")) {
        const auto shape = a.at("shape").get<std::vector<std::size_t>>();
        const auto off = a.at("offset").get<std::uint64_t>();
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        if (base + 8 * (off + n) > bytes.size()) throw IoError(where + ": truncated array " + a.at("name").get<std::string>());
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i)
            data[i] = std::bit_cast<double>(detail::get_u64(bytes, base + 8 * (off + i)));
        c.arrays.emplace(a.at("name").get<std::string>(), Tensor<double>(shape, std::move(data)));
    }
    return c;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
    atomic_write(path, encode_container(c));
}

inline Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
    Container c = decode_container(read_text(path), path.string());
    if (c.kind != expected_kind) throw IoError(path.string() + ": expected a " + expected_kind + ", found " + c.kind);
    return c;
}

inline const Tensor<double>& require_array(const Container& c, const std::string& name, const std::string& where) {
    auto it = c.arrays.find(name);
    if (it == c.arrays.end()) throw IoError(where + ": missing array " + name);
    return it->second;
}

// ---------------------------------------------------------------------------
// Typed artifacts

struct Checkpoint {
    MlpSpec spec;
    WeightVector weights;
    json meta = json::object();
    std::optional<WeightVector> previous_update; ///< last global step, for lesam diagnostics
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    Container c;
    c.kind = "checkpoint";
    c.meta = ck.meta;
    c.meta["layers"] = ck.spec.layers;
    c.arrays.emplace("weights", Tensor<double>::vector(ck.weights.values()));
    if (ck.previous_update) c.arrays.emplace("previous_update", Tensor<double>::vector(ck.previous_update->values()));
    write_container(path, c);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    Container c = read_container(path, "checkpoint");
    Checkpoint ck;
    ck.spec.layers = c.meta.at("layers").get<std::vector<std::size_t>>();
    ck.spec.validate();
    const auto w = require_array(c, "weights", path.string()).data();
    ck.weights = WeightVector(std::vector<double>(w.begin(), w.end()));
    if (ck.weights.size() != ck.spec.param_count()) throw IoError(path.string() + ": weight count does not match layers");
    if (auto it = c.arrays.find("previous_update"); it != c.arrays.end()) {
        const auto u = it->second.data();
        ck.previous_update = WeightVector(std::vector<double>(u.begin(), u.end()));
        require_same_length(*ck.previous_update, ck.weights, "checkpoint previous_update");
    }
    ck.meta = std::move(c.meta);
    return ck;
}

inline void save_synthetic(const std::filesystem::path& path, const SyntheticDataset& syn, json provenance) {
    Container c;
    c.kind = "synthetic";
    c.meta = std::move(provenance);
    c.meta["alpha"] = syn.alpha;
    c.meta["ipc"] = syn.ipc;
    c.meta["classes"] = syn.data.classes;
    c.arrays.emplace("features", syn.data.features);
    write_container(path, c);
}

inline SyntheticDataset load_synthetic(const std::filesystem::path& path) {
    Container c = read_container(path, "synthetic");
    SyntheticDataset syn;
    syn.alpha = c.meta.at("alpha").get<double>();
    syn.ipc = c.meta.at("ipc").get<std::size_t>();
    syn.data.classes = c.meta.at("classes").get<int>();
    syn.data.features = require_array(c, "features", path.string());
    syn.data.labels.resize(syn.data.features.rows());
    for (std::size_t i = 0; i < syn.data.labels.size(); ++i) syn.data.labels[i] = static_cast<int>(i / syn.ipc);
    syn.validate();
    return syn;
}

inline void save_trajectory(const std::filesystem::path& path, const TrajectoryBuffer& traj, json meta) {
    Container c;
    c.kind = "trajectory";
    c.meta = std::move(meta);
    c.meta["rounds"] = traj.rounds();
    const std::size_t d = traj.empty() ? 0 : traj[0].size();
    Tensor<double> m({traj.size(), d});
    for (std::size_t r = 0; r < traj.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) m(r, j) = traj[r][j];
    c.arrays.emplace("snapshots", std::move(m));
    write_container(path, c);
}

inline TrajectoryBuffer load_trajectory(const std::filesystem::path& path, json* meta = nullptr) {
    Container c = read_container(path, "trajectory");
    const auto rounds = c.meta.at("rounds").get<std::vector<std::size_t>>();
    const auto& m = require_array(c, "snapshots", path.string());
    if (m.rank() != 2 || m.rows() != rounds.size()) throw IoError(path.string() + ": snapshot count mismatch");
    TrajectoryBuffer traj;
    for (std::size_t r = 0; r < rounds.size(); ++r) {
        WeightVector w(m.cols());
        for (std::size_t j = 0; j < m.cols(); ++j) w[j] = m(r, j);
        traj.append(rounds[r], std::move(w));
    }
    if (meta) *meta = std::move(c.meta);
    return traj;
}

} // namespace fedsyn
