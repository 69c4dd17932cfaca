// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedsynsam/errors.hpp"
#include "fedsynsam/rng.hpp"
#include "fedsynsam/tensor.hpp"

namespace fedsyn {

/// Labelled feature matrix (n x d) with c classes.
struct Dataset {
    Tensor<double> features{Tensor<double>::Shape{0, 0}};
    std::vector<int> labels;
    int classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dims() const noexcept { return features.rank() == 2 ? features.cols() : 0; }
    bool empty() const noexcept { return labels.empty(); }

    void validate() const {
        if (features.rank() != 2) throw ContractError("Dataset: features must be a matrix");
        if (features.rows() != labels.size()) throw ContractError("Dataset: feature rows != label count");
        if (dims() == 0) throw ContractError("Dataset: zero feature dimension");
        if (classes <= 0) throw ContractError("Dataset: class count must be positive");
        for (int y : labels)
            if (y < 0 || y >= classes) throw ContractError("Dataset: label " + std::to_string(y) + " out of range");
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
        for (int y : labels) ++counts[static_cast<std::size_t>(y)];
        return counts;
    }
};

/// Rows of `ds` in the given order.
inline Dataset gather(const Dataset& ds, std::span<const std::size_t> indices) {
    const std::size_t d = ds.dims();
    Dataset out;
    out.classes = ds.classes;
    out.features = Tensor<double>({indices.size(), d});
    out.labels.resize(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::size_t src = indices[r];
        if (src >= ds.size()) throw ContractError("gather: index out of range");
        std::copy_n(ds.features.data().begin() + static_cast<std::ptrdiff_t>(src * d), d,
                    out.features.data().begin() + static_cast<std::ptrdiff_t>(r * d));
        out.labels[r] = ds.labels[src];
    }
    return out;
}

/// Concatenates datasets that share dimension and class count.
inline Dataset concat(std::span<const Dataset> parts) {
    if (parts.empty()) throw ContractError("concat: no datasets");
    const std::size_t d = parts[0].dims();
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.dims() != d || p.classes != parts[0].classes) throw ContractError("concat: incompatible datasets");
        n += p.size();
    }
    Dataset out;
    out.classes = parts[0].classes;
    out.features = Tensor<double>({n, d});
    std::size_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.features.data().begin(), p.features.data().end(),
                  out.features.data().begin() + static_cast<std::ptrdiff_t>(row * d));
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
        row += p.size();
    }
    return out;
}

// ---------------------------------------------------------------------------
// IDX (MNIST-family) files

namespace idx {

inline constexpr std::uint32_t kImagesMagic = 0x00000803;
inline constexpr std::uint32_t kLabelsMagic = 0x00000801;

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& what) {
    if (off + 4 > b.size()) throw IoError(what + ": truncated header");
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

/// Writes an image file (n x rows x cols bytes) and a label file.
inline void write(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t rows,
                  std::size_t cols, std::span<const unsigned char> pixels, std::span<const unsigned char> label_bytes) {
    const std::size_t n = label_bytes.size();
    if (pixels.size() != n * rows * cols) throw ContractError("idx::write: pixel count mismatch");
    std::vector<unsigned char> img;
    put_be32(img, kImagesMagic);
    put_be32(img, static_cast<std::uint32_t>(n));
    put_be32(img, static_cast<std::uint32_t>(rows));
    put_be32(img, static_cast<std::uint32_t>(cols));
    img.insert(img.end(), pixels.begin(), pixels.end());
    std::vector<unsigned char> lab;
    put_be32(lab, kLabelsMagic);
    put_be32(lab, static_cast<std::uint32_t>(n));
    lab.insert(lab.end(), label_bytes.begin(), label_bytes.end());
    std::ofstream(images, std::ios::binary).write(reinterpret_cast<const char*>(img.data()),
                                                  static_cast<std::streamsize>(img.size()));
    std::ofstream(labels, std::ios::binary).write(reinterpret_cast<const char*>(lab.data()),
                                                  static_cast<std::streamsize>(lab.size()));
}

} // namespace idx

/// Loads an IDX image/label pair; pixels are scaled by 1/255.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    const auto img = idx::read_file(images_path);
    const auto lab = idx::read_file(labels_path);
    if (idx::be32(img, 0, "images") != idx::kImagesMagic) throw IoError(images_path.string() + ": bad IDX image magic");
    if (idx::be32(lab, 0, "labels") != idx::kLabelsMagic) throw IoError(labels_path.string() + ": bad IDX label magic");
    const std::size_t n = idx::be32(img, 4, "images");
    const std::size_t rows = idx::be32(img, 8, "images");
    const std::size_t cols = idx::be32(img, 12, "images");
    const std::size_t nl = idx::be32(lab, 4, "labels");
    if (n != nl) throw IoError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
    const std::size_t d = rows * cols;
    if (img.size() < 16 + n * d) throw IoError(images_path.string() + ": truncated image data");
    if (lab.size() < 8 + n) throw IoError(labels_path.string() + ": truncated label data");

    Dataset ds;
    ds.features = Tensor<double>({n, d});
    ds.labels.resize(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n * d; ++i) ds.features[i] = static_cast<double>(img[16 + i]) / 255.0;
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels[i] = lab[8 + i];
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.classes = std::max(10, max_label + 1);
    return ds;
}

/// Gaussian blobs, one unit-variance cluster per class, min-max scaled to
/// [0, 1] per feature over the whole draw. Class means are random directions
/// scaled so that the expected distance between two means is `separation`.
inline Dataset make_blobs(int classes, std::size_t per_class, std::size_t dims, double separation, Rng rng) {
    if (classes <= 0 || per_class == 0 || dims == 0) throw ContractError("make_blobs: sizes must be positive");
    if (separation < 0.0) throw ContractError("make_blobs: separation must be non-negative");
    Rng mean_rng = rng.derive("means");
    Rng sample_rng = rng.derive("samples");
    std::vector<double> means(static_cast<std::size_t>(classes) * dims);
    for (int c = 0; c < classes; ++c) {
        double nrm = 0.0;
        auto* m = &means[static_cast<std::size_t>(c) * dims];
        for (std::size_t j = 0; j < dims; ++j) {
            m[j] = mean_rng.normal();
            nrm += m[j] * m[j];
        }
        nrm = std::sqrt(nrm);
        for (std::size_t j = 0; j < dims; ++j) m[j] *= separation / std::sqrt(2.0) / nrm;
    }
    const std::size_t n = per_class * static_cast<std::size_t>(classes);
    Dataset ds;
    ds.classes = classes;
    ds.features = Tensor<double>({n, dims});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::size_t>(i / per_class);
        ds.labels[i] = static_cast<int>(c);
        for (std::size_t j = 0; j < dims; ++j) ds.features(i, j) = means[c * dims + j] + sample_rng.normal();
    }
    for (std::size_t j = 0; j < dims; ++j) {
        double lo = ds.features(0, j), hi = lo;
        for (std::size_t i = 1; i < n; ++i) {
            lo = std::min(lo, ds.features(i, j));
            hi = std::max(hi, ds.features(i, j));
        }
        const double span = hi > lo ? hi - lo : 1.0;
        for (std::size_t i = 0; i < n; ++i) ds.features(i, j) = (ds.features(i, j) - lo) / span;
    }
    return ds;
}

/// Stratified split: the first `test_per_class` shuffled samples of each class
/// go to the second dataset.
inline std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, std::size_t test_per_class, Rng rng) {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.classes));
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    std::vector<std::size_t> train, test;
    for (auto& idx : by_class) {
        if (idx.size() <= test_per_class) throw ContractError("split_per_class: class too small for test split");
        rng.shuffle(idx);
        test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(test_per_class));
        train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(test_per_class), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {gather(ds, train), gather(ds, test)};
}

// ---------------------------------------------------------------------------
// Client partitions

/// Client index -> sorted sample indices into a parent dataset.
struct Partition {
    std::vector<std::vector<std::size_t>> clients;

    std::size_t num_clients() const noexcept { return clients.size(); }

    /// Disjoint, in range, every client nonempty.
    void validate(std::size_t parent_size) const {
        std::vector<char> seen(parent_size, 0);
        for (std::size_t c = 0; c < clients.size(); ++c) {
            if (clients[c].empty()) throw ContractError("Partition: client " + std::to_string(c) + " is empty");
            for (std::size_t i : clients[c]) {
                if (i >= parent_size) throw ContractError("Partition: index out of range");
                if (seen[i]) throw ContractError("Partition: index " + std::to_string(i) + " assigned twice");
                seen[i] = 1;
            }
        }
    }

    std::size_t covered() const {
        std::size_t n = 0;
        for (const auto& c : clients) n += c.size();
        return n;
    }

    /// counts[client][class]
    std::vector<std::vector<std::size_t>> class_counts(const Dataset& ds) const {
        std::vector<std::vector<std::size_t>> out(clients.size(),
                                                  std::vector<std::size_t>(static_cast<std::size_t>(ds.classes), 0));
        for (std::size_t c = 0; c < clients.size(); ++c)
            for (std::size_t i : clients[c]) ++out[c][static_cast<std::size_t>(ds.labels[i])];
        return out;
    }

    void sort_clients() {
        for (auto& c : clients) std::sort(c.begin(), c.end());
    }
};

/// Shuffle split into near-equal shards (sizes differ by at most one).
inline Partition partition_iid(const Dataset& ds, std::size_t num_clients, Rng rng) {
    const std::size_t n = ds.size();
    if (num_clients == 0 || n < num_clients)
        throw ContractError("partition_iid: need at least one sample per client (n=" + std::to_string(n) +
                            ", clients=" + std::to_string(num_clients) + ")");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    Partition p;
    p.clients.resize(num_clients);
    const std::size_t base = n / num_clients, extra = n % num_clients;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < num_clients; ++c) {
        const std::size_t take = base + (c < extra ? 1 : 0);
        p.clients[c].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                            perm.begin() + static_cast<std::ptrdiff_t>(pos + take));
        pos += take;
    }
    p.sort_clients();
    return p;
}

/// For each class, client proportions ~ Dir(concentration * 1_N); every
/// sample of that class is assigned to a client drawn from those proportions.
/// Clients left empty take one sample from the currently largest client.
inline Partition partition_dirichlet(const Dataset& ds, std::size_t num_clients, double concentration, Rng rng) {
    if (!(concentration > 0.0)) throw ContractError("partition_dirichlet: concentration must be positive");
    if (num_clients == 0 || ds.size() < num_clients) throw ContractError("partition_dirichlet: fewer samples than clients");
    const auto counts = ds.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] == 0) throw ContractError("partition_dirichlet: class " + std::to_string(c) + " has no samples");

    Partition p;
    p.clients.resize(num_clients);
    Rng prop_rng = rng.derive("proportions");
    Rng assign_rng = rng.derive("assign");
    std::vector<std::vector<double>> props(counts.size());
    for (auto& pr : props) pr = prop_rng.dirichlet(num_clients, concentration);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& pr = props[static_cast<std::size_t>(ds.labels[i])];
        p.clients[assign_rng.categorical(pr)].push_back(i);
    }
    for (;;) {
        auto empty = std::find_if(p.clients.begin(), p.clients.end(), [](const auto& c) { return c.empty(); });
        if (empty == p.clients.end()) break;
        auto largest = std::max_element(p.clients.begin(), p.clients.end(),
                                        [](const auto& a, const auto& b) { return a.size() < b.size(); });
        empty->push_back(largest->back());
        largest->pop_back();
    }
    p.sort_clients();
    return p;
}

/// Label-sorted sharding: samples sorted by label (random order within a
/// label) are cut into clients * shards_per_client contiguous shards, and each
/// client receives `shards_per_client` random shards. When the shard count
/// does not divide n the last n mod shards shards get one extra sample.
inline Partition partition_pathological(const Dataset& ds, std::size_t num_clients, std::size_t shards_per_client,
                                        Rng rng) {
    const std::size_t shards = num_clients * shards_per_client;
    if (shards == 0 || shards > ds.size())
        throw ContractError("partition_pathological: cannot cut " + std::to_string(ds.size()) + " samples into " +
                            std::to_string(shards) + " shards");
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.classes));
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    Rng within = rng.derive("within-class");
    std::vector<std::size_t> order;
    order.reserve(ds.size());
    for (auto& idx : by_class) {
        within.shuffle(idx);
        order.insert(order.end(), idx.begin(), idx.end());
    }
    const std::size_t base = ds.size() / shards, extra = ds.size() % shards;
    std::vector<std::pair<std::size_t, std::size_t>> bounds(shards);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < shards; ++s) {
        const std::size_t len = base + (s >= shards - extra ? 1 : 0);
        bounds[s] = {pos, pos + len};
        pos += len;
    }
    std::vector<std::size_t> shard_ids(shards);
    std::iota(shard_ids.begin(), shard_ids.end(), std::size_t{0});
    Rng assign = rng.derive("assign");
    assign.shuffle(shard_ids);
    Partition p;
    p.clients.resize(num_clients);
    for (std::size_t c = 0; c < num_clients; ++c)
        for (std::size_t k = 0; k < shards_per_client; ++k) {
            const auto [lo, hi] = bounds[shard_ids[c * shards_per_client + k]];
            p.clients[c].insert(p.clients[c].end(), order.begin() + static_cast<std::ptrdiff_t>(lo),
                                order.begin() + static_cast<std::ptrdiff_t>(hi));
        }
    p.sort_clients();
    return p;
}

/// Read-only view of one client's share of a parent dataset.
class ClientData {
public:
    ClientData(const Dataset& parent, std::vector<std::size_t> indices)
        : parent_(&parent), indices_(std::move(indices)) {
        std::sort(indices_.begin(), indices_.end());
        if (indices_.empty()) throw ContractError("ClientData: client has no samples");
    }

    std::size_t size() const noexcept { return indices_.size(); }
    const std::vector<std::size_t>& indices() const noexcept { return indices_; }

    /// Entire local dataset, in parent order.
    Dataset full() const { return gather(*parent_, indices_); }

    /// Uniform sample with replacement; 0 means the full local dataset.
    /// Rows are gathered in ascending parent-index order so the batch mean
    /// does not depend on draw order.
    Dataset sample(std::size_t batch_size, Rng& rng) const {
        if (batch_size == 0) return full();
        std::vector<std::size_t> picks(batch_size);
        for (auto& p : picks) p = indices_[rng.below(indices_.size())];
        std::sort(picks.begin(), picks.end());
        return gather(*parent_, picks);
    }

private:
    const Dataset* parent_;
    std::vector<std::size_t> indices_;
};

/// Uniform with-replacement batch from a whole dataset (0 = all rows).
inline Dataset sample_batch(const Dataset& ds, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> picks;
    if (batch_size == 0) {
        picks.resize(ds.size());
        std::iota(picks.begin(), picks.end(), std::size_t{0});
    } else {
        picks.resize(batch_size);
        for (auto& p : picks) p = rng.below(ds.size());
        std::sort(picks.begin(), picks.end());
    }
    return gather(ds, picks);
}

} // namespace fedsyn
