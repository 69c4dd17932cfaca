// SPDX-License-Identifier: Apache-2.0
//
// Model-update compressors.
//
// Payload accounting is nominal (no entropy coding) and uses 32 bits per
// dense float on the wire:
//   none       : 32 d
//   quantize(b): 32 (norm) + d * (1 sign bit + ceil(log2(2^b + 1)) level bits)
//   top-k      : d (index bitmap) + 32 * kept
// and a sender never pays more than the dense encoding.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fedsynsam/errors.hpp"
#include "fedsynsam/rng.hpp"
#include "fedsynsam/weights.hpp"

namespace fedsyn {

enum class CompressorKind { None, Quantize, TopK };

struct CompressorSpec {
    CompressorKind kind = CompressorKind::None;
    int bits = 0;          ///< quantization bits b, levels a = 2^b + 1
    double fraction = 0.0; ///< top-k kept fraction k

    static CompressorSpec none() { return {}; }
    static CompressorSpec quantize(int b) { return {CompressorKind::Quantize, b, 0.0}; }
    static CompressorSpec topk(double k) { return {CompressorKind::TopK, 0, k}; }

    void validate() const {
        switch (kind) {
        case CompressorKind::None:
            if (bits != 0 || fraction != 0.0) throw ContractError("CompressorSpec: none takes no parameters");
            return;
        case CompressorKind::Quantize:
            if (bits < 1 || bits > 16) throw ContractError("CompressorSpec: bits must be in [1, 16]");
            if (fraction != 0.0) throw ContractError("CompressorSpec: quantizer has no fraction");
            return;
        case CompressorKind::TopK:
            if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("CompressorSpec: k must be in (0, 1]");
            if (bits != 0) throw ContractError("CompressorSpec: top-k has no bit width");
            return;
        }
    }

    std::string label() const {
        switch (kind) {
        case CompressorKind::None:
            return "none";
        case CompressorKind::Quantize:
            return "q" + std::to_string(bits);
        case CompressorKind::TopK: {
            char buf[32];
            std::snprintf(buf, sizeof buf, "topk%g", fraction);
            return buf;
        }
        }
        return "?";
    }

    friend bool operator==(const CompressorSpec&, const CompressorSpec&) = default;
};

struct CompressionReport {
    double input_norm = 0.0;
    double error_norm = 0.0; ///< ||Q(v) - v||
    std::uint64_t payload_bits = 0;
    std::uint64_t dense_bits = 0;
};

inline constexpr std::uint64_t kFloatBits = 32;

namespace detail {

inline CompressionReport report(const WeightVector& in, const WeightVector& out, std::uint64_t payload) {
    CompressionReport r;
    r.input_norm = norm(in);
    r.error_norm = norm(out - in);
    r.dense_bits = kFloatBits * in.size();
    r.payload_bits = std::min(payload, r.dense_bits);
    return r;
}

inline std::uint64_t ceil_log2(std::uint64_t x) {
    std::uint64_t b = 0;
    while ((std::uint64_t{1} << b) < x) ++b;
    return b;
}

} // namespace detail

inline std::uint64_t quantization_levels(int bits) { return (std::uint64_t{1} << bits) + 1; }

/// Unbiased stochastic quantization onto a = 2^b + 1 magnitude levels of ||v||.
/// Coordinate i becomes ||v|| sign(v_i) xi_i, xi_i in {l/a, (l+1)/a}, where
/// l = floor(|v_i| a / ||v||) and P[(l+1)/a] = |v_i| a / ||v|| - l.
inline std::pair<WeightVector, CompressionReport> quantize_stochastic(const WeightVector& v, int bits, Rng& rng) {
    if (bits < 1 || bits > 16) throw ContractError("quantize_stochastic: bits must be in [1, 16]");
    const std::uint64_t levels = quantization_levels(bits);
    const double a = static_cast<double>(levels);
    const double nv = norm(v);
    WeightVector out(v.size(), 0.0);
    const std::uint64_t payload = kFloatBits + v.size() * (1 + detail::ceil_log2(levels));
    if (nv == 0.0) return {out, detail::report(v, out, payload)};
    const double to_levels = a / nv, to_values = nv / a;
    double err = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double r = std::abs(v[i]) * to_levels;
        double l = static_cast<double>(static_cast<std::uint64_t>(r)); // floor, r >= 0
        if (l >= a) l = a - 1.0;
        const double p = r - l;
        const double u = rng.uniform();
        const double level = l + static_cast<double>(u < p);
        const double mag = level * to_values;
        out[i] = v[i] < 0.0 ? -mag : mag;
        const double e = out[i] - v[i];
        err += e * e;
    }
    CompressionReport rep;
    rep.input_norm = nv;
    rep.error_norm = std::sqrt(err);
    rep.dense_bits = kFloatBits * v.size();
    rep.payload_bits = std::min(payload, rep.dense_bits);
    return {std::move(out), rep};
}

/// Number of entries kept by top-k on a d-vector: ceil(k d), at least one.
inline std::size_t topk_count(std::size_t d, double k) {
    if (d == 0) return 0;
    const double target = k * static_cast<double>(d);
    // absorb representation error in products like 0.7 * 10
    auto kept = static_cast<std::size_t>(std::ceil(target - 1e-9 * std::max(1.0, target)));
    return std::clamp<std::size_t>(kept, 1, d);
}

/// Keeps the ceil(k d) largest-magnitude entries (ties: lowest index).
inline std::pair<WeightVector, CompressionReport> topk_sparsify(const WeightVector& v, double k) {
    if (!(k > 0.0 && k <= 1.0)) throw ContractError("topk_sparsify: k must be in (0, 1]");
    const std::size_t d = v.size();
    const std::size_t kept = topk_count(d, k);
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(v[a]), mb = std::abs(v[b]);
        return ma != mb ? ma > mb : a < b;
    };
    if (kept < d) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kept), order.end(), before);
    WeightVector out(d, 0.0);
    for (std::size_t i = 0; i < kept; ++i) out[order[i]] = v[order[i]];
    return {out, detail::report(v, out, d + kFloatBits * kept)};
}

/// Dispatches on the spec; `none` is the identity with zero error.
inline std::pair<WeightVector, CompressionReport> apply(const CompressorSpec& spec, const WeightVector& v, Rng& rng) {
    spec.validate();
    switch (spec.kind) {
    case CompressorKind::None:
        return {v, detail::report(v, v, kFloatBits * v.size())};
    case CompressorKind::Quantize:
        return quantize_stochastic(v, spec.bits, rng);
    case CompressorKind::TopK:
        return topk_sparsify(v, spec.fraction);
    }
    throw ContractError("apply: unknown compressor");
}

/// Exact per-coordinate variance of the quantizer: ||v||^2 p (1 - p) / a^2.
inline std::vector<double> quantizer_variance(const WeightVector& v, int bits) {
    const double a = static_cast<double>(quantization_levels(bits));
    const double nv = norm(v);
    std::vector<double> var(v.size(), 0.0);
    if (nv == 0.0) return var;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double r = std::abs(v[i]) * a / nv;
        double l = static_cast<double>(static_cast<std::uint64_t>(r)); // floor, r >= 0
        if (l >= a) l = a - 1.0;
        const double p = r - l;
        var[i] = nv * nv * p * (1.0 - p) / (a * a);
    }
    return var;
}

} // namespace fedsyn
