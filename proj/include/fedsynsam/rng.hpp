// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random streams. Every draw is a pure function of
// (stream key, draw index), where the key is derived from a 64-bit seed and a
// hierarchical label path. Distributions are implemented here rather than via
// <random> so that results do not depend on the standard library vendor.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedsynsam/errors.hpp"

namespace fedsyn {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

} // namespace detail

/// SplitMix64 in counter mode: output n is mix64(key + (n + 1) * golden).
class Rng {
public:
    static constexpr std::string_view algorithm = "splitmix64-ctr";

    explicit Rng(std::uint64_t seed, std::string label = "root")
        : seed_(seed), label_(std::move(label)),
          key_(detail::mix64(seed ^ detail::fnv1a64(label_))) {}

    /// Child stream; independent of how many draws the parent has made.
    Rng derive(std::string_view child) const {
        Rng r = *this;
        r.label_ = label_ + "/" + std::string(child);
        r.key_ = detail::mix64(key_ ^ detail::mix64(detail::fnv1a64(child) + detail::kGolden));
        r.counter_ = 0;
        return r;
    }
    Rng derive(std::uint64_t index) const { return derive(std::to_string(index)); }

    std::uint64_t seed() const noexcept { return seed_; }
    const std::string& label() const noexcept { return label_; }
    std::uint64_t position() const noexcept { return counter_; }

    /// Stateless access to draw `index` of this stream.
    std::uint64_t at(std::uint64_t index) const noexcept {
        return detail::mix64(key_ + (index + 1) * detail::kGolden);
    }

    std::uint64_t next_u64() noexcept { return at(counter_++); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1].
    double uniform_open0() noexcept { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ContractError("Rng::below: empty range");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (consumes two draws, no caching).
    double normal() noexcept {
        const double u1 = uniform_open0();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    /// log of a Gamma(shape, 1) variate. Working in log space keeps tiny
    /// shapes (Dirichlet concentration 1e-2 and below) from underflowing.
    double log_gamma_variate(double shape) {
        if (!(shape > 0.0)) throw ContractError("Rng::log_gamma_variate: shape must be positive");
        if (shape < 1.0) {
            // Gamma(a) = Gamma(a + 1) * U^(1/a)
            const double boosted = log_gamma_variate(shape + 1.0);
            return boosted + std::log(uniform_open0()) / shape;
        }
        // Marsaglia-Tsang
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform_open0();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return std::log(d * v);
        }
    }

    double gamma(double shape) { return std::exp(log_gamma_variate(shape)); }

    /// Symmetric Dirichlet(concentration * 1_n).
    std::vector<double> dirichlet(std::size_t n, double concentration) {
        std::vector<double> logs(n);
        double mx = -std::numeric_limits<double>::infinity();
        for (auto& l : logs) {
            l = log_gamma_variate(concentration);
            mx = std::max(mx, l);
        }
        double total = 0.0;
        for (auto& l : logs) {
            l = std::exp(l - mx);
            total += l;
        }
        for (auto& l : logs) l /= total;
        return logs;
    }

    /// Index drawn from an unnormalized non-negative weight vector.
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0)) throw ContractError("Rng::categorical: weights sum to zero");
        const double u = uniform() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return i;
        }
        // rounding: fall back to the last positive weight
        for (std::size_t i = weights.size(); i-- > 0;)
            if (weights[i] > 0.0) return i;
        return weights.size() - 1;
    }

    /// Fisher-Yates.
    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = below(i);
            std::swap(items[i - 1], items[j]);
        }
    }
    template <class T>
    void shuffle(std::vector<T>& items) { shuffle(std::span<T>(items)); }

    /// Uniform k-subset of [0, n) without replacement, returned sorted.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw ContractError("Rng::sample_without_replacement: k > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + below(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        std::sort(pool.begin(), pool.end());
        return pool;
    }

private:
    std::uint64_t seed_;
    std::string label_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace fedsyn
