// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsynsam/errors.hpp"

namespace fedsyn {

/// Flat parameter vector: the unit of communication, compression and
/// trajectory storage.
class WeightVector {
public:
    WeightVector() = default;
    explicit WeightVector(std::size_t n, double fill = 0.0) : v_(n, fill) {}
    explicit WeightVector(std::vector<double> v) : v_(std::move(v)) {}

    std::size_t size() const noexcept { return v_.size(); }
    bool empty() const noexcept { return v_.empty(); }
    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }
    std::span<double> span() noexcept { return v_; }
    std::span<const double> span() const noexcept { return v_; }
    const std::vector<double>& values() const noexcept { return v_; }
    std::vector<double>& values() noexcept { return v_; }
    auto begin() const { return v_.begin(); }
    auto end() const { return v_.end(); }

    friend bool operator==(const WeightVector&, const WeightVector&) = default;

private:
    std::vector<double> v_;
};

inline void require_same_length(const WeightVector& a, const WeightVector& b, const char* what) {
    if (a.size() != b.size())
        throw ContractError(std::string(what) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
}

inline double dot(const WeightVector& a, const WeightVector& b) {
    require_same_length(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(const WeightVector& a) { return dot(a, a); }
inline double norm(const WeightVector& a) { return std::sqrt(squared_norm(a)); }

inline WeightVector operator+(const WeightVector& a, const WeightVector& b) {
    require_same_length(a, b, "add");
    WeightVector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

inline WeightVector operator-(const WeightVector& a, const WeightVector& b) {
    require_same_length(a, b, "sub");
    WeightVector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline WeightVector operator*(double c, const WeightVector& a) {
    WeightVector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = c * a[i];
    return out;
}

/// y += c * x
inline void axpy(double c, const WeightVector& x, WeightVector& y) {
    require_same_length(x, y, "axpy");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

/// Cosine similarity; empty when either side has zero norm.
inline std::optional<double> cosine(const WeightVector& a, const WeightVector& b) {
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline bool all_finite(const WeightVector& a) {
    for (double x : a)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace fedsyn
