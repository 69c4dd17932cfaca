// SPDX-License-Identifier: Apache-2.0
//
// Sharpness diagnostics: top Hessian eigenvalue by power iteration on HVPs,
// random-direction loss slices, and paired lambda_max comparisons.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fedsynsam/data.hpp"
#include "fedsynsam/errors.hpp"
#include "fedsynsam/model.hpp"
#include "fedsynsam/rng.hpp"
#include "fedsynsam/weights.hpp"

namespace fedsyn {

struct EigEstimate {
    double lambda = 0.0;         ///< algebraically largest eigenvalue
    std::size_t iterations = 0;  ///< operator applications, both stages
    double residual = 0.0;       ///< ||Hv - lambda v|| for unit v
    bool converged = false;
    double shift = 0.0;          ///< c in H + cI used by the reported stage
    std::vector<double> rayleigh; ///< shifted Rayleigh quotients of the reported stage
};

namespace detail {

inline double normalize(WeightVector& v) {
    const double n = norm(v);
    if (n > 0.0)
        for (std::size_t i = 0; i < v.size(); ++i) v[i] /= n;
    return n;
}

inline WeightVector random_unit(std::size_t dim, Rng& rng) {
    WeightVector v(dim);
    for (std::size_t i = 0; i < dim; ++i) v[i] = rng.normal();
    if (normalize(v) == 0.0) v[0] = 1.0;
    return v;
}

} // namespace detail

/// Largest eigenvalue of a symmetric operator given only v -> Hv.
///
/// Stage one runs plain power iteration to bound the spectral radius r.
/// Stage two iterates on H + cI with c = 1.1 r, so the shifted operator is
/// positive semidefinite, its Rayleigh quotient rises monotonically, and its
/// dominant eigenvalue is lambda_max + c even when H has large negative
/// eigenvalues. Converged when the residual falls below tol (relative to
/// max(1, |lambda|)) or the estimate stops moving by more than tol^2.
template <class ApplyFn>
EigEstimate power_iteration(ApplyFn&& apply, std::size_t dim, double tol, std::size_t max_iters, Rng rng) {
    if (dim == 0) throw ContractError("power_iteration: empty operator");
    if (!(tol > 0.0)) throw ContractError("power_iteration: tol must be positive");
    if (max_iters == 0) throw ContractError("power_iteration: max_iters must be positive");

    EigEstimate est;
    Rng start = rng.derive("start");
    WeightVector v = detail::random_unit(dim, start);

    double radius = 0.0;
    const std::size_t bound_iters = std::max<std::size_t>(1, std::min<std::size_t>(max_iters / 4, 200));
    WeightVector u = v;
    for (std::size_t k = 0; k < bound_iters; ++k) {
        WeightVector hu = apply(u);
        ++est.iterations;
        const double n = norm(hu);
        if (!std::isfinite(n)) throw NumericalError("power_iteration: non-finite operator output");
        radius = std::max(radius, n);
        if (n == 0.0) break;
        for (std::size_t i = 0; i < dim; ++i) u[i] = hu[i] / n;
    }
    if (radius == 0.0) {
        est.converged = true;
        return est;
    }

    const double c = 1.1 * radius;
    est.shift = c;
    double prev = -1.0;
    for (std::size_t k = 0; k < max_iters; ++k) {
        WeightVector hv = apply(v);
        ++est.iterations;
        const double lam = dot(v, hv);
        const double q = lam + c;
        est.rayleigh.push_back(q);
        WeightVector r = hv;
        axpy(-lam, v, r);
        est.lambda = lam;
        est.residual = norm(r);
        if (est.residual <= tol * std::max(1.0, std::abs(lam)) || (k > 0 && std::abs(q - prev) <= tol * tol)) {
            est.converged = true;
            break;
        }
        prev = q;
        for (std::size_t i = 0; i < dim; ++i) hv[i] += c * v[i];
        if (detail::normalize(hv) == 0.0) break;
        v = std::move(hv);
    }
    return est;
}

/// Full-batch lambda_max of the model loss on `ds`.
inline EigEstimate top_eigenvalue(const Model& model, const WeightVector& w, const Dataset& ds, double tol,
                                  std::size_t max_iters, Rng rng) {
    if (ds.empty()) throw ContractError("top_eigenvalue: empty dataset");
    return power_iteration([&](const WeightVector& v) { return model.hvp(w, ds, v); }, w.size(), tol, max_iters,
                           std::move(rng));
}

// ---------------------------------------------------------------------------
// Landscape slices

struct LandscapeGrid {
    std::vector<double> coords; ///< shared x and y coordinates, length = resolution
    std::vector<double> loss;   ///< row-major, loss[iy * resolution + ix]
    WeightVector dir1, dir2;
    std::size_t resolution = 0;
    double extent = 0.0;

    double at(std::size_t ix, std::size_t iy) const { return loss.at(iy * resolution + ix); }
};

/// Gaussian direction rescaled block by block to the norm of that block of w.
/// Blocks where w is zero get a zero direction.
inline WeightVector filter_normalized_direction(const Model& model, const WeightVector& w, Rng rng) {
    WeightVector d(w.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = rng.normal();
    for (const auto& blk : model.blocks()) {
        double dn = 0.0, wn = 0.0;
        for (std::size_t i = blk.offset; i < blk.offset + blk.size; ++i) {
            dn += d[i] * d[i];
            wn += w[i] * w[i];
        }
        const double scale = dn > 0.0 ? std::sqrt(wn) / std::sqrt(dn) : 0.0;
        for (std::size_t i = blk.offset; i < blk.offset + blk.size; ++i) d[i] *= scale;
    }
    return d;
}

inline std::vector<double> grid_coordinates(std::size_t resolution, double extent) {
    std::vector<double> xs(resolution);
    const double half = static_cast<double>(resolution - 1);
    for (std::size_t i = 0; i < resolution; ++i)
        xs[i] = extent * (2.0 * static_cast<double>(i) - half) / half;
    return xs;
}

/// Loss over w + x d1 + y d2 on a resolution x resolution grid in [-a, a]^2.
inline LandscapeGrid landscape_slice(const Model& model, const WeightVector& w, const Dataset& ds,
                                     std::size_t resolution, double extent, Rng rng) {
    if (resolution < 3 || resolution % 2 == 0) throw ContractError("landscape_slice: resolution must be odd and >= 3");
    if (!(extent >= 0.0)) throw ContractError("landscape_slice: extent must be >= 0");
    if (ds.empty()) throw ContractError("landscape_slice: empty dataset");
    LandscapeGrid g;
    g.resolution = resolution;
    g.extent = extent;
    g.dir1 = filter_normalized_direction(model, w, rng.derive("dir1"));
    g.dir2 = filter_normalized_direction(model, w, rng.derive("dir2"));
    g.coords = grid_coordinates(resolution, extent);
    g.loss.resize(resolution * resolution);
    WeightVector p(w.size());
    for (std::size_t iy = 0; iy < resolution; ++iy)
        for (std::size_t ix = 0; ix < resolution; ++ix) {
            const double x = g.coords[ix], y = g.coords[iy];
            for (std::size_t i = 0; i < w.size(); ++i) p[i] = w[i] + x * g.dir1[i] + y * g.dir2[i];
            g.loss[iy * resolution + ix] = model.loss(p, ds);
        }
    return g;
}

/// CSV with header x,y,loss, one row per cell, x varying fastest.
inline void write_landscape_csv(const LandscapeGrid& g, std::ostream& os) {
    os << "x,y,loss\n";
    os.precision(17);
    for (std::size_t iy = 0; iy < g.resolution; ++iy)
        for (std::size_t ix = 0; ix < g.resolution; ++ix)
            os << g.coords[ix] << ',' << g.coords[iy] << ',' << g.at(ix, iy) << '\n';
}

// ---------------------------------------------------------------------------
// Paired sharpness comparison

struct SharpnessRow {
    std::string baseline, candidate;
    std::size_t seeds = 0;
    double baseline_mean = 0.0;
    double candidate_mean = 0.0;
    double mean_delta = 0.0;      ///< mean over seeds of candidate - baseline
    std::size_t candidate_wins = 0; ///< seeds where candidate > baseline
};

/// Pairs final-model lambda_max by seed; both sides must cover the same seeds.
inline SharpnessRow sharpness_delta(const std::string& baseline, const std::map<std::uint64_t, double>& base,
                                    const std::string& candidate, const std::map<std::uint64_t, double>& cand) {
    if (base.empty()) throw ContractError("sharpness_delta: no runs for " + baseline);
    if (base.size() != cand.size())
        throw ContractError("sharpness_delta: " + baseline + " and " + candidate + " cover different seeds");
    SharpnessRow row{baseline, candidate, base.size(), 0.0, 0.0, 0.0, 0};
    for (const auto& [seed, lb] : base) {
        auto it = cand.find(seed);
        if (it == cand.end())
            throw ContractError("sharpness_delta: " + candidate + " missing seed " + std::to_string(seed));
        row.baseline_mean += lb;
        row.candidate_mean += it->second;
        row.mean_delta += it->second - lb;
        if (it->second > lb) ++row.candidate_wins;
    }
    const double n = static_cast<double>(row.seeds);
    row.baseline_mean /= n;
    row.candidate_mean /= n;
    row.mean_delta /= n;
    return row;
}

} // namespace fedsyn
