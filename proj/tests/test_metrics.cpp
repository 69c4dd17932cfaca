#include <catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <sstream>

#include "test_support.hpp"

using namespace fedsyn;
using testing::Quadratic;

namespace {

EigEstimate eig_of(const Quadratic& q, double tol = 1e-12, std::size_t iters = 20000, std::uint64_t seed = 1) {
    return power_iteration([&](const WeightVector& v) { return q.apply(v); }, q.param_count(), tol, iters, Rng(seed, "pi"));
}

double dense_lambda_max(const std::vector<std::vector<double>>& h) {
    const auto n = static_cast<Eigen::Index>(h.size());
    Eigen::MatrixXd m(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) m(i, j) = 0.5 * (h[i][j] + h[j][i]);
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues().maxCoeff();
}

} // namespace

TEST_CASE("power iteration on diagonal operators") {
    CHECK(eig_of(Quadratic(testing::diagonal({1.0, 5.0}))).lambda == Catch::Approx(5.0).margin(1e-8));
    CHECK(eig_of(Quadratic(testing::diagonal({-3.0, -1.0}))).lambda == Catch::Approx(-1.0).margin(1e-8));
    CHECK(eig_of(Quadratic(testing::diagonal({-5.0, 2.0, 0.5}))).lambda == Catch::Approx(2.0).margin(1e-8));
    const EigEstimate zero = eig_of(Quadratic(testing::diagonal({0.0, 0.0})));
    CHECK(zero.converged);
    CHECK(zero.lambda == 0.0);
}

TEST_CASE("power iteration matches a dense eigendecomposition on tiny nets") {
    Rng rng(2, "dense");
    for (int draw = 0; draw < 10; ++draw) {
        const Mlp m(MlpSpec{{3, 4, 3}});
        const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
        const Dataset ds = testing::random_dataset(10, 3, 3, rng.derive(draw));
        const double expect = dense_lambda_max(testing::dense_hessian(m, w, ds));
        const EigEstimate e = top_eigenvalue(m, w, ds, 1e-10, 20000, rng.derive("pi").derive(draw));
        CHECK(e.converged);
        CHECK(std::abs(e.lambda - expect) <= 1e-6 * std::max(1.0, std::abs(expect)));
    }
}

TEST_CASE("shifted Rayleigh quotients never decrease") {
    Rng rng(3, "ray");
    std::vector<std::vector<double>> a(6, std::vector<double>(6));
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j <= i; ++j) a[i][j] = a[j][i] = rng.normal();
    const EigEstimate e = eig_of(Quadratic(a), 1e-12, 500);
    REQUIRE(e.rayleigh.size() > 2);
    for (std::size_t k = 1; k < e.rayleigh.size(); ++k) CHECK(e.rayleigh[k] >= e.rayleigh[k - 1] - 1e-12);
    CHECK(e.shift > 0.0);
}

TEST_CASE("an iteration cap below convergence is reported") {
    const EigEstimate e = eig_of(Quadratic(testing::diagonal({1.0, 0.999, 0.998, 0.5})), 1e-12, 3);
    CHECK(!e.converged);
    CHECK(e.iterations <= 4);
    CHECK_THROWS_AS(eig_of(Quadratic(testing::diagonal({1.0})), 0.0), ContractError);
}

TEST_CASE("landscape center and zero extent") {
    const Mlp m(MlpSpec{{3, 4, 2}});
    Rng rng(4, "land");
    const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
    const Dataset ds = testing::random_dataset(12, 3, 2, rng.derive("d"));
    const LandscapeGrid g = landscape_slice(m, w, ds, 5, 1.0, Rng(1, "slice"));
    CHECK(g.at(2, 2) == m.loss(w, ds));
    CHECK(g.coords == std::vector<double>{-1.0, -0.5, 0.0, 0.5, 1.0});
    const LandscapeGrid flat = landscape_slice(m, w, ds, 3, 0.0, Rng(1, "slice"));
    for (double l : flat.loss) CHECK(l == m.loss(w, ds));
    CHECK(landscape_slice(m, w, ds, 5, 1.0, Rng(1, "slice")).loss == g.loss);
    CHECK_THROWS_AS(landscape_slice(m, w, ds, 4, 1.0, Rng(1)), ContractError);
    CHECK_THROWS_AS(landscape_slice(m, w, ds, 1, 1.0, Rng(1)), ContractError);
}

TEST_CASE("a quadratic bowl gives a point-symmetric slice") {
    const std::vector<std::vector<double>> a{{2.0, 0.5, 0.0}, {0.5, 1.0, 0.0}, {0.0, 0.0, 3.0}};
    const Quadratic q(a, {0.7, -0.2, 1.5});
    const WeightVector w(std::vector<double>{0.7, -0.2, 1.5});
    const LandscapeGrid g = landscape_slice(q, w, testing::dummy_batch(), 7, 2.0, Rng(5, "sym"));
    for (std::size_t iy = 0; iy < 7; ++iy)
        for (std::size_t ix = 0; ix < 7; ++ix) CHECK(std::abs(g.at(ix, iy) - g.at(6 - ix, 6 - iy)) <= 1e-10);
    CHECK(g.at(3, 3) == 0.0);
}

TEST_CASE("filter-normalized directions match block norms") {
    const Mlp m(MlpSpec{{4, 5, 3}});
    WeightVector w = m.init(Rng(6, "init")); // biases start at zero
    const WeightVector d = filter_normalized_direction(m, w, Rng(7, "dir"));
    for (const auto& blk : m.blocks()) {
        double dn = 0, wn = 0;
        for (std::size_t i = blk.offset; i < blk.offset + blk.size; ++i) {
            dn += d[i] * d[i];
            wn += w[i] * w[i];
        }
        CHECK(std::sqrt(dn) == Catch::Approx(std::sqrt(wn)).epsilon(1e-12).margin(1e-300));
    }
    CHECK(filter_normalized_direction(m, w, Rng(7, "dir")) == d);
}

TEST_CASE("landscape CSV has one row per cell") {
    const Quadratic q(testing::diagonal({1.0, 1.0}));
    const LandscapeGrid g = landscape_slice(q, WeightVector(std::vector<double>{1.0, 1.0}), testing::dummy_batch(), 3, 1.0, Rng(1));
    std::ostringstream os;
    write_landscape_csv(g, os);
    std::istringstream in(os.str());
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(lines.size() == 10);
    CHECK(lines[0] == "x,y,loss");
    CHECK(lines[1].rfind("-1,-1,", 0) == 0);
    CHECK(lines[2].rfind("0,-1,", 0) == 0);
}

TEST_CASE("paired sharpness deltas") {
    const SharpnessRow row = sharpness_delta("none", {{1, 1.0}, {2, 2.0}}, "q4", {{1, 2.0}, {2, 1.5}});
    CHECK(row.seeds == 2);
    CHECK(row.mean_delta == Catch::Approx(0.25));
    CHECK(row.candidate_wins == 1);
    CHECK(sharpness_delta("a", {{1, 3.0}}, "b", {{1, 3.0}}).mean_delta == 0.0);
    CHECK_THROWS_AS(sharpness_delta("a", {{1, 1.0}, {2, 1.0}}, "b", {{1, 1.0}, {3, 1.0}}), ContractError);
    CHECK_THROWS_AS(sharpness_delta("a", {{1, 1.0}}, "b", {}), ContractError);
    CHECK_THROWS_AS(sharpness_delta("a", {}, "b", {}), ContractError);
}
