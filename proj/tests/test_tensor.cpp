#include <catch_amalgamated.hpp>

#include "test_support.hpp"

using namespace fedsyn;
using testing::rel_err;

namespace {

using Params = std::vector<Tensor<double>>;

/// f(w) = 1/2 ||w||^2
template <class T>
Var<T> half_square(Tape<T>& t, std::span<const Var<T>> p) {
    return t.scale(t.dot(p[0], p[0]), 0.5);
}

/// f(w) = 1/2 w^T A w with A = [[2, 1], [1, 3]]; w is a column.
template <class T>
Var<T> quad_form(Tape<T>& t, std::span<const Var<T>> p) {
    Tensor<T> a({2, 2});
    a(0, 0) = T(2.0);
    a(0, 1) = T(1.0);
    a(1, 0) = T(1.0);
    a(1, 1) = T(3.0);
    auto A = t.leaf(std::move(a));
    return t.scale(t.dot(p[0], t.matmul(A, p[0])), 0.5);
}

} // namespace

TEST_CASE("tensor shape must match data length") {
    CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5)), ContractError);
    CHECK(Tensor<double>({2, 3}).size() == 6);
    CHECK(Tensor<double>::scalar(4.0).item() == 4.0);
}

TEST_CASE("checked construction rejects non-finite entries") {
    CHECK_THROWS_AS(Tensor<double>::checked({2}, {1.0, std::nan("")}), NumericalError);
    CHECK_NOTHROW(Tensor<double>::checked({2}, {1.0, 2.0}));
}

TEST_CASE("gradient of half squared norm is the identity") {
    const Params w{Tensor<double>::vector({1, 2, 3})};
    auto g = grad([](auto& t, auto p) { return half_square(t, p); }, w);
    CHECK(g[0].values() == std::vector<double>{1, 2, 3});
}

TEST_CASE("gradient of a product follows the product rule") {
    const Params w{Tensor<double>::scalar(3), Tensor<double>::scalar(5)};
    auto g = grad([](auto& t, auto p) { return t.mul(p[0], p[1]); }, w);
    CHECK(g[0].item() == 5.0);
    CHECK(g[1].item() == 3.0);
}

TEST_CASE("non-scalar outputs are rejected") {
    const Params w{Tensor<double>::vector({1, 2})};
    CHECK_THROWS_AS(grad([](auto& t, auto p) { return t.scale(p[0], 2.0); }, w), ContractError);
}

TEST_CASE("non-finite adjoints report the tape node") {
    const Params w{Tensor<double>::vector({std::numeric_limits<double>::infinity()})};
    try {
        grad([](auto& t, auto p) { return t.sum(t.mul(p[0], p[0])); }, w);
        FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
        CHECK(e.where() == 0);
    }
}

TEST_CASE("elementwise and matmul shape mismatches throw") {
    Tape<double> t;
    auto a = t.leaf(Tensor<double>({2, 3}));
    auto b = t.leaf(Tensor<double>({2, 2}));
    CHECK_THROWS_AS(t.add(a, b), ContractError);
    CHECK_THROWS_AS(t.matmul(a, b), ContractError);
    CHECK_THROWS_AS(t.add_row(a, t.leaf(Tensor<double>({2}))), ContractError);
}

TEST_CASE("hvp of half squared norm returns the direction") {
    const Params w{Tensor<double>::vector({0.3, -1, 2})};
    const Params v{Tensor<double>::vector({4, 5, -6})};
    auto hv = hvp([](auto& t, auto p) { return half_square(t, p); }, w, v);
    CHECK(hv[0].values() == v[0].values());
}

TEST_CASE("hvp of a quadratic form is A v") {
    const Params w{Tensor<double>::matrix(2, 1, {0.7, -0.2})};
    const Params v{Tensor<double>::matrix(2, 1, {1, 0})};
    auto hv = hvp([](auto& t, auto p) { return quad_form(t, p); }, w, v);
    CHECK(hv[0].values() == std::vector<double>{2, 1});
    const Params bad{Tensor<double>::vector({1, 0})};
    CHECK_THROWS_AS(hvp([](auto& t, auto p) { return quad_form(t, p); }, w, bad), ContractError);
}

TEST_CASE("2-4-2 network gradients match central differences") {
    const Mlp m(MlpSpec{{2, 4, 2}});
    Rng rng(1, "fd");
    for (int draw = 0; draw < 10; ++draw) {
        const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
        const Dataset one = testing::random_dataset(1, 2, 2, rng.derive(draw));
        const auto g = m.loss_and_grad(w, one).grad;
        const auto fd = testing::fd_gradient([&](const WeightVector& p) { return m.loss(p, one); }, w, 1e-5);
        CHECK(rel_err(g, fd) <= 1e-6);
    }
}

TEST_CASE("2-4-2 network hvp matches differences of gradients") {
    const Mlp m(MlpSpec{{2, 4, 2}});
    Rng rng(2, "hvp");
    for (int draw = 0; draw < 10; ++draw) {
        const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
        const WeightVector v = testing::gaussian_vector(m.param_count(), rng);
        const Dataset ds = testing::random_dataset(5, 2, 2, rng.derive(draw));
        CHECK(rel_err(m.hvp(w, ds, v), testing::fd_hvp(m, w, ds, v, 1e-4)) <= 1e-4);
    }
}

TEST_CASE("gradient is linear in the function") {
    Rng rng(3, "lin");
    const Params w{Tensor<double>::vector({rng.normal(), rng.normal(), rng.normal()})};
    const double a = rng.normal(), b = rng.normal();
    auto f = [](auto& t, auto p) { return t.sum(t.relu(t.mul(p[0], p[0]))); };
    auto g = [](auto& t, auto p) { return t.dot(p[0], t.scale(p[0], 3.0)); };
    auto combo = [&](auto& t, auto p) { return t.add(t.scale(f(t, p), a), t.scale(g(t, p), b)); };
    const auto gf = grad(f, w)[0], gg = grad(g, w)[0], gc = grad(combo, w)[0];
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(gc[i] - (a * gf[i] + b * gg[i])) <= 1e-12);
}

TEST_CASE("hvp is symmetric") {
    const Mlp m(MlpSpec{{3, 5, 3}});
    Rng rng(4, "sym");
    const Dataset ds = testing::random_dataset(6, 3, 3, rng.derive("data"));
    for (int k = 0; k < 10; ++k) {
        const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
        const WeightVector u = testing::gaussian_vector(m.param_count(), rng);
        const WeightVector v = testing::gaussian_vector(m.param_count(), rng);
        CHECK(std::abs(dot(v, m.hvp(w, ds, u)) - dot(u, m.hvp(w, ds, v))) <= 1e-8);
    }
}

TEST_CASE("repeated evaluation and replay are bitwise deterministic") {
    const Mlp m(MlpSpec{{3, 4, 2}});
    Rng rng(6, "det");
    const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
    const Dataset ds = testing::random_dataset(7, 3, 2, rng.derive("d"));
    const auto a = m.loss_and_grad(w, ds), b = m.loss_and_grad(w, ds);
    CHECK(a.loss == b.loss);
    CHECK(a.grad == b.grad);

    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::vector({1.0, 2.0}));
    auto y = tape.leaf(Tensor<double>::vector({3.0, -1.0}));
    auto out = tape.dot(tape.relu(tape.sub(x, y)), x);
    const double first = tape.value(out).item();
    const std::vector<Tensor<double>> fresh{Tensor<double>::vector({4.0, 2.0}), Tensor<double>::vector({3.0, -1.0})};
    tape.replay(fresh);
    CHECK(tape.value(out).item() == 4.0 * 1.0 + 2.0 * 3.0);
    const std::vector<Tensor<double>> orig{Tensor<double>::vector({1.0, 2.0}), Tensor<double>::vector({3.0, -1.0})};
    tape.replay(orig);
    CHECK(tape.value(out).item() == first);
    CHECK_THROWS_AS(tape.replay(std::span<const Tensor<double>>(orig).first(1)), ContractError);
}

TEST_CASE("tape nodes only reference earlier nodes") {
    Tape<double> t;
    auto a = t.leaf(Tensor<double>::vector({1, 2}));
    auto b = t.scale(a, 2.0);
    auto c = t.dot(a, b);
    (void)c;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const auto& n = t.node(i);
        if (n.op == OpKind::Leaf) continue;
        CHECK(n.a < i);
        CHECK(n.b < i);
    }
}
