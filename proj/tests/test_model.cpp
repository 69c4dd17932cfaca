#include <catch_amalgamated.hpp>

#include <numeric>

#include "test_support.hpp"

using namespace fedsyn;
using testing::rel_err;

TEST_CASE("parameter count of a 4-3-2 network") {
    CHECK(MlpSpec{{4, 3, 2}}.param_count() == 23);
    CHECK(Mlp(MlpSpec{{4, 3, 2}}).init(Rng(1)).size() == 23);
    CHECK_THROWS_AS(Mlp(MlpSpec{{4}}), ContractError);
    CHECK_THROWS_AS(Mlp(MlpSpec{{4, 0, 2}}), ContractError);
}

TEST_CASE("initialization is deterministic under the seed") {
    const Mlp m(MlpSpec{{5, 7, 3}});
    CHECK(m.init(Rng(9, "init")) == m.init(Rng(9, "init")));
    CHECK(m.init(Rng(9, "init")) != m.init(Rng(10, "init")));
}

TEST_CASE("He-uniform per-layer variance over 1000 draws") {
    const Mlp m(MlpSpec{{20, 10, 4}});
    const auto blocks = m.blocks();
    for (std::size_t l = 0; l < 2; ++l) {
        const auto& blk = blocks[2 * l];
        const double fan_in = l == 0 ? 20.0 : 10.0;
        double s = 0.0, ss = 0.0;
        std::size_t n = 0;
        for (std::uint64_t seed = 0; seed < 1000; ++seed) {
            const WeightVector w = m.init(Rng(seed, "he"));
            for (std::size_t i = blk.offset; i < blk.offset + blk.size; ++i) {
                s += w[i];
                ss += w[i] * w[i];
                ++n;
            }
            for (std::size_t i = blocks[2 * l + 1].offset; i < blocks[2 * l + 1].offset + blocks[2 * l + 1].size; ++i)
                REQUIRE(w[i] == 0.0);
        }
        const double mean = s / static_cast<double>(n);
        const double var = ss / static_cast<double>(n) - mean * mean;
        CHECK(std::abs(var / (2.0 / fan_in) - 1.0) < 0.2);
    }
}

TEST_CASE("flatten inverts unflatten bitwise") {
    const Mlp m(MlpSpec{{3, 6, 2, 4}});
    Rng rng(2, "flat");
    for (int k = 0; k < 10; ++k) {
        const WeightVector v = testing::gaussian_vector(m.param_count(), rng);
        const auto parts = m.unflatten(v);
        CHECK(m.flatten(parts) == v);
    }
}

TEST_CASE("zero weights give the uniform-softmax loss") {
    for (int c : {2, 3, 10}) {
        const Mlp m(MlpSpec{{4, 5, static_cast<std::size_t>(c)}});
        const Dataset ds = testing::random_dataset(9, 4, c, Rng(3, "u"));
        CHECK(m.loss(WeightVector(m.param_count(), 0.0), ds) == Catch::Approx(std::log(c)).epsilon(1e-15));
    }
}

TEST_CASE("single-sample gradient matches finite differences") {
    const Mlp m(MlpSpec{{3, 4, 3}});
    Rng rng(4, "fd");
    const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
    const Dataset one = testing::random_dataset(1, 3, 3, rng.derive("d"));
    const auto fd = testing::fd_gradient([&](const WeightVector& p) { return m.loss(p, one); }, w, 1e-5);
    CHECK(rel_err(m.loss_and_grad(w, one).grad, fd) <= 1e-6);
}

TEST_CASE("50 random draws on an 8-16-4 network pass the gradient check") {
    const Mlp m(MlpSpec{{8, 16, 4}});
    Rng rng(5, "fd50");
    double worst = 0.0;
    for (int draw = 0; draw < 50; ++draw) {
        const WeightVector w = testing::gaussian_vector(m.param_count(), rng, 0.5);
        const Dataset ds = testing::random_dataset(8, 8, 4, rng.derive(draw));
        const auto fd = testing::fd_gradient([&](const WeightVector& p) { return m.loss(p, ds); }, w, 1e-5);
        worst = std::max(worst, rel_err(m.loss_and_grad(w, ds).grad, fd));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("duplicating a batch leaves loss and gradient unchanged") {
    const Mlp m(MlpSpec{{3, 4, 2}});
    Rng rng(6, "dup");
    const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
    const Dataset one = testing::random_dataset(1, 3, 2, rng.derive("d"));
    const std::vector<std::size_t> twice{0, 0};
    const auto a = m.loss_and_grad(w, one);
    const auto b = m.loss_and_grad(w, gather(one, twice));
    CHECK(a.loss == b.loss);
    CHECK(a.grad == b.grad);
}

TEST_CASE("loss is invariant to batch order and bitwise after sorting") {
    const Mlp m(MlpSpec{{3, 4, 2}});
    Rng rng(7, "perm");
    const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
    const Dataset ds = testing::random_dataset(12, 3, 2, rng.derive("d"));
    std::vector<std::size_t> perm(ds.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    const auto a = m.loss_and_grad(w, ds);
    const auto b = m.loss_and_grad(w, gather(ds, perm));
    CHECK(std::abs(a.loss - b.loss) <= 1e-14);
    CHECK(rel_err(a.grad, b.grad) <= 1e-13);
    std::sort(perm.begin(), perm.end());
    const auto c = m.loss_and_grad(w, gather(ds, perm));
    CHECK(c.loss == a.loss);
    CHECK(c.grad == a.grad);
}

TEST_CASE("batch contract violations") {
    const Mlp m(MlpSpec{{3, 2}});
    const WeightVector w(m.param_count(), 0.1);
    Dataset bad = testing::random_dataset(2, 3, 2, Rng(1));
    bad.labels[1] = 2;
    CHECK_THROWS_AS(m.loss_and_grad(w, bad), ContractError);
    Dataset empty;
    empty.classes = 2;
    empty.features = Tensor<double>({0, 3});
    CHECK_THROWS_AS(m.loss_and_grad(w, empty), ContractError);
    CHECK_THROWS_AS(evaluate(m, w, empty), ContractError);
    CHECK_THROWS_AS(m.loss_and_grad(WeightVector(3), testing::random_dataset(2, 3, 2, Rng(1))), ContractError);
}

TEST_CASE("evaluate on a correctly classified sample") {
    const Mlp m(MlpSpec{{1, 2}});
    // logits = [0, x]: class 1 wins for x > 0
    const WeightVector w(std::vector<double>{0.0, 1.0, 0.0, 0.0});
    Dataset ds;
    ds.classes = 2;
    ds.features = Tensor<double>({1, 1}, std::vector<double>{2.0});
    ds.labels = {1};
    CHECK(evaluate(m, w, ds).accuracy == 1.0);
}

TEST_CASE("ties go to the lowest class") {
    const Mlp m(MlpSpec{{2, 2}});
    Dataset ds = testing::random_dataset(10, 2, 2, Rng(3));
    for (std::size_t i = 0; i < 10; ++i) ds.labels[i] = i < 5 ? 0 : 1;
    CHECK(evaluate(m, WeightVector(m.param_count(), 0.0), ds).accuracy == 0.5);
}

TEST_CASE("evaluate matches a per-sample loop") {
    const Mlp m(MlpSpec{{4, 6, 3}});
    Rng rng(8, "eval");
    const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
    const Dataset ds = testing::random_dataset(25, 4, 3, rng.derive("d"));
    std::size_t correct = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::vector<std::size_t> one{i};
        const Dataset row = gather(ds, one);
        const auto z = m.logits(w, row.features);
        std::size_t best = 0;
        for (std::size_t j = 1; j < 3; ++j)
            if (z(0, j) > z(0, best)) best = j;
        correct += static_cast<int>(best) == ds.labels[i];
        total += m.loss(w, row);
    }
    const Evaluation ev = evaluate(m, w, ds);
    CHECK(ev.accuracy == static_cast<double>(correct) / 25.0);
    CHECK(ev.loss == total / 25.0);
}

TEST_CASE("feature gradient matches finite differences") {
    const Mlp m(MlpSpec{{3, 4, 2}});
    Rng rng(9, "fx");
    const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
    Dataset ds = testing::random_dataset(4, 3, 2, rng.derive("d"));
    const auto gx = m.feature_grad(w, ds);
    WeightVector x(ds.features.values());
    auto f = [&](const WeightVector& p) {
        Dataset d = ds;
        d.features.values() = p.values();
        return m.loss(w, d);
    };
    CHECK(rel_err(gx.values(), testing::fd_gradient(f, x, 1e-5).values()) <= 1e-6);
}

TEST_CASE("second-order feature term matches differences of feature gradients") {
    // d/dX <grad_w F, v> = (grad_X F(w + h v) - grad_X F(w - h v)) / 2h
    const Mlp m(MlpSpec{{3, 4, 2}});
    Rng rng(10, "mixed");
    const WeightVector w = testing::gaussian_vector(m.param_count(), rng);
    const WeightVector v = testing::gaussian_vector(m.param_count(), rng);
    const Dataset ds = testing::random_dataset(4, 3, 2, rng.derive("d"));
    const double h = 1e-5;
    WeightVector up = w, down = w;
    axpy(h, v, up);
    axpy(-h, v, down);
    const auto gu = m.feature_grad(up, ds), gd = m.feature_grad(down, ds);
    std::vector<double> fd(gu.size());
    for (std::size_t i = 0; i < fd.size(); ++i) fd[i] = (gu[i] - gd[i]) / (2 * h);
    CHECK(rel_err(m.second_order(w, ds, v).feature_vector.values(), fd) <= 1e-6);
}
