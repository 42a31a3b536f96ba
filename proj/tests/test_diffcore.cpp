#include <cmath>
#include <limits>

#include "doctest.h"
#include "gradcheck.hpp"
#include "moelab/errors.hpp"
#include "moelab/ops.hpp"

using namespace moelab;
using moelab::testing::max_gradient_error;
using moelab::testing::random_extent;
using moelab::testing::random_tensor;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

TEST_CASE("matmul examples") {
    auto id = Tensor::matrix({{1, 0}, {0, 1}});
    auto b = Tensor::matrix({{5, 6}, {7, 8}});
    auto c = ops::matmul(id, b);
    CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{5, 6, 7, 8});

    auto dot = ops::matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
    CHECK(dot.item() == 11.0);

    CHECK_THROWS_AS(ops::matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{1, 2}})), DimensionError);
}

TEST_CASE("gradient of sum(A x B) w.r.t. A is the row sums of B") {
    Rng rng(3);
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {4, 5}, -1, 1, false);
    ops::sum(ops::matmul(a, b)).backward();
    auto g = a.grad();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double row_sum = 0.0;
            for (std::size_t j = 0; j < 5; ++j) row_sum += b.at(k, j);
            CHECK(g[i * 4 + k] == doctest::Approx(row_sum).epsilon(1e-12));
        }
    auto fn = [](const std::vector<Tensor>& in) { return ops::sum(ops::matmul(in[0], in[1])); };
    CHECK(max_gradient_error(fn, {a, b}) < 1e-5);
}

TEST_CASE("softmax examples") {
    auto u = ops::softmax(Tensor::row({0, 0, 0}));
    for (double p : u.data()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    auto m = ops::softmax(Tensor::row({3, kNegInf, 2}));
    CHECK(m.data()[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(m.data()[1] == 0.0);
    CHECK(m.data()[2] == doctest::Approx(0.2689).epsilon(1e-4));
    // e^3 / (e^3 + e^2) computed independently
    CHECK(m.data()[0] == doctest::Approx(std::exp(3.0) / (std::exp(3.0) + std::exp(2.0))).epsilon(1e-14));

    auto big = ops::softmax(Tensor::row({1000, 1000}));
    CHECK(big.data()[0] == 0.5);
    CHECK(big.data()[1] == 0.5);

    CHECK_THROWS_AS(ops::softmax(Tensor::row({kNegInf, kNegInf})), DegenerateSliceError);
    CHECK_THROWS_AS(ops::softmax(Tensor::row({std::nan(""), 1.0})), ContractError);
}

TEST_CASE("softmax along columns") {
    auto t = Tensor::matrix({{0, 1}, {0, 1}});
    auto s = ops::softmax(t, 0);
    for (double p : s.data()) CHECK(p == doctest::Approx(0.5));
}

TEST_CASE("softplus examples") {
    auto s = ops::softplus(Tensor::row({0.0, -1000.0, 1000.0}));
    CHECK(s.data()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(s.data()[1] >= 0.0);
    CHECK(s.data()[1] < 1e-300);
    CHECK(s.data()[2] == doctest::Approx(1000.0).epsilon(1e-15));
}

TEST_CASE("backward contracts") {
    auto w = Tensor::zeros({2, 3}, true);
    auto loss = ops::sum(w);
    loss.backward();
    for (double g : w.grad()) CHECK(g == 1.0);
    loss.backward();
    for (double g : w.grad()) CHECK(g == 2.0);
    w.zero_grad();
    for (double g : w.grad()) CHECK(g == 0.0);

    auto v = ops::scale(w, 2.0);
    CHECK_THROWS_AS(v.backward(), ContractError);
}

TEST_CASE("KL(p || softmax(z)) gradient matches finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = random_extent(rng);
        auto p = ops::softmax(random_tensor(rng, {1, n}, -2, 2, false));
        auto z = random_tensor(rng, {1, n}, -2, 2);
        const std::vector<std::uint8_t> mask{1};
        auto fn = [&](const std::vector<Tensor>& in) {
            return ops::kl_rows(ops::log(in[0]), ops::log_softmax(in[1]), mask);
        };
        CHECK(max_gradient_error(fn, {p, z}) < 1e-5);
    }
}

TEST_CASE("graph nodes are ordered parents-first and visited once") {
    auto a = Tensor::row({1, 2}, true);
    auto b = ops::mul(a, a);
    auto c = ops::add(b, a);
    auto loss = ops::sum(ops::mul(c, b));
    auto order = topological_order(loss);
    std::vector<const Node*> seen;
    for (Node* n : order) {
        for (const auto& p : n->parents) {
            CHECK(std::find(seen.begin(), seen.end(), p.get()) != seen.end());
        }
        CHECK(std::find(seen.begin(), seen.end(), n) == seen.end());
        seen.push_back(n);
    }
    CHECK(seen.back() == loss.node().get());
}

TEST_CASE("no-grad guard suppresses graph recording") {
    auto a = Tensor::row({1, 2}, true);
    {
        NoGradGuard guard;
        auto b = ops::scale(a, 3.0);
        CHECK_FALSE(b.requires_grad());
    }
    CHECK(ops::scale(a, 3.0).requires_grad());
}

TEST_CASE("shape and contract errors") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({2}).item(), ContractError);
    CHECK_THROWS_AS(ops::cross_entropy(Tensor::zeros({2, 3}), std::vector<int>{0, 1}, std::vector<std::uint8_t>{0, 0}),
                    ContractError);
}

TEST_CASE("leading-axis broadcast") {
    auto a = Tensor::matrix({{1, 2}, {3, 4}});
    auto b = Tensor::row({10, 20});
    auto c = ops::add(a, b);
    CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{11, 22, 13, 24});
}

TEST_CASE("cross entropy of a confident correct model is zero") {
    auto logits = Tensor::matrix({{0, -1e9, -1e9}, {-1e9, 0, -1e9}});
    std::vector<int> targets{0, 1};
    std::vector<std::uint8_t> mask{1, 1};
    CHECK(ops::cross_entropy(logits, targets, mask).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("forward evaluation is deterministic") {
    auto run = [] {
        Rng rng(99);
        auto x = random_tensor(rng, {5, 8});
        auto w = random_tensor(rng, {8, 8});
        auto g = random_tensor(rng, {1, 8});
        auto b = random_tensor(rng, {1, 8});
        auto h = ops::gelu(ops::layer_norm(ops::matmul(x, w), g, b));
        auto o = ops::causal_attention(h, h, h, 1, 5, 2);
        return std::vector<double>(o.data().begin(), o.data().end());
    };
    CHECK(run() == run());
}
