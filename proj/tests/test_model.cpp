#include <cmath>
#include <numeric>

#include "doctest.h"
#include "moelab/errors.hpp"
#include "moelab/model.hpp"
#include "moelab/ops.hpp"

using namespace moelab;

namespace {

ModelConfig tiny_moe() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 24;
    c.max_seq_len = 16;
    c.moe = MoeSpec{4, 2, {1}};
    return c;
}

ModelConfig tiny_dense() {
    auto c = tiny_moe();
    c.moe.reset();
    return c;
}

std::vector<double> row_of(const ForwardResult& r, std::size_t seq, std::size_t pos) {
    const std::size_t v = r.logits.cols();
    auto d = r.logits.data().subspan(r.row(seq, pos) * v, v);
    return {d.begin(), d.end()};
}

}  // namespace

TEST_CASE("config validation") {
    auto c = tiny_moe();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = tiny_moe();
    c.moe->k = 5;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = tiny_moe();
    c.moe->layers = {2};
    CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("parameter count matches the shapes") {
    for (auto c : {tiny_moe(), tiny_dense(), ModelConfig::desk_teacher(), ModelConfig::desk_student()}) {
        LanguageModel m(c, 1);
        CHECK(m.parameter_count() == c.analytic_parameter_count());
    }
    CHECK(LanguageModel(ModelConfig::desk_teacher(), 1).has_moe());
    CHECK_FALSE(LanguageModel(ModelConfig::desk_student(), 1).has_moe());
}

TEST_CASE("later tokens do not change earlier logits") {
    LanguageModel m(tiny_moe(), 2);
    const std::vector<int> a{tokens::kBos, 10, 20, 30};
    auto b = a;
    b.push_back(40);
    b.push_back(50);
    auto ra = m.forward({a}, RoutingMode::top_k(2));
    auto rb = m.forward({b}, RoutingMode::top_k(2));
    for (std::size_t t = 0; t < a.size(); ++t) {
        auto x = row_of(ra, 0, t), y = row_of(rb, 0, t);
        for (std::size_t j = 0; j < x.size(); ++j) CHECK(std::abs(x[j] - y[j]) < 1e-12);
    }
}

TEST_CASE("padding does not affect real positions") {
    LanguageModel m(tiny_moe(), 3);
    const std::vector<int> shortseq{1, 2, 3};
    const std::vector<int> longseq{4, 5, 6, 7, 8, 9};
    auto alone = m.forward({shortseq}, RoutingMode::top_k(2));
    auto batched = m.forward({shortseq, longseq}, RoutingMode::top_k(2));
    CHECK(batched.seq == 6);
    CHECK(batched.row_valid[3] == 0);
    for (std::size_t t = 0; t < shortseq.size(); ++t) {
        auto x = row_of(alone, 0, t), y = row_of(batched, 0, t);
        for (std::size_t j = 0; j < x.size(); ++j) CHECK(std::abs(x[j] - y[j]) < 1e-12);
    }
}

TEST_CASE("dense model ignores the routing mode") {
    LanguageModel m(tiny_dense(), 4);
    const std::vector<int> s{1, 2, 3, 4};
    auto a = m.forward({s}, RoutingMode::top_k(1));
    auto b = m.forward({s}, RoutingMode::all());
    CHECK(std::vector<double>(a.logits.data().begin(), a.logits.data().end()) ==
          std::vector<double>(b.logits.data().begin(), b.logits.data().end()));
    CHECK(a.lb_loss.item() == 0.0);
}

TEST_CASE("MoE model with k = N matches all mode") {
    LanguageModel m(tiny_moe(), 5);
    const std::vector<int> s{7, 8, 9, 10, 11};
    auto a = m.forward({s}, RoutingMode::top_k(4));
    auto b = m.forward({s}, RoutingMode::all());
    CHECK(std::vector<double>(a.logits.data().begin(), a.logits.data().end()) ==
          std::vector<double>(b.logits.data().begin(), b.logits.data().end()));
}

TEST_CASE("token distributions are normalised") {
    LanguageModel m(tiny_moe(), 6);
    for (const auto& d : token_distributions(m, {1, 2, 3}, RoutingMode::top_k(2))) {
        CHECK(d.probs.size() == 260);
        CHECK(std::accumulate(d.probs.begin(), d.probs.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
        for (double p : d.probs) CHECK(p >= 0.0);
    }
}

TEST_CASE("forward rejects bad input") {
    LanguageModel m(tiny_moe(), 7);
    CHECK_THROWS_AS(m.forward({}, RoutingMode::all()), ContractError);
    CHECK_THROWS_AS(m.forward({{}}, RoutingMode::all()), ContractError);
    CHECK_THROWS_AS(m.forward({{300}}, RoutingMode::all()), ContractError);
    CHECK_THROWS_AS(m.forward({std::vector<int>(17, 1)}, RoutingMode::all()), ContractError);
}

TEST_CASE("gradients reach every parameter") {
    LanguageModel m(tiny_moe(), 8);
    const std::vector<int> s{1, 2, 3, 4, 5};
    auto r = m.forward({s}, RoutingMode::all());
    std::vector<int> targets{2, 3, 4, 5, 6};
    std::vector<std::uint8_t> mask(5, 1);
    auto loss = ops::add(ops::cross_entropy(r.logits, targets, mask), r.lb_loss);
    loss.backward();
    for (const auto& p : m.parameters()) {
        if (p.name.find("w_noise") != std::string::npos) continue;  // noise off
        CHECK_MESSAGE(p.tensor.has_grad(), p.name);
    }
}

TEST_CASE("clone has independent storage") {
    LanguageModel m(tiny_moe(), 9);
    auto c = m.clone();
    c.head.mutable_data()[0] += 1.0;
    CHECK(c.head.data()[0] != m.head.data()[0]);
    c.blocks[1].moe->router.w_gate.mutable_data()[0] += 1.0;
    CHECK(c.blocks[1].moe->router.w_gate.data()[0] != m.blocks[1].moe->router.w_gate.data()[0]);
}

TEST_CASE("pick_token") {
    const std::vector<double> logits{0.0, 3.0, 1.0, 2.0};
    Rng rng(10);
    CHECK(pick_token(logits, SamplingConfig{1.0, 0, 1.0, true}, rng) == 1);
    for (int i = 0; i < 200; ++i) {
        const int t = pick_token(logits, SamplingConfig{1.0, 2, 1.0, false}, rng);
        CHECK((t == 1 || t == 3));
    }
    for (int i = 0; i < 200; ++i) CHECK(pick_token(logits, SamplingConfig{1.0, 0, 0.5, false}, rng) == 1);
    CHECK_THROWS_AS(pick_token(logits, SamplingConfig{0.0, 0, 1.0, false}, rng), ContractError);
}

TEST_CASE("sampling is seed-deterministic and respects limits") {
    LanguageModel m(tiny_moe(), 11);
    const std::vector<std::vector<int>> prompts{{1, 2}, {3, 4, 5}};
    Rng r1(12), r2(12);
    auto a = sample_batch(m, prompts, 6, {}, r1);
    auto b = sample_batch(m, prompts, 6, {}, r2);
    CHECK(a == b);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].size() <= 6);
        CHECK(prompts[i].size() + a[i].size() <= 16);
        for (std::size_t t = 0; t + 1 < a[i].size(); ++t) CHECK(a[i][t] != tokens::kEos);
    }
    // greedy continuation of one prompt equals its batched continuation
    SamplingConfig greedy;
    greedy.greedy = true;
    auto batched = sample_batch(m, prompts, 5, greedy, r1);
    CHECK(sample(m, prompts[1], 5, greedy, r1) == batched[1]);
}
