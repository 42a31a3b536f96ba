#include <cmath>
#include <limits>
#include <map>

#include "doctest.h"
#include "gradcheck.hpp"
#include "moelab/checksum.hpp"
#include "moelab/distill.hpp"
#include "moelab/errors.hpp"
#include "moelab/ops.hpp"

using namespace moelab;
using moelab::testing::max_gradient_error;

namespace {

ModelConfig small_teacher() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 24;
    c.moe = MoeSpec{4, 2, {0, 1}};
    return c;
}

ModelConfig small_student() {
    ModelConfig c;
    c.d_model = 12;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 24;
    return c;
}

std::vector<EncodedExample> corpus(std::size_t n = 40) {
    Rng rng(11);
    return encode_all(gen_mixture({Task::Copy, Task::Reverse}, n, rng, {2, 4}), {24, 8});
}

DistillConfig quick(Method m) {
    DistillConfig c;
    c.method = m;
    c.steps = 3;
    c.batch_size = 4;
    c.max_response = 6;
    c.lr_student = 1e-2;
    c.lr_router = 1e-2;
    c.probe_size = 4;
    return c;
}

std::map<std::string, std::uint64_t> checksums(const LanguageModel& m) {
    std::map<std::string, std::uint64_t> out;
    for (const auto& p : m.parameters()) out[p.name] = checksum(p.tensor);
    return out;
}

std::vector<double> losses(const DistillResult& r) {
    std::vector<double> out;
    for (const auto& s : r.history) out.push_back(s.loss);
    return out;
}

TokenDistribution dist(std::vector<double> p) { return TokenDistribution{std::move(p)}; }

std::vector<TokenDistribution> random_dists(Rng& rng, std::size_t len, std::size_t width) {
    std::vector<TokenDistribution> out(len);
    for (auto& d : out) {
        double s = 0.0;
        for (std::size_t v = 0; v < width; ++v) {
            d.probs.push_back(rng.uniform() + 1e-3);
            s += d.probs.back();
        }
        for (double& p : d.probs) p /= s;
    }
    return out;
}

}  // namespace

TEST_CASE("forward and reverse KL oracles") {
    const std::vector<std::uint8_t> one{1};
    CHECK(forward_kl({dist({0.3, 0.7})}, {dist({0.3, 0.7})}, one) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::abs(forward_kl({dist({0.5, 0.5})}, {dist({0.25, 0.75})}, one) - 0.1438) < 1e-4);
    // student [0.25, 0.75] against teacher [0.5, 0.5]: 0.25 ln 0.5 + 0.75 ln 1.5
    CHECK(std::abs(reverse_kl({dist({0.5, 0.5})}, {dist({0.25, 0.75})}, one) - 0.1308) < 1e-4);
    // zero-probability entries of p contribute nothing
    CHECK(std::isfinite(forward_kl({dist({1.0, 0.0})}, {dist({0.5, 0.5})}, one)));
    CHECK_THROWS_AS(forward_kl({dist({1.0})}, {}, one), ContractError);

    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        auto a = random_dists(rng, 3, 1 + rng.below(6));
        auto b = a;
        for (auto& d : b) {
            double s = 0.0;
            for (double& p : d.probs) s += (p *= 0.5 + rng.uniform());
            for (double& p : d.probs) p /= s;
        }
        const std::vector<std::uint8_t> mask{1, 0, 1};
        CHECK(forward_kl(a, b, mask) >= 0.0);
        CHECK(reverse_kl(a, b, mask) == forward_kl(b, a, mask));
        CHECK(std::abs(forward_kl(a, a, mask)) <= 1e-9);
    }
}

TEST_CASE("masked positions carry no loss or gradient") {
    LanguageModel student(small_student(), 2);
    auto batch = golden_batch(corpus(4));
    auto a = sft_loss(student, batch).item();
    auto altered = batch;
    for (auto& seq : altered.tokens) seq[1] = 'z';  // a request byte, never a response target
    // the request token is an input to later positions, so compare targets only
    auto res = student.forward(batch.tokens, RoutingMode::all());
    auto rows = target_rows(batch, res.seq);
    auto rows_alt = rows;
    for (std::size_t r = 0; r < rows_alt.mask.size(); ++r) {
        if (!rows_alt.mask[r]) rows_alt.targets[r] = (rows_alt.targets[r] + 7) % 256;
    }
    auto logits = res.logits.detach().set_requires_grad(true);
    auto l1 = ops::cross_entropy(logits, rows.targets, rows.mask);
    auto l2 = ops::cross_entropy(logits, rows_alt.targets, rows.mask);
    CHECK(l1.item() == l2.item());
    CHECK(l1.item() == a);
    l1.backward();
    const auto g = logits.grad();
    for (std::size_t r = 0; r < rows.mask.size(); ++r) {
        if (rows.mask[r]) continue;
        for (std::size_t c = 0; c < logits.cols(); ++c) CHECK(g[r * logits.cols() + c] == 0.0);
    }
}

TEST_CASE("tensor KL matches the distribution oracle") {
    LanguageModel teacher(small_teacher(), 3);
    LanguageModel student(small_student(), 4);
    auto ex = corpus(1)[0];
    SequenceBatch batch{{ex.tokens}, {ex.response_mask}};
    auto tlp = teacher_log_probs(teacher, batch, RoutingMode::top_k(2));
    auto p = token_distributions(teacher, ex.tokens, RoutingMode::top_k(2));
    auto q = token_distributions(student, ex.tokens, RoutingMode::all());
    auto rows = target_rows(batch, ex.tokens.size());
    const double fwd = student_kl(student, tlp, batch, KlDirection::Forward).item();
    const double rev = student_kl(student, tlp, batch, KlDirection::Reverse).item();
    CHECK(fwd == doctest::Approx(forward_kl(p, q, rows.mask)).epsilon(1e-10));
    CHECK(rev == doctest::Approx(reverse_kl(p, q, rows.mask)).epsilon(1e-10));
}

TEST_CASE("ka_select") {
    Rng rng(5);
    const std::vector<double> logits{0.3, 2.0, -1.0, 1.0};
    for (int i = 0; i < 20; ++i) CHECK(ka_select(logits, 0.0, 3, rng) == std::vector<std::size_t>{0, 1, 3});

    const std::vector<double> two{std::log(0.9), std::log(0.1)};
    std::size_t zero = 0;
    for (int i = 0; i < 10000; ++i) zero += ka_select(two, 1.0, 1, rng)[0] == 0;
    CHECK(std::abs(static_cast<double>(zero) / 10000.0 - 0.9) <= 0.02);

    for (int i = 0; i < 500; ++i) {
        const std::size_t n = 2 + rng.below(7);
        const std::size_t count = 1 + rng.below(n - 1);
        std::vector<double> l(n);
        for (double& x : l) x = 4.0 * rng.normal();
        auto e = ka_select(l, rng.uniform(), count, rng);
        CHECK(e.size() == count);
        CHECK(std::adjacent_find(e.begin(), e.end()) == e.end());
        CHECK(std::is_sorted(e.begin(), e.end()));
        CHECK(e.back() < n);
    }
    CHECK_THROWS_AS(ka_select(logits, 0.5, 0, rng), ContractError);
    CHECK_THROWS_AS(ka_select(logits, 1.5, 2, rng), ContractError);
}

TEST_CASE("ka_gate") {
    auto d = ka_gate(std::vector<double>{3, 1, 2}, {0, 2});
    CHECK(d.probs[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(d.probs[1] == 0.0);
    CHECK(d.probs[2] == doctest::Approx(0.2689).epsilon(1e-4));

    Rng rng(6);
    const std::vector<double> pair{0.4, -0.2};
    auto single = ka_gate(pair, ka_select(pair, 0.0, 1, rng));
    CHECK(single.probs == std::vector<double>{1.0, 0.0});
    CHECK_THROWS_AS(ka_gate(pair, {}), ContractError);
}

TEST_CASE("adamw") {
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    std::vector<double> w{1.0, -2.0};
    AdamMoments state;
    adamw_step(w, std::vector<double>{0.0, 0.0}, state, 1, cfg);
    CHECK(w == std::vector<double>{1.0, -2.0});

    // f(w) = w^2 / 2 at w = 1: first bias-corrected step is lr * g / (|g| + eps)
    std::vector<double> x{1.0};
    AdamMoments s2;
    adamw_step(x, std::vector<double>{1.0}, s2, 1, cfg);
    CHECK(x[0] == doctest::Approx(1.0 - cfg.lr / (1.0 + cfg.eps)).epsilon(1e-15));
    CHECK(std::abs(x[0] - (1.0 - cfg.lr)) < 1e-12);

    CHECK_THROWS_AS(adamw_step(x, std::vector<double>{1.0, 2.0}, s2, 2, cfg), ContractError);

    AdamWConfig defaults;
    CHECK(defaults.lr == 1e-5);
    CHECK(defaults.beta1 == 0.9);
    CHECK(defaults.beta2 == 0.999);
    CHECK(defaults.eps == 1e-8);
    CHECK(defaults.weight_decay == 0.01);
}

TEST_CASE("distill config defaults and validation") {
    DistillConfig c;
    CHECK(c.lambda == 0.05);
    CHECK(c.M == 2);
    CHECK(c.beta == 0.01);
    CHECK(c.lr_student == 1e-5);
    CHECK(c.batch_size == 16);
    CHECK(c.sampling.temperature == 1.0);
    CHECK(c.sampling.top_k == 0);
    CHECK(c.sampling.top_p == 1.0);
    CHECK(c.sar_kl_direction == KlDirection::Forward);
    c.lambda = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.M = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(parse_method("dpo"), ConfigError);
}

TEST_CASE("sar_loss composes KL and the balance term") {
    LanguageModel teacher(small_teacher(), 7);
    auto batch = golden_batch(corpus(3));
    Tensor teacher_lp;
    ForwardResult res;
    {
        NoGradGuard guard;
        ForwardOptions fo;
        fo.collect_gates = true;
        res = teacher.forward(batch.tokens, RoutingMode::all(), fo);
        teacher_lp = ops::log_softmax(res.logits);
    }
    // beta = 0 and a student equal to the teacher
    CHECK(sar_loss(teacher, teacher_lp, batch, 0.0, KlDirection::Forward, nullptr).total.item() ==
          doctest::Approx(0.0).epsilon(1e-12));

    LanguageModel student(small_student(), 8);
    Tensor student_lp;
    {
        NoGradGuard guard;
        student_lp = ops::log_softmax(student.forward(batch.tokens, RoutingMode::all()).logits);
    }
    auto sar = sar_loss(teacher, student_lp, batch, 0.01, KlDirection::Forward, nullptr);

    // independent composition from explicit distributions and load records
    double kl_total = 0.0;
    std::size_t rows_used = 0;
    double lb = 0.0;
    for (const auto& g : res.gates) lb += load_balance_loss(g.load);
    for (std::size_t b = 0; b < batch.tokens.size(); ++b) {
        auto p = token_distributions(teacher, batch.tokens[b], RoutingMode::all());
        auto q = token_distributions(student, batch.tokens[b], RoutingMode::all());
        std::vector<std::uint8_t> mask(p.size(), 0);
        for (std::size_t t = 0; t + 1 < p.size(); ++t) mask[t] = batch.response_mask[b][t + 1];
        const std::size_t n = std::count(mask.begin(), mask.end(), 1);
        kl_total += forward_kl(p, q, mask) * static_cast<double>(n);
        rows_used += n;
    }
    const double expected = kl_total / static_cast<double>(rows_used) + 0.01 * lb;
    CHECK(std::abs(sar.total.item() - expected) <= 1e-12);
    CHECK(std::abs(sar.lb - lb) <= 1e-12);
}

TEST_CASE("sar_loss router gradient with frozen noise") {
    LanguageModel teacher(small_teacher(), 9);
    for (auto& b : teacher.blocks) {
        Rng r(3);
        for (double& w : b.moe->router.w_noise.mutable_data()) w = 0.2 * r.normal();
    }
    teacher.set_requires_grad(false);
    auto batch = golden_batch(corpus(2));
    LanguageModel student(small_student(), 10);
    Tensor student_lp;
    std::size_t seq = 0;
    {
        NoGradGuard guard;
        auto res = student.forward(batch.tokens, RoutingMode::all());
        seq = res.seq;
        student_lp = ops::log_softmax(res.logits);
    }
    Rng noise_rng(12);
    std::vector<Tensor> noise;
    for (std::size_t l = 0; l < 2; ++l) noise.push_back(draw_gate_noise(batch.tokens.size() * seq, 4, noise_rng));

    for (auto direction : {KlDirection::Forward, KlDirection::Reverse}) {
        for (std::size_t layer = 0; layer < 2; ++layer) {
            auto wg = teacher.blocks[layer].moe->router.w_gate.clone().set_requires_grad(true);
            auto wn = teacher.blocks[layer].moe->router.w_noise.clone().set_requires_grad(true);
            auto fn = [&](const std::vector<Tensor>& in) {
                LanguageModel probe = teacher;
                probe.blocks[layer].moe->router = RouterParams{in[0], in[1]};
                return sar_loss(probe, student_lp, batch, 0.01, direction, nullptr, &noise).total;
            };
            CHECK(max_gradient_error(fn, {wg, wn}) < 1e-4);
        }
    }
}

TEST_CASE("KA with M=1 and lambda=0 reproduces GKD on N-1 experts") {
    LanguageModel teacher(small_teacher(), 13);
    auto data = corpus();
    RunContext ctx;
    ctx.train = &data;

    auto ka_cfg = quick(Method::Ka);
    ka_cfg.M = 1;
    ka_cfg.lambda = 0.0;
    auto gkd_cfg = quick(Method::Gkd);
    gkd_cfg.teacher_k = 3;

    LanguageModel s1(small_student(), 14), s2(small_student(), 14);
    auto a = run_ka(teacher, s1, ka_cfg, ctx, 21);
    auto b = run_baseline(&teacher, s2, gkd_cfg, ctx, 21);
    CHECK(losses(a) == losses(b));
    CHECK(checksums(s1) == checksums(s2));
}

TEST_CASE("KA performs M updates per outer step and leaves the teacher alone") {
    LanguageModel teacher(small_teacher(), 15);
    const auto before = checksums(teacher);
    auto data = corpus();
    RunContext ctx;
    ctx.train = &data;
    LanguageModel student(small_student(), 16);
    auto cfg = quick(Method::Ka);
    cfg.lambda = 0.5;
    auto r = run_ka(teacher, student, cfg, ctx, 22);
    CHECK(r.outer_steps == 3);
    CHECK(r.student_updates == 6);
    CHECK(r.history.size() == 6);
    CHECK(checksums(teacher) == before);
}

TEST_CASE("SAR with a frozen router reproduces ALL") {
    LanguageModel t1(small_teacher(), 17);
    LanguageModel t2 = t1.clone();
    auto data = corpus();
    RunContext ctx;
    ctx.train = &data;
    auto sar_cfg = quick(Method::Sar);
    sar_cfg.lr_router = 0.0;
    LanguageModel s1(small_student(), 18), s2(small_student(), 18);
    auto a = run_sar(t1, s1, sar_cfg, ctx, 23);
    auto b = run_baseline(&t2, s2, quick(Method::All), ctx, 23);
    CHECK(losses(a) == losses(b));
    CHECK(checksums(s1) == checksums(s2));
    CHECK(checksums(t1) == checksums(t2));
}

TEST_CASE("SAR mutates exactly the router") {
    LanguageModel teacher(small_teacher(), 19);
    const auto before = checksums(teacher);
    auto data = corpus();
    RunContext ctx;
    ctx.train = &data;
    LanguageModel student(small_student(), 20);
    auto r = run_sar(teacher, student, quick(Method::Sar), ctx, 24);
    const auto after = checksums(teacher);
    for (const auto& [name, sum] : before) {
        const bool router = name.find(".router.") != std::string::npos;
        if (router) {
            CHECK_MESSAGE(after.at(name) != sum, name);
        } else {
            CHECK_MESSAGE(after.at(name) == sum, name);
        }
    }
    for (const auto& s : r.history) CHECK(s.router_grad_norm > 0.0);
    // flags restored
    for (const auto& p : teacher.parameters()) CHECK(p.tensor.requires_grad());
}

TEST_CASE("baselines") {
    auto data = corpus();
    RunContext ctx;
    ctx.train = &data;
    LanguageModel student(small_student(), 25);
    CHECK_THROWS_AS(run_baseline(nullptr, student, quick(Method::Kd), ctx, 1), ContractError);

    // a teacher identical to the student gives zero distillation loss at the start
    LanguageModel twin = student.clone();
    auto cfg = quick(Method::Kd);
    cfg.steps = 1;
    auto r = run_baseline(&twin, student, cfg, ctx, 2);
    CHECK(std::abs(r.history[0].loss) <= 1e-12);

    // with k = N the gkd teacher is the all-experts teacher
    auto tcfg = small_teacher();
    tcfg.moe->k = 4;
    LanguageModel teacher(tcfg, 26);
    LanguageModel s1(small_student(), 27), s2(small_student(), 27);
    auto g = run_baseline(&teacher, s1, quick(Method::Gkd), ctx, 3);
    auto a = run_baseline(&teacher, s2, quick(Method::All), ctx, 3);
    CHECK(losses(g) == losses(a));
}

TEST_CASE("runs are seed-deterministic") {
    auto data = corpus();
    RunContext ctx;
    ctx.train = &data;
    for (Method m : {Method::Sft, Method::Kd, Method::Gkd, Method::All, Method::Ka, Method::Sar}) {
        LanguageModel t1(small_teacher(), 30), t2(small_teacher(), 30);
        LanguageModel s1(small_student(), 31), s2(small_student(), 31);
        auto a = run_distill(&t1, s1, quick(m), ctx, 40);
        auto b = run_distill(&t2, s2, quick(m), ctx, 40);
        CHECK(losses(a) == losses(b));
        CHECK(checksums(s1) == checksums(s2));
        CHECK(checksums(t1) == checksums(t2));
    }
}

TEST_CASE("pretraining lowers the loss") {
    auto data = corpus(60);
    LanguageModel teacher(small_teacher(), 32);
    PretrainConfig cfg;
    cfg.steps = 60;
    cfg.batch_size = 8;
    cfg.warmup = 5;
    auto r = pretrain(teacher, data, cfg, 5);
    CHECK(r.last_loss < r.first_loss);
    const double acc = response_token_accuracy(teacher, data, RoutingMode::top_k(2));
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
}
