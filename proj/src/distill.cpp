#include "moelab/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "moelab/errors.hpp"
#include "moelab/ops.hpp"

namespace moelab {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double kl_sum(const std::vector<TokenDistribution>& a, const std::vector<TokenDistribution>& b,
              const std::vector<std::uint8_t>& mask) {
    if (a.size() != b.size() || a.size() != mask.size()) throw ContractError("KL: sequence lengths differ");
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < a.size(); ++t) {
        if (!mask[t]) continue;
        const auto& pa = a[t].probs;
        const auto& pb = b[t].probs;
        if (pa.size() != pb.size()) throw ContractError("KL: distribution widths differ");
        double s = 0.0;
        for (std::size_t v = 0; v < pa.size(); ++v) {
            if (pa[v] > 0.0) s += pa[v] * (std::log(pa[v]) - std::log(pb[v]));
        }
        total += s;
        ++count;
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

std::vector<Tensor> tensors_of(const std::vector<NamedParameter>& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.tensor);
    return out;
}

AdamWConfig student_optimizer(const DistillConfig& cfg, double lr) {
    return AdamWConfig{lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
}

std::vector<EncodedExample> draw_examples(const std::vector<EncodedExample>& train, std::size_t n, Rng& rng) {
    std::vector<EncodedExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(train[rng.below(train.size())]);
    return out;
}

std::vector<EncodedExample> probe_examples(const RunContext& ctx, std::size_t size) {
    if (ctx.probe && !ctx.probe->empty()) return *ctx.probe;
    const auto& train = *ctx.train;
    return {train.begin(), train.begin() + static_cast<std::ptrdiff_t>(std::min(size, train.size()))};
}

void check_context(const RunContext& ctx) {
    if (!ctx.train || ctx.train->empty()) throw ContractError("distill: empty training set");
}

// Records a step, timing it when requested.
class StepClock {
public:
    explicit StepClock(const RunContext& ctx) : ctx_(ctx) { reset(); }
    void reset() { start_ = std::chrono::steady_clock::now(); }
    void emit(StepRecord rec, std::vector<StepRecord>& history) {
        if (ctx_.timing) {
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
        }
        if (ctx_.on_step) ctx_.on_step(rec);
        history.push_back(std::move(rec));
        reset();
    }

private:
    const RunContext& ctx_;
    std::chrono::steady_clock::time_point start_;
};

void student_update(LanguageModel& student, AdamW& opt, const Tensor& loss, double clip) {
    student.zero_grad();
    loss.backward();
    if (clip > 0.0) clip_grad_norm(tensors_of(student.parameters()), clip);
    opt.step();
}

std::size_t resolve_ka_count(const LanguageModel& teacher, const DistillConfig& cfg) {
    const std::size_t n = teacher.config().moe->n_experts;
    const std::size_t count = cfg.ka_expert_count == 0 ? n - 1 : cfg.ka_expert_count;
    if (count < 1 || count > n) throw ContractError("KA: expert count must lie in [1, N]");
    return count;
}

RoutingMode baseline_teacher_mode(const LanguageModel& teacher, const DistillConfig& cfg) {
    if (cfg.method == Method::All || cfg.method == Method::Sar) return RoutingMode::all();
    if (!teacher.has_moe()) return RoutingMode::all();
    const std::size_t k = cfg.teacher_k == 0 ? teacher.config().moe->k : cfg.teacher_k;
    if (k < 1 || k > teacher.config().moe->n_experts) throw ContractError("teacher_k must lie in [1, N]");
    return RoutingMode::top_k(k);
}

// The method's objective on golden responses of the probe batch.
double probe_objective(const LanguageModel* teacher, const LanguageModel& student, const DistillConfig& cfg,
                       const SequenceBatch& probe) {
    NoGradGuard guard;
    switch (cfg.method) {
        case Method::Sft:
            return sft_loss(student, probe).item();
        case Method::Kd:
            return student_kl(student, teacher_log_probs(*teacher, probe, baseline_teacher_mode(*teacher, cfg)), probe,
                              KlDirection::Forward)
                .item();
        case Method::Ka: {
            auto mode = RoutingMode::top_k(resolve_ka_count(*teacher, cfg));
            return student_kl(student, teacher_log_probs(*teacher, probe, mode), probe, KlDirection::Reverse).item();
        }
        default:
            return student_kl(student, teacher_log_probs(*teacher, probe, baseline_teacher_mode(*teacher, cfg)), probe,
                              KlDirection::Reverse)
                .item();
    }
}

double sar_probe(const LanguageModel& teacher, const LanguageModel& student, const DistillConfig& cfg,
                 const SequenceBatch& probe) {
    NoGradGuard guard;
    auto student_lp = ops::log_softmax(student.forward(probe.tokens, RoutingMode::all()).logits);
    return sar_loss(teacher, student_lp, probe, cfg.beta, cfg.sar_kl_direction, nullptr).total.item();
}

}  // namespace

double forward_kl(const std::vector<TokenDistribution>& p, const std::vector<TokenDistribution>& q,
                  const std::vector<std::uint8_t>& mask) {
    return kl_sum(p, q, mask);
}

double reverse_kl(const std::vector<TokenDistribution>& p, const std::vector<TokenDistribution>& q,
                  const std::vector<std::uint8_t>& mask) {
    return kl_sum(q, p, mask);
}

std::vector<std::size_t> ka_select(std::span<const double> logits, double lambda, std::size_t count, Rng& rng) {
    const std::size_t n = logits.size();
    if (count < 1 || count > n) throw ContractError("ka_select: count must lie in [1, N]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("ka_select: lambda must lie in [0, 1]");
    std::vector<std::size_t> chosen;
    if (rng.bernoulli(lambda)) {
        const double peak = *std::max_element(logits.begin(), logits.end());
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(logits[i] - peak);
        for (std::size_t draw = 0; draw < count; ++draw) {
            double remaining = 0.0;
            for (double x : w) remaining += x;
            std::size_t pick;
            if (remaining > 0.0) {
                pick = rng.categorical(w);
            } else {
                // every remaining weight underflowed; fall back to the best logit left
                pick = n;
                for (std::size_t i = 0; i < n; ++i) {
                    if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
                    if (pick == n || logits[i] > logits[pick]) pick = i;
                }
            }
            chosen.push_back(pick);
            w[pick] = 0.0;
        }
    } else {
        chosen = top_k_indices(logits, count);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

GateDecision ka_gate(std::span<const double> logits, const std::vector<std::size_t>& experts) {
    if (experts.empty()) throw ContractError("ka_gate: empty expert set");
    std::vector<double> mask(logits.size(), -std::numeric_limits<double>::infinity());
    for (std::size_t e : experts) {
        if (e >= logits.size()) throw ContractError("ka_gate: expert index out of range");
        mask[e] = 0.0;
    }
    return gate_probs(logits, mask);
}

RoutingMode ka_routing(double lambda, std::size_t count, Rng& rng) {
    Rng* source = &rng;
    return RoutingMode::selected(
        [lambda, count, source](std::size_t, std::size_t, std::span<const double> logits) {
            return ka_select(logits, lambda, count, *source);
        },
        "ka");
}

void adamw_step(std::span<double> params, std::span<const double> grads, AdamMoments& state, std::size_t step,
                const AdamWConfig& c) {
    if (grads.size() != params.size()) throw ContractError("adamw: gradient length differs from parameters");
    if (state.m.empty() && state.v.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ContractError("adamw: optimiser state length differs from parameters");
    }
    if (step == 0) throw ContractError("adamw: step count is 1-based");
    const double t = static_cast<double>(step);
    const double correct1 = 1.0 - std::pow(c.beta1, t);
    const double correct2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grads[i];
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
        const double m_hat = state.m[i] / correct1;
        const double v_hat = state.v[i] / correct2;
        params[i] -= c.lr * (m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * params[i]);
    }
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : params_(std::move(params)), state_(params_.size()), config_(config) {}

void AdamW::step() {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto g = params_[i].grad();
        adamw_step(params_[i].mutable_data(), g, state_[i], step_, config_);
    }
}

double grad_norm(const std::vector<Tensor>& params) {
    double s = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) s += g * g;
    }
    return std::sqrt(s);
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
    const double norm = grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const double factor = max_norm / norm;
        for (auto p : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.mutable_grad()) g *= factor;
        }
    }
    return norm;
}

Method parse_method(const std::string& name) {
    if (name == "sft") return Method::Sft;
    if (name == "kd") return Method::Kd;
    if (name == "gkd") return Method::Gkd;
    if (name == "all") return Method::All;
    if (name == "ka") return Method::Ka;
    if (name == "sar") return Method::Sar;
    throw ConfigError("unknown method '" + name + "' (sft, kd, gkd, all, ka, sar)");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Sft: return "sft";
        case Method::Kd: return "kd";
        case Method::Gkd: return "gkd";
        case Method::All: return "all";
        case Method::Ka: return "ka";
        case Method::Sar: return "sar";
    }
    return "?";
}

bool needs_teacher(Method m) { return m != Method::Sft; }

KlDirection parse_kl_direction(const std::string& name) {
    if (name == "forward") return KlDirection::Forward;
    if (name == "reverse") return KlDirection::Reverse;
    throw ConfigError("unknown KL direction '" + name + "' (forward, reverse)");
}

std::string kl_direction_name(KlDirection d) { return d == KlDirection::Forward ? "forward" : "reverse"; }

void DistillConfig::validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (M < 1) throw ConfigError("M must be at least 1");
    if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
    if (!(lr_student >= 0.0) || !(lr_router >= 0.0)) throw ConfigError("learning rates must be nonnegative");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (max_response < 1) throw ConfigError("max_response must be at least 1");
    if (!(sampling.temperature > 0.0) && !sampling.greedy) throw ConfigError("sampling temperature must be positive");
    if (!(sampling.top_p > 0.0 && sampling.top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be nonnegative");
}

RunStreams::RunStreams(std::uint64_t seed)
    : data(splitmix(seed ^ 0x1)), sampling(splitmix(seed ^ 0x2)), ka(splitmix(seed ^ 0x3)), noise(splitmix(seed ^ 0x4)) {}

SequenceBatch golden_batch(const std::vector<EncodedExample>& examples) {
    SequenceBatch b;
    for (const auto& ex : examples) {
        b.tokens.push_back(ex.tokens);
        b.response_mask.push_back(ex.response_mask);
    }
    return b;
}

SequenceBatch sampled_batch(const LanguageModel& student, const std::vector<EncodedExample>& examples,
                            std::size_t max_response, const SamplingConfig& sampling, Rng& rng) {
    std::vector<std::vector<int>> prompts;
    prompts.reserve(examples.size());
    for (const auto& ex : examples) prompts.push_back(ex.prompt());
    auto generated = sample_batch(student, prompts, max_response, sampling, rng);
    SequenceBatch b;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        std::vector<int> seq = prompts[i];
        seq.insert(seq.end(), generated[i].begin(), generated[i].end());
        std::vector<std::uint8_t> mask(seq.size(), 0);
        std::fill(mask.begin() + static_cast<std::ptrdiff_t>(prompts[i].size()), mask.end(), 1);
        b.tokens.push_back(std::move(seq));
        b.response_mask.push_back(std::move(mask));
    }
    return b;
}

TargetRows target_rows(const SequenceBatch& batch, std::size_t seq) {
    TargetRows r;
    r.targets.assign(batch.tokens.size() * seq, 0);
    r.mask.assign(batch.tokens.size() * seq, 0);
    for (std::size_t b = 0; b < batch.tokens.size(); ++b) {
        const auto& toks = batch.tokens[b];
        const auto& m = batch.response_mask[b];
        if (m.size() != toks.size()) throw ContractError("batch: mask length differs from tokens");
        for (std::size_t t = 0; t + 1 < toks.size(); ++t) {
            r.targets[b * seq + t] = toks[t + 1];
            r.mask[b * seq + t] = m[t + 1];
        }
    }
    return r;
}

Tensor teacher_log_probs(const LanguageModel& teacher, const SequenceBatch& batch, const RoutingMode& mode) {
    NoGradGuard guard;
    return ops::log_softmax(teacher.forward(batch.tokens, mode).logits);
}

Tensor sft_loss(const LanguageModel& model, const SequenceBatch& batch) {
    auto res = model.forward(batch.tokens, RoutingMode::all());
    auto rows = target_rows(batch, res.seq);
    return ops::cross_entropy(res.logits, rows.targets, rows.mask);
}

Tensor student_kl(const LanguageModel& student, const Tensor& teacher_lp, const SequenceBatch& batch,
                  KlDirection direction) {
    auto res = student.forward(batch.tokens, RoutingMode::all());
    auto rows = target_rows(batch, res.seq);
    auto student_lp = ops::log_softmax(res.logits);
    return direction == KlDirection::Forward ? ops::kl_rows(teacher_lp, student_lp, rows.mask)
                                             : ops::kl_rows(student_lp, teacher_lp, rows.mask);
}

SarLoss sar_loss(const LanguageModel& teacher, const Tensor& student_lp, const SequenceBatch& batch, double beta,
                 KlDirection direction, Rng* noise_rng, const std::vector<Tensor>* frozen_noise) {
    ForwardOptions opt;
    opt.noisy = noise_rng != nullptr || frozen_noise != nullptr;
    opt.noise_rng = noise_rng;
    opt.frozen_noise = frozen_noise;
    auto res = teacher.forward(batch.tokens, RoutingMode::all(), opt);
    auto rows = target_rows(batch, res.seq);
    auto teacher_lp = ops::log_softmax(res.logits);
    auto student_const = student_lp.detach();
    auto kl = direction == KlDirection::Forward ? ops::kl_rows(teacher_lp, student_const, rows.mask)
                                                : ops::kl_rows(student_const, teacher_lp, rows.mask);
    SarLoss out;
    out.kl = kl.item();
    out.lb = res.lb_loss.item();
    out.total = ops::add(kl, ops::scale(res.lb_loss, beta));
    return out;
}

DistillResult run_distill(LanguageModel* teacher, LanguageModel& student, const DistillConfig& cfg,
                          const RunContext& ctx, std::uint64_t seed) {
    switch (cfg.method) {
        case Method::Ka:
            if (!teacher) throw ContractError("ka requires a teacher");
            return run_ka(*teacher, student, cfg, ctx, seed);
        case Method::Sar:
            if (!teacher) throw ContractError("sar requires a teacher");
            return run_sar(*teacher, student, cfg, ctx, seed);
        default:
            return run_baseline(teacher, student, cfg, ctx, seed);
    }
}

DistillResult run_baseline(const LanguageModel* teacher, LanguageModel& student, const DistillConfig& cfg,
                           const RunContext& ctx, std::uint64_t seed) {
    cfg.validate();
    check_context(ctx);
    if (cfg.method == Method::Ka || cfg.method == Method::Sar) throw ContractError("run_baseline: not a baseline method");
    if (needs_teacher(cfg.method) && !teacher) throw ContractError(method_name(cfg.method) + " requires a teacher");
    RunStreams streams(seed);
    AdamW opt(tensors_of(student.parameters()), student_optimizer(cfg, cfg.lr_student));
    const auto probe = golden_batch(probe_examples(ctx, cfg.probe_size));
    const std::optional<RoutingMode> mode =
        teacher ? std::optional<RoutingMode>(baseline_teacher_mode(*teacher, cfg)) : std::nullopt;

    DistillResult result;
    result.probe_start = probe_objective(teacher, student, cfg, probe);
    StepClock clock(ctx);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto examples = draw_examples(*ctx.train, cfg.batch_size, streams.data);
        Tensor loss;
        double kl = 0.0;
        if (cfg.method == Method::Sft) {
            loss = sft_loss(student, golden_batch(examples));
        } else if (cfg.method == Method::Kd) {
            auto batch = golden_batch(examples);
            loss = student_kl(student, teacher_log_probs(*teacher, batch, *mode), batch, KlDirection::Forward);
            kl = loss.item();
        } else {
            auto batch = sampled_batch(student, examples, cfg.max_response, cfg.sampling, streams.sampling);
            loss = student_kl(student, teacher_log_probs(*teacher, batch, *mode), batch, KlDirection::Reverse);
            kl = loss.item();
        }
        student_update(student, opt, loss, cfg.grad_clip);
        ++result.student_updates;
        clock.emit(StepRecord{step, method_name(cfg.method), loss.item(), kl, 0.0, 0.0, std::nullopt}, result.history);
    }
    result.outer_steps = cfg.steps;
    result.probe_end = probe_objective(teacher, student, cfg, probe);
    return result;
}

DistillResult run_ka(const LanguageModel& teacher, LanguageModel& student, const DistillConfig& cfg,
                     const RunContext& ctx, std::uint64_t seed) {
    cfg.validate();
    check_context(ctx);
    if (!teacher.has_moe()) throw ContractError("ka requires an MoE teacher");
    RunStreams streams(seed);
    AdamW opt(tensors_of(student.parameters()), student_optimizer(cfg, cfg.lr_student));
    const auto probe = golden_batch(probe_examples(ctx, cfg.probe_size));
    const auto mode = ka_routing(cfg.lambda, resolve_ka_count(teacher, cfg), streams.ka);

    DistillResult result;
    result.probe_start = probe_objective(&teacher, student, cfg, probe);
    StepClock clock(ctx);
    for (std::size_t outer = 0; outer < cfg.steps; ++outer) {
        auto examples = draw_examples(*ctx.train, cfg.batch_size, streams.data);
        // one pseudo-target reused across the M augmented teacher passes
        auto batch = sampled_batch(student, examples, cfg.max_response, cfg.sampling, streams.sampling);
        for (std::size_t m = 0; m < cfg.M; ++m) {
            auto loss = student_kl(student, teacher_log_probs(teacher, batch, mode), batch, KlDirection::Reverse);
            student_update(student, opt, loss, cfg.grad_clip);
            const double value = loss.item();
            clock.emit(StepRecord{result.student_updates, "ka", value, value, 0.0, 0.0, std::nullopt}, result.history);
            ++result.student_updates;
        }
    }
    result.outer_steps = cfg.steps;
    result.probe_end = probe_objective(&teacher, student, cfg, probe);
    return result;
}

DistillResult run_sar(LanguageModel& teacher, LanguageModel& student, const DistillConfig& cfg, const RunContext& ctx,
                      std::uint64_t seed) {
    cfg.validate();
    check_context(ctx);
    if (!teacher.has_moe()) throw ContractError("sar requires an MoE teacher");
    RunStreams streams(seed);
    AdamW opt(tensors_of(student.parameters()), student_optimizer(cfg, cfg.lr_student));
    const auto router = tensors_of(teacher.router_parameters());
    AdamW router_opt(router, student_optimizer(cfg, cfg.lr_router));
    const auto probe = golden_batch(probe_examples(ctx, cfg.probe_size));

    // only the router takes gradient during the run
    std::vector<std::pair<Tensor, bool>> saved;
    for (const auto& p : teacher.parameters()) saved.emplace_back(p.tensor, p.tensor.requires_grad());
    teacher.set_requires_grad(false);
    for (auto t : router) t.set_requires_grad(true);

    DistillResult result;
    result.probe_start = probe_objective(&teacher, student, cfg, probe);
    result.sar_probe_start = sar_probe(teacher, student, cfg, probe);
    StepClock clock(ctx);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto examples = draw_examples(*ctx.train, cfg.batch_size, streams.data);
        auto batch = sampled_batch(student, examples, cfg.max_response, cfg.sampling, streams.sampling);

        // router update against the student's current distribution
        Tensor student_lp;
        {
            NoGradGuard guard;
            student_lp = ops::log_softmax(student.forward(batch.tokens, RoutingMode::all()).logits);
        }
        for (auto t : router) t.zero_grad();
        auto sar = sar_loss(teacher, student_lp, batch, cfg.beta, cfg.sar_kl_direction, &streams.noise);
        sar.total.backward();
        const double router_norm = grad_norm(router);
        router_opt.step();

        // knowledge transfer through the updated router, all experts, no noise
        auto loss = student_kl(student, teacher_log_probs(teacher, batch, RoutingMode::all()), batch,
                               KlDirection::Reverse);
        student_update(student, opt, loss, cfg.grad_clip);
        ++result.student_updates;
        const double value = loss.item();
        clock.emit(StepRecord{step, "sar", value, value, sar.lb, router_norm, std::nullopt}, result.history);
    }
    result.outer_steps = cfg.steps;
    result.probe_end = probe_objective(&teacher, student, cfg, probe);
    result.sar_probe_end = sar_probe(teacher, student, cfg, probe);
    for (auto& [t, flag] : saved) {
        t.zero_grad();
        t.set_requires_grad(flag);
    }
    return result;
}

PretrainResult pretrain(LanguageModel& model, const std::vector<EncodedExample>& train, const PretrainConfig& cfg,
                        std::uint64_t seed, const RunContext& ctx) {
    if (train.empty()) throw ContractError("pretrain: empty training set");
    if (cfg.batch_size < 1) throw ConfigError("pretrain batch_size must be at least 1");
    RunStreams streams(seed);
    const auto params = tensors_of(model.parameters());
    model.set_requires_grad(true);
    AdamW opt(params, AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    const RoutingMode mode = model.has_moe() ? RoutingMode::top_k(model.config().moe->k) : RoutingMode::all();
    ForwardOptions fo;
    fo.noisy = cfg.noisy && model.has_moe();
    fo.noise_rng = &streams.noise;

    PretrainResult result;
    StepClock clock(ctx);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        // linear warmup then cosine decay to a tenth of the peak
        double lr = cfg.lr;
        if (step < cfg.warmup) {
            lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
        } else if (cfg.steps > cfg.warmup) {
            const double progress = static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.steps - cfg.warmup);
            lr *= 0.1 + 0.45 * (1.0 + std::cos(progress * 3.14159265358979323846));
        }
        opt.mutable_config().lr = lr;

        auto batch = golden_batch(draw_examples(train, cfg.batch_size, streams.data));
        auto res = model.forward(batch.tokens, mode, fo);
        auto rows = target_rows(batch, res.seq);
        auto ce = ops::cross_entropy(res.logits, rows.targets, rows.mask);
        auto loss = model.has_moe() ? ops::add(ce, ops::scale(res.lb_loss, cfg.lb_coef)) : ce;
        model.zero_grad();
        loss.backward();
        if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
        opt.step();
        clock.emit(StepRecord{step, "pretrain", ce.item(), 0.0, res.lb_loss.item(), 0.0, std::nullopt}, result.history);
    }
    if (!result.history.empty()) {
        result.first_loss = result.history.front().loss;
        const std::size_t tail = std::max<std::size_t>(1, result.history.size() / 10);
        double s = 0.0;
        for (std::size_t i = result.history.size() - tail; i < result.history.size(); ++i) s += result.history[i].loss;
        result.last_loss = s / static_cast<double>(tail);
    }
    model.zero_grad();
    return result;
}

double response_token_accuracy(const LanguageModel& model, const std::vector<EncodedExample>& examples,
                               const RoutingMode& mode, std::size_t batch_size) {
    if (examples.empty()) throw ContractError("accuracy: no examples");
    NoGradGuard guard;
    std::size_t hit = 0, total = 0;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        const std::size_t end = std::min(examples.size(), start + batch_size);
        auto batch = golden_batch({examples.begin() + static_cast<std::ptrdiff_t>(start),
                                   examples.begin() + static_cast<std::ptrdiff_t>(end)});
        auto res = model.forward(batch.tokens, mode);
        auto rows = target_rows(batch, res.seq);
        const std::size_t v = res.logits.cols();
        auto logits = res.logits.data();
        for (std::size_t r = 0; r < rows.mask.size(); ++r) {
            if (!rows.mask[r]) continue;
            auto row = logits.subspan(r * v, v);
            const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            hit += best == rows.targets[r];
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace moelab
