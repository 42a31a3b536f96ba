#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/model.hpp"
#include "moelab/moe.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// ---- objectives over explicit distributions -------------------------------

// Mean over masked positions of sum_v p (log p - log q), with 0 log 0 = 0.
double forward_kl(const std::vector<TokenDistribution>& p, const std::vector<TokenDistribution>& q,
                  const std::vector<std::uint8_t>& mask);
// Same argument order as forward_kl, opposite direction: sum_v q (log q - log p).
double reverse_kl(const std::vector<TokenDistribution>& p, const std::vector<TokenDistribution>& q,
                  const std::vector<std::uint8_t>& mask);

// ---- knowledge augmentation -------------------------------------------------

// With probability lambda, `count` distinct experts drawn one at a time from
// softmax(logits), renormalising after each removal; otherwise the top
// `count` by logit. Returned ascending.
std::vector<std::size_t> ka_select(std::span<const double> logits, double lambda, std::size_t count, Rng& rng);

// Softmax over the logits restricted to `experts`.
GateDecision ka_gate(std::span<const double> logits, const std::vector<std::size_t>& experts);

// Routing mode drawing a fresh ka_select for every token and layer.
RoutingMode ka_routing(double lambda, std::size_t count, Rng& rng);

// ---- optimiser --------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamMoments {
    std::vector<double> m, v;
};

// One decoupled-weight-decay Adam update with bias correction. `step` is the
// 1-based update count.
void adamw_step(std::span<double> params, std::span<const double> grads, AdamMoments& state, std::size_t step,
                const AdamWConfig& config);

// AdamW over a fixed parameter list, reading each tensor's grad slot.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig config);
    void step();
    std::size_t steps() const { return step_; }
    const AdamWConfig& config() const { return config_; }
    AdamWConfig& mutable_config() { return config_; }

private:
    std::vector<Tensor> params_;
    std::vector<AdamMoments> state_;
    AdamWConfig config_;
    std::size_t step_ = 0;
};

// Global L2 norm of the grads of `params` (missing grads count as zero).
double grad_norm(const std::vector<Tensor>& params);
// Scales grads so their global norm is at most max_norm; returns the norm
// before scaling.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

// ---- runs -------------------------------------------------------------------

enum class Method { Sft, Kd, Gkd, All, Ka, Sar };
Method parse_method(const std::string& name);
std::string method_name(Method m);
bool needs_teacher(Method m);

enum class KlDirection { Forward, Reverse };
KlDirection parse_kl_direction(const std::string& name);
std::string kl_direction_name(KlDirection d);

struct DistillConfig {
    Method method = Method::Ka;
    double lambda = 0.05;
    std::size_t M = 2;
    double beta = 0.01;
    double lr_student = 1e-5;
    double lr_router = 1e-5;
    std::size_t steps = 100;      // outer steps
    std::size_t batch_size = 16;
    std::size_t ka_expert_count = 0;  // 0 = N - 1
    std::size_t teacher_k = 0;        // 0 = the teacher's own k (kd, gkd)
    std::size_t max_response = 16;
    SamplingConfig sampling;          // student pseudo-target sampling
    KlDirection sar_kl_direction = KlDirection::Forward;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
    double grad_clip = 0.0;           // 0 disables
    std::size_t probe_size = 16;      // fixed held-out batch for loss probes

    void validate() const;
};

// One optimisation step of a run. For KA each student update is a step.
struct StepRecord {
    std::size_t step = 0;
    std::string method;
    double loss = 0.0;
    double kl = 0.0;
    double lb_loss = 0.0;
    double router_grad_norm = 0.0;
    std::optional<double> wall_ms;  // only filled when timing is requested
};

struct DistillResult {
    std::vector<StepRecord> history;
    std::size_t outer_steps = 0;
    std::size_t student_updates = 0;
    double probe_start = 0.0;  // the method's objective on the probe batch
    double probe_end = 0.0;
    double sar_probe_start = 0.0;  // SAR router objective on the probe batch
    double sar_probe_end = 0.0;
};

// Independent random streams of a run, all derived from one seed so that
// consuming one never shifts another.
struct RunStreams {
    explicit RunStreams(std::uint64_t seed);
    Rng data;      // request batches
    Rng sampling;  // student pseudo-targets
    Rng ka;        // expert-set draws
    Rng noise;     // gate noise
};

struct RunContext {
    const std::vector<EncodedExample>* train = nullptr;
    const std::vector<EncodedExample>* probe = nullptr;  // optional; defaults to the first train examples
    bool timing = false;
    // Called after every step; may be empty.
    std::function<void(const StepRecord&)> on_step;
};

// Dispatches on cfg.method. `teacher` is required for every method except
// sft; SAR updates the teacher's router in place.
DistillResult run_distill(LanguageModel* teacher, LanguageModel& student, const DistillConfig& cfg,
                          const RunContext& ctx, std::uint64_t seed);
DistillResult run_baseline(const LanguageModel* teacher, LanguageModel& student, const DistillConfig& cfg,
                           const RunContext& ctx, std::uint64_t seed);
DistillResult run_ka(const LanguageModel& teacher, LanguageModel& student, const DistillConfig& cfg,
                     const RunContext& ctx, std::uint64_t seed);
DistillResult run_sar(LanguageModel& teacher, LanguageModel& student, const DistillConfig& cfg, const RunContext& ctx,
                      std::uint64_t seed);

// ---- batched objectives -----------------------------------------------------

// Sequences with a per-token response mask, right-padded when forwarded.
struct SequenceBatch {
    std::vector<std::vector<int>> tokens;
    std::vector<std::vector<std::uint8_t>> response_mask;
};

SequenceBatch golden_batch(const std::vector<EncodedExample>& examples);
// Prompts of `examples` followed by student samples (EOS kept when produced).
SequenceBatch sampled_batch(const LanguageModel& student, const std::vector<EncodedExample>& examples,
                            std::size_t max_response, const SamplingConfig& sampling, Rng& rng);

// Next-token training targets and the row mask selecting rows that predict a
// response token. Rows follow the forward layout (sequence * seq + position).
struct TargetRows {
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
};
TargetRows target_rows(const SequenceBatch& batch, std::size_t seq);

// Teacher log-probabilities as a constant.
Tensor teacher_log_probs(const LanguageModel& teacher, const SequenceBatch& batch, const RoutingMode& mode);

// Masked cross entropy of the model on the batch.
Tensor sft_loss(const LanguageModel& model, const SequenceBatch& batch);
// KL(teacher || student) or KL(student || teacher) with the teacher constant.
Tensor student_kl(const LanguageModel& student, const Tensor& teacher_lp, const SequenceBatch& batch,
                  KlDirection direction);

// KL between teacher (noisy when noise_rng is set, all experts, gradient only
// into the router) and the constant student distribution, plus beta times
// the summed load-balance loss.
struct SarLoss {
    Tensor total;
    double kl = 0.0;
    double lb = 0.0;
};
SarLoss sar_loss(const LanguageModel& teacher, const Tensor& student_lp, const SequenceBatch& batch, double beta,
                 KlDirection direction, Rng* noise_rng, const std::vector<Tensor>* frozen_noise = nullptr);

// ---- pretraining ------------------------------------------------------------

struct PretrainConfig {
    std::size_t steps = 1000;
    std::size_t batch_size = 16;
    double lr = 3e-3;
    double lb_coef = 0.01;   // load-balance coefficient for MoE models
    bool noisy = true;       // noisy top-k for MoE models
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    std::size_t warmup = 50;
};

struct PretrainResult {
    std::vector<StepRecord> history;
    double first_loss = 0.0;
    double last_loss = 0.0;
};

// Response-masked next-token training; the routing mode is top-k at the
// model's own k.
PretrainResult pretrain(LanguageModel& model, const std::vector<EncodedExample>& train, const PretrainConfig& cfg,
                        std::uint64_t seed, const RunContext& ctx = {});

// Fraction of response tokens (incl. EOS) whose teacher-forced argmax is the
// target.
double response_token_accuracy(const LanguageModel& model, const std::vector<EncodedExample>& examples,
                               const RoutingMode& mode, std::size_t batch_size = 32);

}  // namespace moelab
