#include "moelab/eval.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "moelab/errors.hpp"
#include "moelab/ops.hpp"

namespace moelab {

namespace {

std::vector<std::string> words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

std::vector<double> full_softmax(std::span<const double> logits) {
    const double peak = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(logits[i] - peak);
    for (double& x : p) x /= s;
    return p;
}

template <class Fn>
void for_batches(const std::vector<EncodedExample>& examples, std::size_t batch_size, Fn fn) {
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        const std::size_t end = std::min(examples.size(), start + batch_size);
        fn(golden_batch({examples.begin() + static_cast<std::ptrdiff_t>(start),
                         examples.begin() + static_cast<std::ptrdiff_t>(end)}));
    }
}

}  // namespace

RougeScore rouge_l(const std::string& candidate, const std::string& reference) {
    return rouge_l<char>(std::span<const char>(candidate.data(), candidate.size()),
                         std::span<const char>(reference.data(), reference.size()));
}

RougeScore rouge_l_words(const std::string& candidate, const std::string& reference) {
    const auto c = words(candidate), r = words(reference);
    return rouge_l<std::string>(c, r);
}

std::size_t evaluation_threads() {
    if (const char* env = std::getenv("MOELAB_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

GenerationReport evaluate_generation(const LanguageModel& model, const std::vector<EncodedExample>& examples,
                                     const RoutingMode& mode, std::size_t max_new, std::size_t threads) {
    if (examples.empty()) throw ContractError("evaluation: empty test set");
    constexpr std::size_t kChunk = 16;
    const std::size_t chunks = (examples.size() + kChunk - 1) / kChunk;
    const std::size_t workers = std::min(chunks, threads == 0 ? evaluation_threads() : threads);

    GenerationReport report;
    report.examples.resize(examples.size());
    auto work = [&](std::size_t first_chunk) {
        SamplingConfig greedy;
        greedy.greedy = true;
        Rng unused(0);
        for (std::size_t c = first_chunk; c < chunks; c += workers) {
            const std::size_t start = c * kChunk, end = std::min(examples.size(), start + kChunk);
            std::vector<std::vector<int>> prompts;
            for (std::size_t i = start; i < end; ++i) prompts.push_back(examples[i].prompt());
            auto out = sample_batch(model, prompts, max_new, greedy, unused, mode);
            for (std::size_t i = start; i < end; ++i) {
                auto& s = report.examples[i];
                s.request = decode(examples[i].prompt());
                s.reference = decode_response(examples[i].response());
                s.candidate = decode_response(out[i - start]);
                s.rouge = rouge_l(s.candidate, s.reference);
            }
        }
    };
    if (workers <= 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
    }
    double total = 0.0;
    for (const auto& s : report.examples) total += s.rouge.f;
    report.mean_f = total / static_cast<double>(examples.size());
    return report;
}

std::vector<LayerReport> activated_mass_report(const LanguageModel& teacher, const std::vector<EncodedExample>& examples,
                                               std::size_t k, std::size_t batch_size) {
    if (!teacher.has_moe()) throw ContractError("gate-mass report needs an MoE teacher");
    if (examples.empty()) throw ContractError("gate-mass report: no examples");
    NoGradGuard guard;
    const auto mode = RoutingMode::top_k(k);
    std::vector<LayerReport> reports;
    std::vector<double> sums;
    for_batches(examples, batch_size, [&](const SequenceBatch& batch) {
        ForwardOptions fo;
        fo.collect_gates = true;
        auto res = teacher.forward(batch.tokens, mode, fo);
        if (reports.empty()) {
            for (const auto& g : res.gates) reports.push_back(LayerReport{g.layer, 0.0, 0.0, 0});
            sums.assign(reports.size(), 0.0);
        }
        for (std::size_t l = 0; l < res.gates.size(); ++l) {
            for (std::size_t b = 0; b < batch.tokens.size(); ++b) {
                for (std::size_t t = 0; t < batch.tokens[b].size(); ++t) {
                    if (!batch.response_mask[b][t]) continue;
                    const auto& d = res.gates[l].decisions[res.row(b, t)];
                    const auto p = full_softmax(d.logits);
                    double mass = 0.0;
                    for (std::size_t e : d.selected) mass += p[e];
                    sums[l] += mass;
                    ++reports[l].tokens;
                }
            }
        }
    });
    for (std::size_t l = 0; l < reports.size(); ++l) {
        reports[l].activated_mass = reports[l].tokens ? sums[l] / static_cast<double>(reports[l].tokens) : 0.0;
        reports[l].nonactivated_mass = 1.0 - reports[l].activated_mass;
    }
    return reports;
}

std::vector<ShiftReport> router_shift_report(const LanguageModel& before, const LanguageModel& after,
                                             const std::vector<EncodedExample>& examples, std::size_t batch_size) {
    const auto& a = before.config();
    const auto& b = after.config();
    const bool same = a.vocab_size == b.vocab_size && a.d_model == b.d_model && a.n_layers == b.n_layers &&
                      a.n_heads == b.n_heads && a.d_ff == b.d_ff && a.max_seq_len == b.max_seq_len &&
                      a.moe.has_value() == b.moe.has_value() &&
                      (!a.moe || (a.moe->n_experts == b.moe->n_experts && a.moe->layers == b.moe->layers));
    if (!same) throw ContractError("router-shift report: teachers differ in architecture");
    if (!before.has_moe()) throw ContractError("router-shift report needs an MoE teacher");
    if (examples.empty()) throw ContractError("router-shift report: no examples");
    NoGradGuard guard;
    std::vector<ShiftReport> reports;
    std::vector<double> sums;
    for_batches(examples, batch_size, [&](const SequenceBatch& batch) {
        ForwardOptions fo;
        fo.collect_gates = true;
        auto ra = before.forward(batch.tokens, RoutingMode::all(), fo);
        auto rb = after.forward(batch.tokens, RoutingMode::all(), fo);
        if (reports.empty()) {
            for (const auto& g : ra.gates) reports.push_back(ShiftReport{g.layer, 0.0, 0.0, 0});
            sums.assign(reports.size(), 0.0);
        }
        for (std::size_t l = 0; l < ra.gates.size(); ++l) {
            for (std::size_t r = 0; r < ra.row_valid.size(); ++r) {
                if (!ra.row_valid[r]) continue;
                const auto p = full_softmax(ra.gates[l].decisions[r].logits);
                const auto q = full_softmax(rb.gates[l].decisions[r].logits);
                double kl = 0.0;
                for (std::size_t i = 0; i < p.size(); ++i) {
                    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
                }
                kl = std::max(kl, 0.0);  // rounding can leave -1e-17 for identical rows
                sums[l] += kl;
                reports[l].max_kl = std::max(reports[l].max_kl, kl);
                ++reports[l].tokens;
            }
        }
    });
    for (std::size_t l = 0; l < reports.size(); ++l) {
        reports[l].mean_kl = reports[l].tokens ? sums[l] / static_cast<double>(reports[l].tokens) : 0.0;
    }
    return reports;
}

std::vector<KSweepRow> k_sweep(const LanguageModel& teacher, const std::function<LanguageModel()>& make_student,
                               const std::vector<EncodedExample>& train, const std::vector<EncodedExample>& test,
                               const std::vector<std::size_t>& ks, const KSweepConfig& cfg) {
    if (!teacher.has_moe()) throw ContractError("k-sweep needs an MoE teacher");
    const std::size_t n = teacher.config().moe->n_experts;
    for (std::size_t k : ks) {
        if (k < 1 || k > n) throw ContractError("k-sweep: k=" + std::to_string(k) + " outside [1, N]");
    }
    std::vector<KSweepRow> rows;
    for (std::size_t k : ks) {
        KSweepRow row;
        row.k = k;
        row.teacher_score = evaluate_generation(teacher, test, RoutingMode::top_k(k), cfg.max_new).mean_f;

        DistillConfig dc = cfg.distill;
        dc.teacher_k = k;
        if (dc.method == Method::Ka) dc.ka_expert_count = k;
        LanguageModel student = make_student();
        LanguageModel teacher_copy = teacher.clone();
        RunContext ctx;
        ctx.train = &train;
        run_distill(&teacher_copy, student, dc, ctx, cfg.seed);
        row.student_score = evaluate_generation(student, test, RoutingMode::all(), cfg.max_new).mean_f;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace moelab
