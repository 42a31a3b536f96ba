#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/distill.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

template <class T>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// LCS-based precision, recall and balanced F over token sequences. Empty
// inputs score zero.
template <class T>
RougeScore rouge_l(std::span<const T> candidate, std::span<const T> reference) {
    RougeScore s;
    if (candidate.empty() || reference.empty()) return s;
    const double lcs = static_cast<double>(lcs_length(candidate, reference));
    s.precision = lcs / static_cast<double>(candidate.size());
    s.recall = lcs / static_cast<double>(reference.size());
    s.f = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

// Byte-level, matching the model vocabulary.
RougeScore rouge_l(const std::string& candidate, const std::string& reference);
// Whitespace-separated words.
RougeScore rouge_l_words(const std::string& candidate, const std::string& reference);

// Worker count for data-parallel evaluation: MOELAB_THREADS when set to a
// positive integer, otherwise the hardware concurrency.
std::size_t evaluation_threads();

struct ExampleScore {
    std::string request;
    std::string reference;
    std::string candidate;
    RougeScore rouge;
};

struct GenerationReport {
    std::vector<ExampleScore> examples;
    double mean_f = 0.0;
};

// Greedy decoding of every example's prompt, scored against its reference
// response. Result order follows the input regardless of thread count.
GenerationReport evaluate_generation(const LanguageModel& model, const std::vector<EncodedExample>& examples,
                                     const RoutingMode& mode, std::size_t max_new, std::size_t threads = 0);

struct LayerReport {
    std::size_t layer = 0;  // block index
    double activated_mass = 0.0;
    double nonactivated_mass = 0.0;
    std::size_t tokens = 0;
};

// Mean over response tokens of the full-softmax gate probability carried by
// the top-k experts, per MoE layer, noise off.
std::vector<LayerReport> activated_mass_report(const LanguageModel& teacher, const std::vector<EncodedExample>& examples,
                                               std::size_t k, std::size_t batch_size = 32);

struct ShiftReport {
    std::size_t layer = 0;
    double mean_kl = 0.0;
    double max_kl = 0.0;
    std::size_t tokens = 0;
};

// Per layer, KL(softmax(H_before) || softmax(H_after)) over all N experts for
// every real token, noise off, all experts active.
std::vector<ShiftReport> router_shift_report(const LanguageModel& before, const LanguageModel& after,
                                             const std::vector<EncodedExample>& examples, std::size_t batch_size = 32);

struct KSweepRow {
    std::size_t k = 0;
    double teacher_score = 0.0;
    double student_score = 0.0;
};

struct KSweepConfig {
    DistillConfig distill;  // method and schedule of each fresh distillation
    std::size_t max_new = 16;
    std::uint64_t seed = 0;
};

// For each k: the teacher's mean ROUGE-L under top-k routing, and that of a
// fresh student distilled from the teacher restricted to k experts.
std::vector<KSweepRow> k_sweep(const LanguageModel& teacher, const std::function<LanguageModel()>& make_student,
                               const std::vector<EncodedExample>& train, const std::vector<EncodedExample>& test,
                               const std::vector<std::size_t>& ks, const KSweepConfig& cfg);

}  // namespace moelab
