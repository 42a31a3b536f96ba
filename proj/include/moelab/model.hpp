#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moelab/moe.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"
#include "moelab/tokens.hpp"

namespace moelab {

struct MoeSpec {
    std::size_t n_experts = 8;
    std::size_t k = 2;
    std::vector<std::size_t> layers;  // block indices whose FFN is an MoE layer
};

struct ModelConfig {
    std::size_t vocab_size = tokens::kVocabSize;
    std::size_t d_model = 48;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 192;
    std::size_t max_seq_len = 64;
    std::optional<MoeSpec> moe;

    // Throws ContractError describing the first violated invariant.
    void validate() const;
    bool is_moe_layer(std::size_t layer) const;
    // Parameters implied by the shapes alone.
    std::size_t analytic_parameter_count() const;

    // Desk-scale defaults: an 8-expert top-2 teacher and a dense student.
    static ModelConfig desk_teacher();
    static ModelConfig desk_student();
};

struct TokenDistribution {
    std::vector<double> probs;
};

struct ForwardOptions {
    bool noisy = false;
    Rng* noise_rng = nullptr;
    // Replayed noise per MoE layer ordinal; overrides noise_rng.
    const std::vector<Tensor>* frozen_noise = nullptr;
    bool collect_gates = false;
};

// Gate record of one MoE layer over all rows of a forward.
struct LayerGates {
    std::size_t layer = 0;  // block index
    std::vector<GateDecision> decisions;
    ExpertLoad load;
    Tensor noise;
};

struct ForwardResult {
    Tensor logits;  // (batch*seq) x vocab, right-padded rows included
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::size_t> lengths;
    std::vector<std::uint8_t> row_valid;
    Tensor lb_loss;  // sum over MoE layers; scalar zero for dense models
    std::vector<LayerGates> gates;

    std::size_t row(std::size_t sequence, std::size_t position) const { return sequence * seq + position; }
};

// Pre-norm decoder-only transformer with learned positions. Blocks listed in
// the config's MoE spec replace the dense FFN by an MoE layer.
class LanguageModel {
public:
    LanguageModel() = default;
    LanguageModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    bool has_moe() const { return config_.moe.has_value() && !config_.moe->layers.empty(); }

    // Sequences are right-padded to the longest; causal masking keeps padding
    // from influencing real positions.
    ForwardResult forward(const std::vector<std::vector<int>>& sequences, const RoutingMode& mode,
                          const ForwardOptions& options = {}) const;

    std::vector<NamedParameter> parameters() const;
    std::vector<NamedParameter> router_parameters() const;
    std::size_t parameter_count() const;
    void set_requires_grad(bool on) const;
    void zero_grad() const;

    // Deep copy with independent storage.
    LanguageModel clone() const;

    struct Block {
        Tensor ln1_gain, ln1_bias;
        Tensor w_query, w_key, w_value, w_out;
        Tensor ln2_gain, ln2_bias;
        std::optional<Expert> ffn;
        std::optional<MoeLayer> moe;
    };

    Tensor token_embedding;
    Tensor position_embedding;
    std::vector<Block> blocks;
    Tensor final_gain, final_bias;
    Tensor head;

private:
    ModelConfig config_;
};

// Log-softmax of the forward logits for one sequence, seq x vocab.
Tensor log_distribution(const LanguageModel& model, const std::vector<int>& tokens, const RoutingMode& mode);
std::vector<TokenDistribution> token_distributions(const LanguageModel& model, const std::vector<int>& tokens,
                                                   const RoutingMode& mode);

struct SamplingConfig {
    double temperature = 1.0;
    std::size_t top_k = 0;  // 0 disables
    double top_p = 1.0;
    bool greedy = false;    // temperature -> 0 limit
};

// Next token from one logit row under the sampling configuration.
int pick_token(std::span<const double> logits, const SamplingConfig& config, Rng& rng);

// Autoregressive continuation of each prompt; stops at EOS (kept in the
// output), max_new tokens, or the model's context limit. Returns only the
// generated tokens.
std::vector<std::vector<int>> sample_batch(const LanguageModel& model, const std::vector<std::vector<int>>& prompts,
                                           std::size_t max_new, const SamplingConfig& config, Rng& rng,
                                           const RoutingMode& mode = RoutingMode::all());

std::vector<int> sample(const LanguageModel& model, const std::vector<int>& prompt, std::size_t max_new,
                        const SamplingConfig& config, Rng& rng, const RoutingMode& mode = RoutingMode::all());

}  // namespace moelab
