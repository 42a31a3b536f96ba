#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

// Gate projection and noise-scale projection, both d_model x N.
struct RouterParams {
    Tensor w_gate;
    Tensor w_noise;
};

// d_model -> d_ff -> d_model feed-forward block with GELU.
struct Expert {
    Tensor w_in, b_in, w_out, b_out;

    Tensor forward(const Tensor& x) const;
};

struct GateDecision {
    std::vector<double> logits;          // H(x), noise included when applied
    std::vector<std::size_t> selected;   // ascending expert indices
    std::vector<double> probs;           // zero outside `selected`
    bool noise_applied = false;
};

struct ExpertLoad {
    std::vector<double> counts;      // tokens routed to each expert
    std::vector<double> prob_mass;   // summed gate probability per expert
};

// Indices of the k largest entries, ties to the lower index, in rank order.
std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k);

// Entries outside the top k replaced by -inf.
std::vector<double> keep_top_k(std::span<const double> values, std::size_t k);

// Softmax over the entries whose mask is finite (0 = keep, -inf = drop).
GateDecision gate_probs(std::span<const double> logits, std::span<const double> selected_mask);

// Load-balancing objective CV(m)^2 + CV(P)^2 with population deviation.
double load_balance_loss(const ExpertLoad& load);
double squared_cv(std::span<const double> values);

// (x . W_g) + noise (.) Softplus(x . W_noise). Without noise, the clean
// projection. noise is rows x N standard-normal draws treated as constants.
Tensor gate_logits(const Tensor& x, const RouterParams& router, const Tensor* noise);
Tensor draw_gate_noise(std::size_t rows, std::size_t experts, Rng& rng);

// Per-token expert choice given the layer ordinal, row and that row's gate
// logits.
using ExpertSelector =
    std::function<std::vector<std::size_t>(std::size_t layer, std::size_t row, std::span<const double> logits)>;

class RoutingMode {
public:
    enum class Kind { TopK, All, Selected };

    static RoutingMode top_k(std::size_t k);
    static RoutingMode all();
    // Expert sets chosen by the selector (knowledge augmentation, replays).
    static RoutingMode selected(ExpertSelector selector, std::string label);
    // Replay of recorded sets: sets[layer][row].
    static RoutingMode fixed(std::vector<std::vector<std::vector<std::size_t>>> sets);

    Kind kind() const { return kind_; }
    std::size_t k() const { return k_; }
    const std::string& label() const { return label_; }

    // Expert set for one token; n_experts is the layer width.
    std::vector<std::size_t> choose(std::size_t layer, std::size_t row, std::span<const double> logits) const;

private:
    Kind kind_ = Kind::All;
    std::size_t k_ = 0;
    std::string label_ = "all";
    ExpertSelector selector_;
};

struct MoeConfig {
    std::size_t d_model = 64;
    std::size_t d_ff = 128;
    std::size_t n_experts = 8;
    std::size_t k = 2;
};

struct MoeForwardOptions {
    std::size_t layer_ordinal = 0;
    bool noisy = false;
    Rng* noise_rng = nullptr;          // required when noisy and no frozen noise
    const Tensor* frozen_noise = nullptr;  // replaces fresh draws when set
    std::span<const std::uint8_t> row_valid;  // empty = all rows valid
    bool collect_decisions = false;
};

struct MoeOutput {
    Tensor y;            // rows x d_model
    Tensor gate_probs;   // rows x N, differentiable
    Tensor lb_loss;      // scalar, differentiable through the P term
    ExpertLoad load;
    Tensor noise;        // draws used (undefined when noise was off)
    std::vector<GateDecision> decisions;  // per row, when collected
};

class MoeLayer {
public:
    MoeLayer() = default;
    MoeLayer(const MoeConfig& config, Rng& init);

    // Gate-weighted sum of the selected experts' outputs. Rows marked invalid
    // are routed but neither dispatched to experts nor counted in the load.
    MoeOutput forward(const Tensor& x, const RoutingMode& mode, const MoeForwardOptions& options) const;

    void collect_parameters(const std::string& prefix, std::vector<NamedParameter>& out) const;

    const MoeConfig& config() const { return config_; }

    RouterParams router;
    std::vector<Expert> experts;

private:
    MoeConfig config_;
};

}  // namespace moelab
