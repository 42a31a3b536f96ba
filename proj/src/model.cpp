#include "moelab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/errors.hpp"
#include "moelab/init.hpp"
#include "moelab/ops.hpp"

namespace moelab {

void ModelConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0) {
        throw ContractError("model config: all extents must be positive");
    }
    if (d_model % n_heads != 0) throw ContractError("model config: d_model must be divisible by n_heads");
    if (moe) {
        if (moe->n_experts == 0) throw ContractError("model config: MoE needs at least one expert");
        if (moe->k < 1 || moe->k > moe->n_experts) throw ContractError("model config: MoE k must lie in [1, N]");
        for (std::size_t l : moe->layers) {
            if (l >= n_layers) throw ContractError("model config: MoE layer index " + std::to_string(l) + " >= n_layers");
        }
    }
}

bool ModelConfig::is_moe_layer(std::size_t layer) const {
    return moe && std::find(moe->layers.begin(), moe->layers.end(), layer) != moe->layers.end();
}

std::size_t ModelConfig::analytic_parameter_count() const {
    const std::size_t d = d_model;
    const std::size_t ffn = d * d_ff + d_ff + d_ff * d + d;
    std::size_t total = vocab_size * d + max_seq_len * d;
    for (std::size_t l = 0; l < n_layers; ++l) {
        total += 4 * d + 4 * d * d;
        total += is_moe_layer(l) ? 2 * d * moe->n_experts + moe->n_experts * ffn : ffn;
    }
    total += 2 * d + d * vocab_size;
    return total;
}

ModelConfig ModelConfig::desk_teacher() {
    ModelConfig c;
    c.d_model = 64;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_ff = 128;
    c.moe = MoeSpec{8, 2, {1, 3}};
    return c;
}

ModelConfig ModelConfig::desk_student() {
    ModelConfig c;
    c.d_model = 48;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_ff = 192;
    return c;
}

LanguageModel::LanguageModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.d_model;
    const double std_model = 1.0 / std::sqrt(static_cast<double>(d));
    const double std_residual = std_model / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    token_embedding = normal_parameter({config.vocab_size, d}, 0.1, rng);
    position_embedding = normal_parameter({config.max_seq_len, d}, 0.1, rng);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        Block b;
        b.ln1_gain = constant_parameter({1, d}, 1.0);
        b.ln1_bias = constant_parameter({1, d}, 0.0);
        b.w_query = normal_parameter({d, d}, std_model, rng);
        b.w_key = normal_parameter({d, d}, std_model, rng);
        b.w_value = normal_parameter({d, d}, std_model, rng);
        b.w_out = normal_parameter({d, d}, std_residual, rng);
        b.ln2_gain = constant_parameter({1, d}, 1.0);
        b.ln2_bias = constant_parameter({1, d}, 0.0);
        if (config.is_moe_layer(l)) {
            b.moe = MoeLayer(MoeConfig{d, config.d_ff, config.moe->n_experts, config.moe->k}, rng);
        } else {
            Expert ffn;
            ffn.w_in = normal_parameter({d, config.d_ff}, std_model, rng);
            ffn.b_in = constant_parameter({1, config.d_ff}, 0.0);
            ffn.w_out = normal_parameter({config.d_ff, d}, std_residual, rng);
            ffn.b_out = constant_parameter({1, d}, 0.0);
            b.ffn = std::move(ffn);
        }
        blocks.push_back(std::move(b));
    }
    final_gain = constant_parameter({1, d}, 1.0);
    final_bias = constant_parameter({1, d}, 0.0);
    head = normal_parameter({d, config.vocab_size}, std_model, rng);
}

ForwardResult LanguageModel::forward(const std::vector<std::vector<int>>& sequences, const RoutingMode& mode,
                                     const ForwardOptions& options) const {
    if (sequences.empty()) throw ContractError("forward: empty batch");
    ForwardResult res;
    res.batch = sequences.size();
    for (const auto& s : sequences) {
        if (s.empty()) throw ContractError("forward: empty sequence");
        if (s.size() > config_.max_seq_len) {
            throw ContractError("forward: sequence length " + std::to_string(s.size()) + " exceeds max_seq_len " +
                                std::to_string(config_.max_seq_len));
        }
        for (int id : s) {
            if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) throw ContractError("forward: token id out of range");
        }
        res.lengths.push_back(s.size());
        res.seq = std::max(res.seq, s.size());
    }
    const std::size_t rows = res.batch * res.seq;
    // Padded rows never reach valid rows; any in-range id serves.
    const int pad = static_cast<std::size_t>(tokens::kPad) < config_.vocab_size ? tokens::kPad : 0;
    std::vector<int> ids(rows, pad);
    std::vector<std::size_t> positions(rows);
    res.row_valid.assign(rows, 0);
    for (std::size_t b = 0; b < res.batch; ++b) {
        for (std::size_t t = 0; t < res.seq; ++t) {
            positions[b * res.seq + t] = t;
            if (t < sequences[b].size()) {
                ids[b * res.seq + t] = sequences[b][t];
                res.row_valid[b * res.seq + t] = 1;
            }
        }
    }

    auto x = ops::add(ops::embedding(token_embedding, ids), ops::gather_rows(position_embedding, positions));
    Tensor lb;
    std::size_t moe_ordinal = 0;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const Block& b = blocks[l];
        auto h = ops::layer_norm(x, b.ln1_gain, b.ln1_bias);
        auto attn = ops::causal_attention(ops::matmul(h, b.w_query), ops::matmul(h, b.w_key), ops::matmul(h, b.w_value),
                                          res.batch, res.seq, config_.n_heads);
        x = ops::add(x, ops::matmul(attn, b.w_out));
        h = ops::layer_norm(x, b.ln2_gain, b.ln2_bias);
        if (b.moe) {
            MoeForwardOptions mo;
            mo.layer_ordinal = moe_ordinal;
            mo.noisy = options.noisy;
            mo.noise_rng = options.noise_rng;
            if (options.frozen_noise) {
                if (moe_ordinal >= options.frozen_noise->size()) throw ContractError("forward: missing frozen noise");
                mo.frozen_noise = &(*options.frozen_noise)[moe_ordinal];
            }
            mo.row_valid = res.row_valid;
            mo.collect_decisions = options.collect_gates;
            auto out = b.moe->forward(h, mode, mo);
            x = ops::add(x, out.y);
            lb = lb.defined() ? ops::add(lb, out.lb_loss) : out.lb_loss;
            if (options.collect_gates) {
                res.gates.push_back(LayerGates{l, std::move(out.decisions), std::move(out.load), out.noise});
            }
            ++moe_ordinal;
        } else {
            x = ops::add(x, b.ffn->forward(h));
        }
    }
    x = ops::layer_norm(x, final_gain, final_bias);
    res.logits = ops::matmul(x, head);
    res.lb_loss = lb.defined() ? lb : Tensor::scalar(0.0);
    return res;
}

std::vector<NamedParameter> LanguageModel::parameters() const {
    std::vector<NamedParameter> out;
    out.push_back({"token_embedding", token_embedding});
    out.push_back({"position_embedding", position_embedding});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const Block& b = blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        out.push_back({p + "ln1.gain", b.ln1_gain});
        out.push_back({p + "ln1.bias", b.ln1_bias});
        out.push_back({p + "attn.w_query", b.w_query});
        out.push_back({p + "attn.w_key", b.w_key});
        out.push_back({p + "attn.w_value", b.w_value});
        out.push_back({p + "attn.w_out", b.w_out});
        out.push_back({p + "ln2.gain", b.ln2_gain});
        out.push_back({p + "ln2.bias", b.ln2_bias});
        if (b.moe) {
            b.moe->collect_parameters(p + "moe.", out);
        } else {
            out.push_back({p + "ffn.w_in", b.ffn->w_in});
            out.push_back({p + "ffn.b_in", b.ffn->b_in});
            out.push_back({p + "ffn.w_out", b.ffn->w_out});
            out.push_back({p + "ffn.b_out", b.ffn->b_out});
        }
    }
    out.push_back({"final_ln.gain", final_gain});
    out.push_back({"final_ln.bias", final_bias});
    out.push_back({"head", head});
    return out;
}

std::vector<NamedParameter> LanguageModel::router_parameters() const {
    std::vector<NamedParameter> out;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        if (!blocks[l].moe) continue;
        const std::string p = "blocks." + std::to_string(l) + ".moe.router.";
        out.push_back({p + "w_gate", blocks[l].moe->router.w_gate});
        out.push_back({p + "w_noise", blocks[l].moe->router.w_noise});
    }
    return out;
}

std::size_t LanguageModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
}

void LanguageModel::set_requires_grad(bool on) const {
    for (auto p : parameters()) p.tensor.set_requires_grad(on);
}

void LanguageModel::zero_grad() const {
    for (auto p : parameters()) p.tensor.zero_grad();
}

LanguageModel LanguageModel::clone() const {
    LanguageModel copy = *this;
    auto dup = [](Tensor& t) { t = t.clone(); };
    dup(copy.token_embedding);
    dup(copy.position_embedding);
    for (auto& b : copy.blocks) {
        for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.w_query, &b.w_key, &b.w_value, &b.w_out, &b.ln2_gain, &b.ln2_bias}) {
            dup(*t);
        }
        if (b.ffn) {
            for (Tensor* t : {&b.ffn->w_in, &b.ffn->b_in, &b.ffn->w_out, &b.ffn->b_out}) dup(*t);
        }
        if (b.moe) {
            dup(b.moe->router.w_gate);
            dup(b.moe->router.w_noise);
            for (auto& e : b.moe->experts) {
                for (Tensor* t : {&e.w_in, &e.b_in, &e.w_out, &e.b_out}) dup(*t);
            }
        }
    }
    dup(copy.final_gain);
    dup(copy.final_bias);
    dup(copy.head);
    return copy;
}

Tensor log_distribution(const LanguageModel& model, const std::vector<int>& tokens, const RoutingMode& mode) {
    return ops::log_softmax(model.forward({tokens}, mode).logits);
}

std::vector<TokenDistribution> token_distributions(const LanguageModel& model, const std::vector<int>& tokens,
                                                   const RoutingMode& mode) {
    NoGradGuard guard;
    auto lp = log_distribution(model, tokens, mode);
    const std::size_t v = lp.cols();
    std::vector<TokenDistribution> out(lp.rows());
    for (std::size_t t = 0; t < lp.rows(); ++t) {
        out[t].probs.resize(v);
        for (std::size_t j = 0; j < v; ++j) out[t].probs[j] = std::exp(lp.at(t, j));
    }
    return out;
}

int pick_token(std::span<const double> logits, const SamplingConfig& config, Rng& rng) {
    if (config.greedy) {
        return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    if (!(config.temperature > 0.0)) throw ContractError("sampling: temperature must be positive");
    const std::size_t v = logits.size();
    std::vector<double> scaled(v);
    for (std::size_t i = 0; i < v; ++i) scaled[i] = logits[i] / config.temperature;
    const double peak = *std::max_element(scaled.begin(), scaled.end());
    std::vector<double> probs(v);
    double total = 0.0;
    for (std::size_t i = 0; i < v; ++i) total += probs[i] = std::exp(scaled[i] - peak);
    for (double& p : probs) p /= total;

    const bool filter_k = config.top_k > 0 && config.top_k < v;
    const bool filter_p = config.top_p < 1.0;
    if (filter_k || filter_p) {
        std::vector<std::size_t> order(v);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
        std::size_t keep = filter_k ? config.top_k : v;
        if (filter_p) {
            double cumulative = 0.0;
            std::size_t nucleus = 0;
            while (nucleus < keep) {
                cumulative += probs[order[nucleus++]];
                if (cumulative >= config.top_p) break;
            }
            keep = std::max<std::size_t>(nucleus, 1);
        }
        std::vector<double> filtered(v, 0.0);
        for (std::size_t i = 0; i < keep; ++i) filtered[order[i]] = probs[order[i]];
        probs = std::move(filtered);
    }
    return static_cast<int>(rng.categorical(probs));
}

std::vector<std::vector<int>> sample_batch(const LanguageModel& model, const std::vector<std::vector<int>>& prompts,
                                           std::size_t max_new, const SamplingConfig& config, Rng& rng,
                                           const RoutingMode& mode) {
    NoGradGuard guard;
    const std::size_t limit = model.config().max_seq_len;
    std::vector<std::vector<int>> generated(prompts.size());
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (prompts[i].empty()) throw ContractError("sample: empty prompt");
        if (prompts[i].size() < limit && max_new > 0) active.push_back(i);
    }
    while (!active.empty()) {
        std::vector<std::vector<int>> seqs;
        seqs.reserve(active.size());
        for (std::size_t i : active) {
            auto s = prompts[i];
            s.insert(s.end(), generated[i].begin(), generated[i].end());
            seqs.push_back(std::move(s));
        }
        auto res = model.forward(seqs, mode);
        const std::size_t v = res.logits.cols();
        std::vector<std::size_t> still;
        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t i = active[a];
            const std::size_t row = res.row(a, seqs[a].size() - 1);
            const int next = pick_token(res.logits.data().subspan(row * v, v), config, rng);
            generated[i].push_back(next);
            const bool done = next == tokens::kEos || generated[i].size() >= max_new ||
                              prompts[i].size() + generated[i].size() >= limit;
            if (!done) still.push_back(i);
        }
        active = std::move(still);
    }
    return generated;
}

std::vector<int> sample(const LanguageModel& model, const std::vector<int>& prompt, std::size_t max_new,
                        const SamplingConfig& config, Rng& rng, const RoutingMode& mode) {
    return sample_batch(model, {prompt}, max_new, config, rng, mode).front();
}

}  // namespace moelab
