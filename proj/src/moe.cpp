#include "moelab/moe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "moelab/errors.hpp"
#include "moelab/init.hpp"
#include "moelab/ops.hpp"

namespace moelab {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

Tensor Expert::forward(const Tensor& x) const {
    auto hidden = ops::gelu(ops::add(ops::matmul(x, w_in), b_in));
    return ops::add(ops::matmul(hidden, w_out), b_out);
}

std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
    if (k < 1 || k > values.size()) {
        throw ContractError("top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(values.size()) + "]");
    }
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    order.resize(k);
    return order;
}

std::vector<double> keep_top_k(std::span<const double> values, std::size_t k) {
    std::vector<double> out(values.size(), kNegInf);
    for (std::size_t i : top_k_indices(values, k)) out[i] = values[i];
    return out;
}

GateDecision gate_probs(std::span<const double> logits, std::span<const double> selected_mask) {
    if (logits.size() != selected_mask.size()) throw DimensionError("gate_probs: mask length differs from logits");
    GateDecision d;
    d.logits.assign(logits.begin(), logits.end());
    std::vector<double> masked(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const bool keep = std::isfinite(selected_mask[i]);
        if (keep) d.selected.push_back(i);
        masked[i] = logits[i] + selected_mask[i];
    }
    if (d.selected.empty()) throw DegenerateSliceError("gate_probs: no expert selected");
    NoGradGuard guard;
    auto p = ops::softmax(Tensor::row(std::move(masked)));
    d.probs.assign(p.data().begin(), p.data().end());
    return d;
}

double squared_cv(std::span<const double> values) {
    if (values.empty()) throw ContractError("squared_cv: empty input");
    const double n = static_cast<double>(values.size());
    // deviations from the first entry, so equal entries give exactly zero
    const double origin = values[0];
    double shift = 0.0;
    for (double v : values) shift += v - origin;
    shift /= n;
    const double mu = origin + shift;
    double var = 0.0;
    for (double v : values) var += ((v - origin) - shift) * ((v - origin) - shift);
    var /= n;
    const double denom = std::max(mu, ops::kCvMeanFloor);
    return var / (denom * denom);
}

double load_balance_loss(const ExpertLoad& load) {
    if (load.counts.size() != load.prob_mass.size()) throw DimensionError("load_balance_loss: m and P differ in length");
    double routed = 0.0;
    for (double c : load.counts) {
        if (c < 0) throw ContractError("load_balance_loss: negative token count");
        routed += c;
    }
    if (routed <= 0.0) throw ContractError("load_balance_loss: no tokens routed");
    return squared_cv(load.counts) + squared_cv(load.prob_mass);
}

Tensor gate_logits(const Tensor& x, const RouterParams& router, const Tensor* noise) {
    auto clean = ops::matmul(x, router.w_gate);
    if (!noise) return clean;
    if (noise->shape() != clean.shape()) throw DimensionError("gate_logits: noise shape differs from logits");
    return ops::add(clean, ops::mul(*noise, ops::softplus(ops::matmul(x, router.w_noise))));
}

Tensor draw_gate_noise(std::size_t rows, std::size_t experts, Rng& rng) {
    std::vector<double> eps(rows * experts);
    for (double& e : eps) e = rng.normal();
    return Tensor::from({rows, experts}, std::move(eps));
}

RoutingMode RoutingMode::top_k(std::size_t k) {
    RoutingMode m;
    m.kind_ = Kind::TopK;
    m.k_ = k;
    m.label_ = "topk(" + std::to_string(k) + ")";
    return m;
}

RoutingMode RoutingMode::all() { return RoutingMode{}; }

RoutingMode RoutingMode::selected(ExpertSelector selector, std::string label) {
    RoutingMode m;
    m.kind_ = Kind::Selected;
    m.selector_ = std::move(selector);
    m.label_ = std::move(label);
    return m;
}

RoutingMode RoutingMode::fixed(std::vector<std::vector<std::vector<std::size_t>>> sets) {
    auto table = std::make_shared<const std::vector<std::vector<std::vector<std::size_t>>>>(std::move(sets));
    return selected(
        [table](std::size_t layer, std::size_t row, std::span<const double>) {
            if (layer >= table->size() || row >= (*table)[layer].size()) {
                throw ContractError("fixed routing: no recorded set for layer " + std::to_string(layer) + " row " +
                                    std::to_string(row));
            }
            return (*table)[layer][row];
        },
        "fixed");
}

std::vector<std::size_t> RoutingMode::choose(std::size_t layer, std::size_t row, std::span<const double> logits) const {
    const std::size_t n = logits.size();
    std::vector<std::size_t> set;
    switch (kind_) {
        case Kind::TopK:
            set = top_k_indices(logits, k_);
            break;
        case Kind::All:
            set.resize(n);
            std::iota(set.begin(), set.end(), 0);
            break;
        case Kind::Selected:
            set = selector_(layer, row, logits);
            break;
    }
    std::sort(set.begin(), set.end());
    if (set.empty()) throw ContractError("routing: empty expert set");
    if (set.back() >= n || std::adjacent_find(set.begin(), set.end()) != set.end()) {
        throw ContractError("routing: expert set has repeated or out-of-range indices");
    }
    return set;
}

MoeLayer::MoeLayer(const MoeConfig& config, Rng& init) : config_(config) {
    if (config.k < 1 || config.k > config.n_experts) throw ContractError("MoE: k must lie in [1, N]");
    const double std_in = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const double std_hidden = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
    router.w_gate = normal_parameter({config.d_model, config.n_experts}, std_in, init);
    router.w_noise = constant_parameter({config.d_model, config.n_experts}, 0.0);
    for (std::size_t e = 0; e < config.n_experts; ++e) {
        Expert ex;
        ex.w_in = normal_parameter({config.d_model, config.d_ff}, std_in, init);
        ex.b_in = constant_parameter({1, config.d_ff}, 0.0);
        ex.w_out = normal_parameter({config.d_ff, config.d_model}, std_hidden, init);
        ex.b_out = constant_parameter({1, config.d_model}, 0.0);
        experts.push_back(std::move(ex));
    }
}

MoeOutput MoeLayer::forward(const Tensor& x, const RoutingMode& mode, const MoeForwardOptions& options) const {
    const std::size_t rows = x.rows();
    const std::size_t n = config_.n_experts;
    if (x.cols() != config_.d_model) throw DimensionError("MoE: input width differs from d_model");
    if (!options.row_valid.empty() && options.row_valid.size() != rows) {
        throw DimensionError("MoE: row_valid length differs from rows");
    }
    auto valid = [&](std::size_t r) { return options.row_valid.empty() || options.row_valid[r] != 0; };

    MoeOutput out;
    if (options.noisy) {
        if (options.frozen_noise) {
            out.noise = *options.frozen_noise;
        } else {
            if (!options.noise_rng) throw ContractError("MoE: noisy forward without a noise source");
            out.noise = draw_gate_noise(rows, n, *options.noise_rng);
        }
    }
    auto h = gate_logits(x, router, options.noisy ? &out.noise : nullptr);

    std::vector<std::vector<std::size_t>> sets(rows);
    std::vector<double> mask(rows * n, kNegInf);
    auto hv = h.data();
    for (std::size_t r = 0; r < rows; ++r) {
        if (valid(r)) {
            sets[r] = mode.choose(options.layer_ordinal, r, hv.subspan(r * n, n));
            for (std::size_t e : sets[r]) mask[r * n + e] = 0.0;
        } else {
            std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(r * n), n, 0.0);
        }
    }
    out.gate_probs = ops::softmax(ops::add(h, Tensor::from({rows, n}, std::move(mask))), 1);

    out.load.counts.assign(n, 0.0);
    std::vector<std::size_t> valid_rows;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!valid(r)) continue;
        valid_rows.push_back(r);
        for (std::size_t e : sets[r]) out.load.counts[e] += 1.0;
    }

    for (std::size_t e = 0; e < n; ++e) {
        std::vector<std::size_t> idx;
        for (std::size_t r : valid_rows) {
            if (std::binary_search(sets[r].begin(), sets[r].end(), e)) idx.push_back(r);
        }
        if (idx.empty()) continue;
        auto ye = experts[e].forward(ops::gather_rows(x, idx));
        auto weighted = ops::scale_rows(ye, ops::select_column(out.gate_probs, idx, e));
        auto contribution = ops::scatter_rows(weighted, idx, rows);
        out.y = out.y.defined() ? ops::add(out.y, contribution) : contribution;
    }
    if (!out.y.defined()) out.y = Tensor::zeros({rows, config_.d_model});

    if (valid_rows.empty()) {
        out.lb_loss = Tensor::scalar(0.0);
        out.load.prob_mass.assign(n, 0.0);
    } else {
        auto mass = ops::sum_rows(ops::gather_rows(out.gate_probs, valid_rows));
        out.load.prob_mass.assign(mass.data().begin(), mass.data().end());
        out.lb_loss = ops::add_scalar(ops::cv_squared(mass), squared_cv(out.load.counts));
    }

    if (options.collect_decisions) {
        auto gp = out.gate_probs.data();
        out.decisions.resize(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            auto& d = out.decisions[r];
            d.logits.assign(hv.begin() + static_cast<std::ptrdiff_t>(r * n),
                            hv.begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
            d.probs.assign(gp.begin() + static_cast<std::ptrdiff_t>(r * n),
                           gp.begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
            d.selected = sets[r];
            d.noise_applied = options.noisy;
        }
    }
    return out;
}

void MoeLayer::collect_parameters(const std::string& prefix, std::vector<NamedParameter>& out) const {
    out.push_back({prefix + "router.w_gate", router.w_gate});
    out.push_back({prefix + "router.w_noise", router.w_noise});
    for (std::size_t e = 0; e < experts.size(); ++e) {
        const std::string p = prefix + "experts." + std::to_string(e) + ".";
        out.push_back({p + "w_in", experts[e].w_in});
        out.push_back({p + "b_in", experts[e].b_in});
        out.push_back({p + "w_out", experts[e].w_out});
        out.push_back({p + "b_out", experts[e].b_out});
    }
}

}  // namespace moelab
