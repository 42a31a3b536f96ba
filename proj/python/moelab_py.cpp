#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "moelab/checkpoint.hpp"
#include "moelab/commands.hpp"
#include "moelab/config.hpp"
#include "moelab/data.hpp"
#include "moelab/distill.hpp"
#include "moelab/errors.hpp"
#include "moelab/eval.hpp"
#include "moelab/moe.hpp"

namespace py = pybind11;
using namespace moelab;

namespace {

std::vector<TokenDistribution> to_distributions(const std::vector<std::vector<double>>& rows) {
    std::vector<TokenDistribution> out;
    for (const auto& r : rows) out.push_back(TokenDistribution{r});
    return out;
}

std::vector<std::uint8_t> full_mask(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

py::object to_python(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace));
}

RunConfig resolve(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
}

using Command = nlohmann::json (*)(const RunConfig&);

void bind_command(py::module_& m, const char* name, Command fn) {
    m.def(
        name,
        [fn](const std::string& config, const std::vector<std::string>& overrides) {
            const auto cfg = resolve(config, overrides);
            nlohmann::json summary;
            {
                py::gil_scoped_release release;
                summary = fn(cfg);
            }
            return to_python(summary);
        },
        py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{});
}

}  // namespace

PYBIND11_MODULE(moelab, m) {
    m.doc() = "Knowledge distillation from mixture-of-experts teachers";
    m.attr("__version__") = kVersion;

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);

    m.def(
        "rouge_l",
        [](const std::string& candidate, const std::string& reference) {
            const auto s = rouge_l(candidate, reference);
            return py::make_tuple(s.precision, s.recall, s.f);
        },
        py::arg("candidate"), py::arg("reference"), "Byte-level ROUGE-L as (precision, recall, f).");
    m.def(
        "forward_kl",
        [](const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& q) {
            return forward_kl(to_distributions(p), to_distributions(q), full_mask(p.size()));
        },
        py::arg("p"), py::arg("q"), "Mean over rows of sum p log(p/q).");
    m.def(
        "reverse_kl",
        [](const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& q) {
            return reverse_kl(to_distributions(p), to_distributions(q), full_mask(p.size()));
        },
        py::arg("p"), py::arg("q"), "Mean over rows of sum q log(q/p).");
    m.def(
        "load_balance_loss",
        [](const std::vector<double>& counts, const std::vector<double>& prob_mass) {
            return load_balance_loss(ExpertLoad{counts, prob_mass});
        },
        py::arg("counts"), py::arg("prob_mass"));
    m.def("top_k_indices", [](const std::vector<double>& v, std::size_t k) { return top_k_indices(v, k); },
          py::arg("values"), py::arg("k"));
    m.def(
        "ka_select",
        [](const std::vector<double>& logits, double lambda, std::size_t count, std::uint64_t seed, std::size_t draws) {
            Rng rng(seed);
            std::vector<std::vector<std::size_t>> out;
            for (std::size_t i = 0; i < draws; ++i) out.push_back(ka_select(logits, lambda, count, rng));
            return out;
        },
        py::arg("logits"), py::arg("lam"), py::arg("count"), py::arg("seed") = 0, py::arg("draws") = 1,
        "`draws` successive expert selections from one seeded stream.");

    m.def(
        "synthetic",
        [](const std::string& task, std::size_t n, std::uint64_t seed) {
            Rng rng(seed);
            std::vector<std::pair<std::string, std::string>> out;
            for (const auto& p : gen_synthetic(parse_task(task), n, rng)) out.emplace_back(p.request, p.response);
            return out;
        },
        py::arg("task"), py::arg("n"), py::arg("seed") = 0, "(request, response) pairs.");
    m.def(
        "encode",
        [](const std::string& request, const std::string& response, std::size_t max_seq, std::size_t max_request) {
            const auto e = encode(InstructionPair{request, response}, EncodeLimits{max_seq, max_request});
            return py::make_tuple(e.tokens, e.response_mask);
        },
        py::arg("request"), py::arg("response"), py::arg("max_seq") = 64, py::arg("max_request") = 32);
    m.def("decode", [](const std::vector<int>& tokens) { return py::bytes(decode(tokens)); }, py::arg("tokens"));

    m.def(
        "config_text",
        [](const std::string& config, const std::vector<std::string>& overrides) {
            return to_ini(resolve(config, overrides));
        },
        py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{}, "Canonical configuration text.");
    m.def(
        "config_hash",
        [](const std::string& config, const std::vector<std::string>& overrides) {
            return config_hash(resolve(config, overrides));
        },
        py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{});

    m.def(
        "checkpoint_info",
        [](const std::string& path) {
            const auto ck = load_checkpoint(path);
            py::dict params;
            for (const auto& p : ck.model.parameters()) params[py::str(p.name)] = py::cast(p.tensor.shape());
            py::dict info;
            info["metadata"] = ck.metadata;
            info["config"] = model_config_text(ck.model.config());
            info["parameter_count"] = ck.model.parameter_count();
            info["parameters"] = params;
            return info;
        },
        py::arg("path"));

    bind_command(m, "pretrain", &cmd_pretrain);
    bind_command(m, "distill", &cmd_distill);
    bind_command(m, "analyze", &cmd_analyze);
    bind_command(m, "evaluate", &cmd_eval);
    bind_command(m, "sweep", &cmd_sweep);
}
