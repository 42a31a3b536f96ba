#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moelab/commands.hpp"
#include "moelab/config.hpp"
#include "moelab/errors.hpp"

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> method, lambda, m, beta, k, out, teacher, student, kind;
    std::vector<std::string> checkpoints;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config, "INI configuration file");
    sub->add_option("--seed", f.seed, "run seed");
    sub->add_option("--method", f.method, "sft|kd|gkd|all|ka|sar");
    sub->add_option("--lambda", f.lambda, "KA stochastic selection probability");
    sub->add_option("--M", f.m, "KA student updates per pseudo-target");
    sub->add_option("--beta", f.beta, "SAR load-balance coefficient");
    sub->add_option("--k", f.k, "teacher experts per token");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--teacher", f.teacher, "teacher checkpoint");
    sub->add_option("--student", f.student, "student checkpoint");
    sub->add_option("--set", f.overrides, "section.key=value override (repeatable)");
}

moelab::RunConfig resolve(const Flags& f) {
    using moelab::apply_override;
    moelab::RunConfig cfg = f.config.empty() ? moelab::RunConfig{} : moelab::load_config(f.config);
    for (const auto& o : f.overrides) apply_override(cfg, o);
    if (f.seed) cfg.seed = *f.seed;
    if (f.method) apply_override(cfg, "distill.method=" + *f.method);
    if (f.lambda) apply_override(cfg, "distill.lambda=" + *f.lambda);
    if (f.m) apply_override(cfg, "distill.M=" + *f.m);
    if (f.beta) apply_override(cfg, "distill.beta=" + *f.beta);
    if (f.k) {
        apply_override(cfg, "distill.teacher_k=" + *f.k);
        apply_override(cfg, "analyze.k=" + *f.k);
    }
    if (f.out) cfg.out = *f.out;
    if (f.teacher) {
        cfg.teacher_checkpoint = *f.teacher;
        cfg.analyze.teacher = *f.teacher;
    }
    if (f.student) cfg.student_checkpoint = *f.student;
    if (f.kind) cfg.analyze.kind = *f.kind;
    if (!f.checkpoints.empty()) cfg.eval.checkpoints = f.checkpoints;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge distillation from mixture-of-experts teachers"};
    app.set_version_flag("--version", std::string(moelab::kVersion));
    app.require_subcommand(1);
    Flags f;
    auto* pretrain = app.add_subcommand("pretrain", "train the MoE teacher and the student warm start");
    auto* distill = app.add_subcommand("distill", "distill the teacher into the student");
    auto* analyze = app.add_subcommand("analyze", "gate-mass, router-shift or k-sweep reports");
    auto* eval = app.add_subcommand("eval", "greedy ROUGE-L evaluation of checkpoints");
    auto* sweep = app.add_subcommand("sweep", "distillation over a list of values of one parameter");
    for (auto* sub : {pretrain, distill, analyze, eval, sweep}) add_common(sub, f);
    analyze->add_option("--kind", f.kind, "gate-mass|router-shift|k-sweep");
    eval->add_option("--checkpoint", f.checkpoints, "checkpoint to score (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? moelab::kExitOk : moelab::kExitConfig;
    }

    try {
        const auto cfg = resolve(f);
        nlohmann::json summary;
        if (pretrain->parsed()) summary = moelab::cmd_pretrain(cfg);
        else if (distill->parsed()) summary = moelab::cmd_distill(cfg);
        else if (analyze->parsed()) summary = moelab::cmd_analyze(cfg);
        else if (eval->parsed()) summary = moelab::cmd_eval(cfg);
        else summary = moelab::cmd_sweep(cfg);
        std::cout << summary.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) << std::endl;
        return moelab::kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "moelab: error: " << e.what() << std::endl;
        return moelab::exit_code_for(e);
    }
}
