#include "moelab/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "moelab/checkpoint.hpp"
#include "moelab/checksum.hpp"
#include "moelab/errors.hpp"
#include "moelab/eval.hpp"

namespace moelab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::string checkpoint_metadata(const RunConfig& cfg, const std::string& role) {
    return "role = " + role + "\nconfig_hash = " + config_hash(cfg) + "\nseed = " + std::to_string(cfg.seed) +
           "\nversion = " + kVersion + "\n";
}

// Append-only JSON lines, flushed per record.
class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IoError("cannot write metrics '" + path + "'");
    }
    void write(const json& record) {
        out_ << record.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

json step_json(const StepRecord& s) {
    json j{{"kind", "step"},
           {"step", s.step},
           {"method", s.method},
           {"loss", s.loss},
           {"kl", s.kl},
           {"lb_loss", s.lb_loss},
           {"router_grad_norm", s.router_grad_norm}};
    j["wall_ms"] = s.wall_ms ? json(*s.wall_ms) : json(nullptr);
    return j;
}

json distill_hyperparameters(const DistillConfig& d) {
    return json{{"method", method_name(d.method)},
                {"lambda", d.lambda},
                {"M", d.M},
                {"beta", d.beta},
                {"lr_student", d.lr_student},
                {"lr_router", d.lr_router},
                {"steps", d.steps},
                {"batch_size", d.batch_size},
                {"ka_expert_count", d.ka_expert_count},
                {"teacher_k", d.teacher_k},
                {"max_response", d.max_response},
                {"sampling", {{"temperature", d.sampling.temperature}, {"top_k", d.sampling.top_k}, {"top_p", d.sampling.top_p}}},
                {"sar_kl_direction", kl_direction_name(d.sar_kl_direction)},
                {"adamw", {{"beta1", d.beta1}, {"beta2", d.beta2}, {"eps", d.eps}, {"weight_decay", d.weight_decay}}},
                {"grad_clip", d.grad_clip}};
}

double tail_mean(const std::vector<StepRecord>& h) {
    if (h.empty()) return 0.0;
    const std::size_t tail = std::max<std::size_t>(1, h.size() / 10);
    double s = 0.0;
    for (std::size_t i = h.size() - tail; i < h.size(); ++i) s += h[i].loss;
    return s / static_cast<double>(tail);
}

void write_json(const std::string& path, const json& j) {
    write_file_atomic(path, j.dump(2, ' ', false, json::error_handler_t::replace) + "\n");
}

std::string provenance_comment(const RunConfig& cfg) {
    return "# config_hash=" + config_hash(cfg) + " seed=" + std::to_string(cfg.seed) + " version=" + kVersion + "\n";
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

const std::vector<EncodedExample>& split_of(const Corpus& c, const std::string& name) {
    if (name == "train") return c.train;
    if (name == "valid") return c.valid;
    return c.test;
}

LanguageModel load_model(const std::string& path, const std::string& what) {
    if (path.empty()) throw ConfigError(what + " checkpoint path is not set");
    if (!fs::exists(path)) throw IoError(what + " checkpoint not found: " + path);
    return load_checkpoint(path).model;
}

void prepare_dir(const RunConfig& cfg, const std::string& dir) {
    fs::create_directories(dir);
    write_file_atomic(join_path(dir, "config.ini"), provenance_comment(cfg) + to_ini(cfg));
}

// Distillation into `dir` without taking the lock (sweeps reuse it).
json distill_into(const RunConfig& cfg, const std::string& dir, const Corpus& corpus) {
    prepare_dir(cfg, dir);
    const auto& d = cfg.distill;
    std::optional<LanguageModel> teacher;
    if (needs_teacher(d.method)) teacher = load_model(cfg.teacher_checkpoint, "teacher");
    LanguageModel student = cfg.student_checkpoint.empty() ? LanguageModel(cfg.student, cfg.seed)
                                                            : load_model(cfg.student_checkpoint, "student");
    const LanguageModel teacher_before = teacher ? teacher->clone() : LanguageModel();

    MetricsWriter metrics(join_path(dir, "metrics.jsonl"));
    json header{{"kind", "header"}, {"command", "distill"}, {"provenance", provenance(cfg)},
                {"hyperparameters", distill_hyperparameters(d)}};
    metrics.write(header);
    RunContext ctx;
    ctx.train = &corpus.train;
    ctx.probe = &corpus.valid;
    ctx.timing = cfg.timing;
    ctx.on_step = [&](const StepRecord& s) { metrics.write(step_json(s)); };
    auto result = run_distill(teacher ? &*teacher : nullptr, student, d, ctx, cfg.seed);

    save_checkpoint(join_path(dir, "student.ckpt"), student, checkpoint_metadata(cfg, "student"));
    if (d.method == Method::Sar) {
        save_checkpoint(join_path(dir, "teacher_after.ckpt"), *teacher, checkpoint_metadata(cfg, "teacher"));
    }
    const auto eval = evaluate_generation(student, corpus.test, RoutingMode::all(), d.max_response);
    json summary{{"provenance", provenance(cfg)},
                 {"command", "distill"},
                 {"method", method_name(d.method)},
                 {"outer_steps", result.outer_steps},
                 {"student_updates", result.student_updates},
                 {"first_loss", result.history.empty() ? 0.0 : result.history.front().loss},
                 {"final_loss", tail_mean(result.history)},
                 {"probe_loss_start", result.probe_start},
                 {"probe_loss_end", result.probe_end},
                 {"test_rouge_l", eval.mean_f}};
    if (d.method == Method::Sar) {
        summary["sar_probe_start"] = result.sar_probe_start;
        summary["sar_probe_end"] = result.sar_probe_end;
        std::size_t changed = 0, frozen_changed = 0;
        const auto before = teacher_before.parameters();
        const auto after = teacher->parameters();
        for (std::size_t i = 0; i < before.size(); ++i) {
            const bool differs = checksum(before[i].tensor.data()) != checksum(after[i].tensor.data());
            const bool router = before[i].name.find(".router.") != std::string::npos;
            changed += router && differs;
            frozen_changed += !router && differs;
        }
        summary["router_tensors_changed"] = changed;
        summary["non_router_tensors_changed"] = frozen_changed;
    }
    write_json(join_path(dir, "summary.json"), summary);
    return summary;
}

std::size_t teacher_k_of(const LanguageModel& teacher, std::size_t k) { return k == 0 ? teacher.config().moe->k : k; }

}  // namespace

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
    if (dynamic_cast<const IoError*>(&e)) return kExitIo;
    if (dynamic_cast<const ContractError*>(&e)) return kExitContract;
    if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kExitIo;
    return kExitOther;
}

Corpus load_corpus(const DataSpec& spec, std::vector<std::string>* warnings) {
    std::vector<InstructionPair> pairs;
    if (spec.source == "jsonl") {
        pairs = load_jsonl(spec.path, warnings);
    } else {
        Rng rng(spec.seed);
        SyntheticOptions opt;
        opt.min_length = spec.min_length;
        opt.max_length = spec.max_length;
        pairs = gen_mixture(spec.tasks, spec.n, rng, opt);
    }
    auto encoded = encode_all(pairs, EncodeLimits{spec.max_seq, spec.max_request});
    auto split = split_indices(encoded.size(), spec.seed);
    return Corpus{select(encoded, split.train), select(encoded, split.valid), select(encoded, split.test)};
}

json provenance(const RunConfig& cfg) {
    return json{{"config_hash", config_hash(cfg)}, {"seed", cfg.seed}, {"version", kVersion}};
}

OutputLock::OutputLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = join_path(dir, ".moelab.lock");
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
        const std::string held = path_;
        path_.clear();
        throw IoError("output directory is in use by another run (lock file " + held +
                      "); remove it if no run is active");
    }
    std::fclose(f);
}

OutputLock::~OutputLock() {
    if (!path_.empty()) {
        std::error_code ec;
        fs::remove(path_, ec);
    }
}

json cmd_pretrain(const RunConfig& cfg) {
    cfg.validate();
    OutputLock lock(cfg.out);
    prepare_dir(cfg, cfg.out);
    std::vector<std::string> warnings;
    const Corpus corpus = load_corpus(cfg.data, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    if (corpus.train.empty()) throw ContractError("pretrain: the training split is empty");

    MetricsWriter metrics(join_path(cfg.out, "metrics.jsonl"));
    metrics.write(json{{"kind", "header"},
                       {"command", "pretrain"},
                       {"provenance", provenance(cfg)},
                       {"hyperparameters",
                        {{"steps", cfg.pretrain.steps},
                         {"batch_size", cfg.pretrain.batch_size},
                         {"lr", cfg.pretrain.lr},
                         {"lb_coef", cfg.pretrain.lb_coef},
                         {"noisy", cfg.pretrain.noisy},
                         {"adamw", {{"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}, {"weight_decay", cfg.pretrain.weight_decay}}},
                         {"grad_clip", cfg.pretrain.grad_clip},
                         {"warmup", cfg.pretrain.warmup}}}});
    RunContext ctx;
    ctx.timing = cfg.timing;
    ctx.on_step = [&](const StepRecord& s) { metrics.write(step_json(s)); };

    LanguageModel teacher(cfg.teacher, cfg.seed);
    auto tr = pretrain(teacher, corpus.train, cfg.pretrain, cfg.seed, ctx);
    save_checkpoint(join_path(cfg.out, "teacher.ckpt"), teacher, checkpoint_metadata(cfg, "teacher"));
    const auto mode = RoutingMode::top_k(teacher.config().moe->k);
    const auto& held = corpus.test.empty() ? corpus.train : corpus.test;

    json summary{{"provenance", provenance(cfg)},
                 {"command", "pretrain"},
                 {"teacher",
                  {{"parameters", teacher.parameter_count()},
                   {"first_loss", tr.first_loss},
                   {"final_loss", tr.last_loss},
                   {"test_token_accuracy", response_token_accuracy(teacher, held, mode)}}}};

    LanguageModel student(cfg.student, cfg.seed);
    if (cfg.student_sft_steps > 0) {
        PretrainConfig sc = cfg.pretrain;
        sc.steps = cfg.student_sft_steps;
        auto sr = pretrain(student, corpus.train, sc, cfg.seed, ctx);
        summary["student"] = {{"parameters", student.parameter_count()},
                              {"first_loss", sr.first_loss},
                              {"final_loss", sr.last_loss},
                              {"test_token_accuracy", response_token_accuracy(student, held, RoutingMode::all())}};
    } else {
        summary["student"] = {{"parameters", student.parameter_count()}};
    }
    save_checkpoint(join_path(cfg.out, "student_init.ckpt"), student, checkpoint_metadata(cfg, "student"));
    write_json(join_path(cfg.out, "summary.json"), summary);
    return summary;
}

json cmd_distill(const RunConfig& cfg) {
    cfg.validate();
    OutputLock lock(cfg.out);
    std::vector<std::string> warnings;
    const Corpus corpus = load_corpus(cfg.data, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    return distill_into(cfg, cfg.out, corpus);
}

json cmd_eval(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.eval.checkpoints.empty()) throw ConfigError("eval: no checkpoint given");
    OutputLock lock(cfg.out);
    prepare_dir(cfg, cfg.out);
    const Corpus corpus = load_corpus(cfg.data);
    const auto& examples = split_of(corpus, cfg.eval.split);
    if (examples.empty()) throw ContractError("eval: the " + cfg.eval.split + " split is empty; nothing to score");

    json runs = json::array();
    double total = 0.0;
    for (const auto& path : cfg.eval.checkpoints) {
        const auto model = load_model(path, "evaluated");
        const RoutingMode mode = cfg.eval.routing == "topk" && model.has_moe() ? RoutingMode::top_k(model.config().moe->k)
                                                                               : RoutingMode::all();
        const auto report = evaluate_generation(model, examples, mode, cfg.eval.max_new);
        json per = json::array();
        for (const auto& s : report.examples) {
            per.push_back({{"request", s.request},
                           {"reference", s.reference},
                           {"candidate", s.candidate},
                           {"precision", s.rouge.precision},
                           {"recall", s.rouge.recall},
                           {"f", s.rouge.f}});
        }
        runs.push_back({{"checkpoint", path}, {"mean_f", report.mean_f}, {"examples", per}});
        total += report.mean_f;
    }
    json summary{{"provenance", provenance(cfg)},
                 {"command", "eval"},
                 {"split", cfg.eval.split},
                 {"decoding", "greedy"},
                 {"checkpoints", cfg.eval.checkpoints.size()},
                 {"mean_f", total / static_cast<double>(cfg.eval.checkpoints.size())}};
    json scores = summary;
    scores["runs"] = runs;
    write_json(join_path(cfg.out, "scores.json"), scores);
    write_json(join_path(cfg.out, "summary.json"), summary);
    return summary;
}

json cmd_analyze(const RunConfig& cfg) {
    cfg.validate();
    OutputLock lock(cfg.out);
    prepare_dir(cfg, cfg.out);
    const Corpus corpus = load_corpus(cfg.data);
    const std::string teacher_path = cfg.analyze.teacher.empty() ? cfg.teacher_checkpoint : cfg.analyze.teacher;
    const auto teacher = load_model(teacher_path, "teacher");
    if (!teacher.has_moe()) throw ContractError("analyze: the teacher checkpoint has no MoE layers");
    json summary{{"provenance", provenance(cfg)}, {"command", "analyze"}, {"kind", cfg.analyze.kind}};
    const std::string kind = cfg.analyze.kind;

    if (kind == "gate-mass") {
        const std::size_t k = teacher_k_of(teacher, cfg.analyze.k);
        const auto reports = activated_mass_report(teacher, corpus.train, k);
        std::string csv = provenance_comment(cfg) + "layer,k,activated_mass,nonactivated_mass,tokens\n";
        json rows = json::array();
        for (const auto& r : reports) {
            csv += std::to_string(r.layer) + "," + std::to_string(k) + "," + num(r.activated_mass) + "," +
                   num(r.nonactivated_mass) + "," + std::to_string(r.tokens) + "\n";
            rows.push_back({{"layer", r.layer},
                            {"k", k},
                            {"activated_mass", r.activated_mass},
                            {"nonactivated_mass", r.nonactivated_mass},
                            {"tokens", r.tokens}});
        }
        summary["token_population"] = "response tokens of the training split";
        summary["rows"] = rows;
        write_file_atomic(join_path(cfg.out, "gate_mass.csv"), csv);
        write_json(join_path(cfg.out, "gate_mass.json"), summary);
    } else if (kind == "router-shift") {
        const auto after = load_model(cfg.analyze.teacher_after.empty() ? teacher_path : cfg.analyze.teacher_after,
                                      "teacher_after");
        const auto reports = router_shift_report(teacher, after, corpus.train);
        std::string csv = provenance_comment(cfg) + "layer,mean_kl,max_kl,tokens\n";
        json rows = json::array();
        for (const auto& r : reports) {
            csv += std::to_string(r.layer) + "," + num(r.mean_kl) + "," + num(r.max_kl) + "," + std::to_string(r.tokens) + "\n";
            rows.push_back({{"layer", r.layer}, {"mean_kl", r.mean_kl}, {"max_kl", r.max_kl}, {"tokens", r.tokens}});
        }
        summary["rows"] = rows;
        write_file_atomic(join_path(cfg.out, "router_shift.csv"), csv);
        write_json(join_path(cfg.out, "router_shift.json"), summary);
    } else {
        KSweepConfig kc;
        kc.distill = cfg.distill;
        if (cfg.analyze.sweep_steps > 0) kc.distill.steps = cfg.analyze.sweep_steps;
        kc.max_new = cfg.distill.max_response;
        kc.seed = cfg.seed;
        const auto rows_data = k_sweep(teacher, [&] { return LanguageModel(cfg.student, cfg.seed); }, corpus.train,
                                       corpus.test, cfg.analyze.ks, kc);
        std::string csv = provenance_comment(cfg) + "k,teacher_score,student_score\n";
        json rows = json::array();
        for (const auto& r : rows_data) {
            csv += std::to_string(r.k) + "," + num(r.teacher_score) + "," + num(r.student_score) + "\n";
            rows.push_back({{"k", r.k}, {"teacher_score", r.teacher_score}, {"student_score", r.student_score}});
        }
        summary["method"] = method_name(kc.distill.method);
        summary["rows"] = rows;
        write_file_atomic(join_path(cfg.out, "k_sweep.csv"), csv);
        write_json(join_path(cfg.out, "k_sweep.json"), summary);
    }
    write_json(join_path(cfg.out, "summary.json"), summary);
    return summary;
}

json cmd_sweep(const RunConfig& cfg) {
    cfg.validate();
    OutputLock lock(cfg.out);
    prepare_dir(cfg, cfg.out);
    const Corpus corpus = load_corpus(cfg.data);
    const std::string& param = cfg.sweep.param;
    if (cfg.sweep.values.empty()) throw ConfigError("sweep.values is empty");

    std::string csv = provenance_comment(cfg) + param + ",method,probe_loss_start,probe_loss_end,final_loss,test_rouge_l\n";
    json rows = json::array();
    for (const auto& value : cfg.sweep.values) {
        RunConfig sub = cfg;
        if (param == "seed") {
            apply_override(sub, "run.seed=" + value);
        } else if (param == "k") {
            apply_override(sub, "distill.teacher_k=" + value);
            if (sub.distill.method == Method::Ka) apply_override(sub, "distill.ka_expert_count=" + value);
        } else {
            apply_override(sub, "distill." + param + "=" + value);
        }
        sub.validate();
        const auto s = distill_into(sub, join_path(cfg.out, param + "-" + value), corpus);
        csv += value + "," + s["method"].get<std::string>() + "," + num(s["probe_loss_start"].get<double>()) + "," +
               num(s["probe_loss_end"].get<double>()) + "," + num(s["final_loss"].get<double>()) + "," +
               num(s["test_rouge_l"].get<double>()) + "\n";
        rows.push_back({{"value", value},
                        {"method", s["method"]},
                        {"probe_loss_start", s["probe_loss_start"]},
                        {"probe_loss_end", s["probe_loss_end"]},
                        {"final_loss", s["final_loss"]},
                        {"test_rouge_l", s["test_rouge_l"]}});
    }
    double mean = 0.0;
    for (const auto& r : rows) mean += r["test_rouge_l"].get<double>();
    json summary{{"provenance", provenance(cfg)}, {"command", "sweep"}, {"param", param}, {"rows", rows},
                 {"mean_test_rouge_l", mean / static_cast<double>(rows.size())}};
    write_file_atomic(join_path(cfg.out, "sweep.csv"), csv);
    write_json(join_path(cfg.out, "sweep.json"), summary);
    write_json(join_path(cfg.out, "summary.json"), summary);
    return summary;
}

}  // namespace moelab
