#include "moelab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "moelab/checksum.hpp"
#include "moelab/errors.hpp"

namespace moelab {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string join(const std::vector<std::string>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
    return s;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(v)) out.push_back(to_size(key, item));
    return out;
}

std::string sizes_text(const std::vector<std::size_t>& v) {
    std::vector<std::string> s;
    for (auto x : v) s.push_back(std::to_string(x));
    return join(s);
}

// One settable key: parse from text and print back canonically.
struct Field {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

using Table = std::map<std::string, std::map<std::string, Field>>;

void model_fields(std::map<std::string, Field>& t, ModelConfig& m, const std::string& sec) {
    auto size_field = [&](const char* name, std::size_t& dst) {
        const std::string key = sec + "." + name;
        t[name] = {[&dst, key](const std::string& v) { dst = to_size(key, v); }, [&dst] { return std::to_string(dst); }};
    };
    size_field("vocab_size", m.vocab_size);
    size_field("d_model", m.d_model);
    size_field("n_layers", m.n_layers);
    size_field("n_heads", m.n_heads);
    size_field("d_ff", m.d_ff);
    size_field("max_seq_len", m.max_seq_len);
    // MoE spec: an empty layer list means a dense model
    t["moe_layers"] = {[&m, sec](const std::string& v) {
                           auto layers = to_sizes(sec + ".moe_layers", v);
                           if (layers.empty()) {
                               m.moe.reset();
                           } else {
                               if (!m.moe) m.moe = MoeSpec{};
                               m.moe->layers = layers;
                           }
                       },
                       [&m] { return m.moe ? sizes_text(m.moe->layers) : std::string(); }};
    t["n_experts"] = {[&m, sec](const std::string& v) {
                          if (!m.moe) m.moe = MoeSpec{8, 2, {}};
                          m.moe->n_experts = to_size(sec + ".n_experts", v);
                      },
                      [&m] { return m.moe ? std::to_string(m.moe->n_experts) : std::string("0"); }};
    t["k"] = {[&m, sec](const std::string& v) {
                  if (!m.moe) m.moe = MoeSpec{8, 2, {}};
                  m.moe->k = to_size(sec + ".k", v);
              },
              [&m] { return m.moe ? std::to_string(m.moe->k) : std::string("0"); }};
}

Table build_table(RunConfig& c) {
    Table t;
    auto sz = [](std::size_t& dst, std::string key) {
        return Field{[&dst, key](const std::string& v) { dst = to_size(key, v); }, [&dst] { return std::to_string(dst); }};
    };
    auto real = [](double& dst, std::string key) {
        return Field{[&dst, key](const std::string& v) { dst = to_double(key, v); }, [&dst] { return fmt(dst); }};
    };
    auto flag = [](bool& dst, std::string key) {
        return Field{[&dst, key](const std::string& v) { dst = to_bool(key, v); },
                     [&dst] { return std::string(dst ? "true" : "false"); }};
    };
    auto text = [](std::string& dst) {
        return Field{[&dst](const std::string& v) { dst = v; }, [&dst] { return dst; }};
    };
    auto u64 = [](std::uint64_t& dst, std::string key) {
        return Field{[&dst, key](const std::string& v) { dst = to_u64(key, v); }, [&dst] { return std::to_string(dst); }};
    };

    auto& run = t["run"];
    run["seed"] = u64(c.seed, "run.seed");
    run["out"] = text(c.out);
    run["timing"] = flag(c.timing, "run.timing");

    model_fields(t["teacher"], c.teacher, "teacher");
    model_fields(t["student"], c.student, "student");

    auto& pre = t["pretrain"];
    pre["steps"] = sz(c.pretrain.steps, "pretrain.steps");
    pre["batch_size"] = sz(c.pretrain.batch_size, "pretrain.batch_size");
    pre["lr"] = real(c.pretrain.lr, "pretrain.lr");
    pre["lb_coef"] = real(c.pretrain.lb_coef, "pretrain.lb_coef");
    pre["noisy"] = flag(c.pretrain.noisy, "pretrain.noisy");
    pre["weight_decay"] = real(c.pretrain.weight_decay, "pretrain.weight_decay");
    pre["grad_clip"] = real(c.pretrain.grad_clip, "pretrain.grad_clip");
    pre["warmup"] = sz(c.pretrain.warmup, "pretrain.warmup");
    pre["student_sft_steps"] = sz(c.student_sft_steps, "pretrain.student_sft_steps");

    auto& d = t["distill"];
    auto& dc = c.distill;
    d["method"] = {[&dc](const std::string& v) { dc.method = parse_method(v); }, [&dc] { return method_name(dc.method); }};
    d["lambda"] = real(dc.lambda, "distill.lambda");
    d["M"] = sz(dc.M, "distill.M");
    d["beta"] = real(dc.beta, "distill.beta");
    d["lr_student"] = real(dc.lr_student, "distill.lr_student");
    d["lr_router"] = real(dc.lr_router, "distill.lr_router");
    d["steps"] = sz(dc.steps, "distill.steps");
    d["batch_size"] = sz(dc.batch_size, "distill.batch_size");
    d["ka_expert_count"] = sz(dc.ka_expert_count, "distill.ka_expert_count");
    d["teacher_k"] = sz(dc.teacher_k, "distill.teacher_k");
    d["max_response"] = sz(dc.max_response, "distill.max_response");
    d["temperature"] = real(dc.sampling.temperature, "distill.temperature");
    d["top_k"] = sz(dc.sampling.top_k, "distill.top_k");
    d["top_p"] = real(dc.sampling.top_p, "distill.top_p");
    d["sar_kl_direction"] = {[&dc](const std::string& v) { dc.sar_kl_direction = parse_kl_direction(v); },
                             [&dc] { return kl_direction_name(dc.sar_kl_direction); }};
    d["beta1"] = real(dc.beta1, "distill.beta1");
    d["beta2"] = real(dc.beta2, "distill.beta2");
    d["eps"] = real(dc.eps, "distill.eps");
    d["weight_decay"] = real(dc.weight_decay, "distill.weight_decay");
    d["grad_clip"] = real(dc.grad_clip, "distill.grad_clip");
    d["probe_size"] = sz(dc.probe_size, "distill.probe_size");
    d["teacher"] = text(c.teacher_checkpoint);
    d["student"] = text(c.student_checkpoint);

    auto& data = t["data"];
    data["source"] = text(c.data.source);
    data["tasks"] = {[&c](const std::string& v) {
                         c.data.tasks.clear();
                         for (const auto& name : split_list(v)) c.data.tasks.push_back(parse_task(name));
                     },
                     [&c] {
                         std::vector<std::string> names;
                         for (Task task : c.data.tasks) names.push_back(task_name(task));
                         return join(names);
                     }};
    data["n"] = sz(c.data.n, "data.n");
    data["path"] = text(c.data.path);
    data["min_length"] = sz(c.data.min_length, "data.min_length");
    data["max_length"] = sz(c.data.max_length, "data.max_length");
    data["max_seq"] = sz(c.data.max_seq, "data.max_seq");
    data["max_request"] = sz(c.data.max_request, "data.max_request");
    data["seed"] = u64(c.data.seed, "data.seed");

    auto& ev = t["eval"];
    ev["checkpoints"] = {[&c](const std::string& v) { c.eval.checkpoints = split_list(v); },
                         [&c] { return join(c.eval.checkpoints); }};
    ev["max_new"] = sz(c.eval.max_new, "eval.max_new");
    ev["split"] = text(c.eval.split);
    ev["routing"] = text(c.eval.routing);

    auto& an = t["analyze"];
    an["kind"] = text(c.analyze.kind);
    an["teacher"] = text(c.analyze.teacher);
    an["teacher_after"] = text(c.analyze.teacher_after);
    an["k"] = sz(c.analyze.k, "analyze.k");
    an["sweep_steps"] = sz(c.analyze.sweep_steps, "analyze.sweep_steps");
    an["ks"] = {[&c](const std::string& v) { c.analyze.ks = to_sizes("analyze.ks", v); },
                [&c] { return sizes_text(c.analyze.ks); }};

    auto& sw = t["sweep"];
    sw["param"] = text(c.sweep.param);
    sw["values"] = {[&c](const std::string& v) { c.sweep.values = split_list(v); }, [&c] { return join(c.sweep.values); }};
    return t;
}

void set_value(Table& t, const std::string& section, const std::string& key, const std::string& value,
               const std::string& where) {
    auto s = t.find(section);
    if (s == t.end()) throw ConfigError(where + ": unknown section [" + section + "]");
    auto f = s->second.find(key);
    if (f == s->second.end()) throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
    f->second.set(value);
}

}  // namespace

void RunConfig::validate() const {
    try {
        teacher.validate();
        student.validate();
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
    distill.validate();
    if (!teacher.moe || teacher.moe->layers.empty()) throw ConfigError("teacher must have MoE layers");
    if (data.source != "synthetic" && data.source != "jsonl") throw ConfigError("data.source must be synthetic or jsonl");
    if (data.source == "jsonl" && data.path.empty()) throw ConfigError("data.path is required for jsonl data");
    if (data.source == "synthetic" && data.tasks.empty()) throw ConfigError("data.tasks must list at least one task");
    if (data.n == 0) throw ConfigError("data.n must be positive");
    if (data.min_length == 0 || data.min_length > data.max_length) throw ConfigError("data.min_length must lie in [1, max_length]");
    if (data.max_seq < 4) throw ConfigError("data.max_seq must be at least 4");
    if (data.max_seq > teacher.max_seq_len || data.max_seq > student.max_seq_len) {
        throw ConfigError("data.max_seq exceeds a model's max_seq_len");
    }
    if (teacher.vocab_size != student.vocab_size) throw ConfigError("teacher and student vocabularies differ");
    if (pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
    if (eval.split != "train" && eval.split != "valid" && eval.split != "test") {
        throw ConfigError("eval.split must be train, valid or test");
    }
    if (eval.routing != "all" && eval.routing != "topk") throw ConfigError("eval.routing must be all or topk");
    if (analyze.kind != "gate-mass" && analyze.kind != "router-shift" && analyze.kind != "k-sweep") {
        throw ConfigError("analyze.kind must be gate-mass, router-shift or k-sweep");
    }
    static const std::vector<std::string> params{"M", "lambda", "beta", "k", "seed", "method"};
    if (std::find(params.begin(), params.end(), sweep.param) == params.end()) {
        throw ConfigError("sweep.param must be one of M, lambda, beta, k, seed, method");
    }
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    Table table = build_table(cfg);
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = origin + ":" + std::to_string(lineno);
        const auto comment = line.find_first_of("#;");
        line = trim(comment == std::string::npos ? line : line.substr(0, comment));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (!table.count(section)) throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        if (section.empty()) throw ConfigError(where + ": key outside any section");
        set_value(table, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), path);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ConfigError("override '" + assignment + "' must look like section.key=value");
    }
    Table table = build_table(cfg);
    set_value(table, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
              trim(assignment.substr(eq + 1)), "override");
}

std::string to_ini(const RunConfig& cfg) {
    RunConfig copy = cfg;
    Table table = build_table(copy);
    std::string out;
    for (const auto& [section, fields] : table) {
        out += "[" + section + "]\n";
        for (const auto& [key, field] : fields) {
            // MoE shape keys are meaningless for a dense model
            if ((key == "n_experts" || key == "k") && (section == "teacher" || section == "student")) {
                const auto& m = section == "teacher" ? copy.teacher : copy.student;
                if (!m.moe) continue;
            }
            out += key + " = " + field.get() + "\n";
        }
        out += "\n";
    }
    return out;
}

std::string config_hash(const RunConfig& cfg) {
    // The output location names where a run goes, not what it computes.
    RunConfig settings = cfg;
    settings.out.clear();
    const std::string text = to_ini(settings);
    Fnv1a h;
    h.update(text.data(), text.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.digest()));
    return buf;
}

std::string model_config_text(const ModelConfig& m) {
    std::string s;
    s += "vocab_size = " + std::to_string(m.vocab_size) + "\n";
    s += "d_model = " + std::to_string(m.d_model) + "\n";
    s += "n_layers = " + std::to_string(m.n_layers) + "\n";
    s += "n_heads = " + std::to_string(m.n_heads) + "\n";
    s += "d_ff = " + std::to_string(m.d_ff) + "\n";
    s += "max_seq_len = " + std::to_string(m.max_seq_len) + "\n";
    if (m.moe) {
        s += "n_experts = " + std::to_string(m.moe->n_experts) + "\n";
        s += "k = " + std::to_string(m.moe->k) + "\n";
        s += "moe_layers = " + sizes_text(m.moe->layers) + "\n";
    } else {
        s += "moe_layers = \n";
    }
    return s;
}

ModelConfig parse_model_config(const std::string& text) {
    const auto parsed = parse_config("[student]\n" + text, "<checkpoint>");
    return parsed.student;
}

}  // namespace moelab
