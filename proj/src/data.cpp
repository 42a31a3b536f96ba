#include "moelab/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "moelab/errors.hpp"
#include "moelab/tokens.hpp"

namespace moelab {

Task parse_task(const std::string& name) {
    if (name == "copy") return Task::Copy;
    if (name == "reverse") return Task::Reverse;
    if (name == "sort_bytes") return Task::SortBytes;
    if (name == "char_arith") return Task::CharArith;
    throw ConfigError("unknown synthetic task '" + name + "' (copy, reverse, sort_bytes, char_arith)");
}

std::string task_name(Task task) {
    switch (task) {
        case Task::Copy: return "copy";
        case Task::Reverse: return "reverse";
        case Task::SortBytes: return "sort_bytes";
        case Task::CharArith: return "char_arith";
    }
    return "?";
}

char task_tag(Task task) {
    switch (task) {
        case Task::Copy: return 'C';
        case Task::Reverse: return 'R';
        case Task::SortBytes: return 'S';
        case Task::CharArith: return 'A';
    }
    return '?';
}

std::string solve(Task task, const std::string& payload) {
    switch (task) {
        case Task::Copy: return payload;
        case Task::Reverse: return {payload.rbegin(), payload.rend()};
        case Task::SortBytes: {
            std::string s = payload;
            std::sort(s.begin(), s.end());
            return s;
        }
        case Task::CharArith: {
            // "d+d" or "d-d" over single digits
            if (payload.size() != 3 || (payload[1] != '+' && payload[1] != '-')) {
                throw ContractError("char_arith: payload must look like 'd+d' or 'd-d'");
            }
            const int a = payload[0] - '0', b = payload[2] - '0';
            return std::to_string(payload[1] == '+' ? a + b : a - b);
        }
    }
    return {};
}

std::vector<InstructionPair> gen_synthetic(Task task, std::size_t n, Rng& rng, const SyntheticOptions& options) {
    return gen_mixture({task}, n, rng, options);
}

std::vector<InstructionPair> gen_mixture(const std::vector<Task>& tasks, std::size_t n, Rng& rng,
                                         const SyntheticOptions& options) {
    if (n == 0) throw ContractError("gen_synthetic: n must be at least 1");
    if (tasks.empty()) throw ContractError("gen_synthetic: no tasks");
    if (options.alphabet.empty() || options.min_length == 0 || options.min_length > options.max_length) {
        throw ContractError("gen_synthetic: bad alphabet or length range");
    }
    std::vector<InstructionPair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Task task = tasks.size() == 1 ? tasks[0] : tasks[rng.below(tasks.size())];
        std::string payload;
        if (task == Task::CharArith) {
            payload = {static_cast<char>('0' + rng.below(10)), rng.bernoulli(0.5) ? '+' : '-',
                       static_cast<char>('0' + rng.below(10))};
        } else {
            const std::size_t len = options.min_length + rng.below(options.max_length - options.min_length + 1);
            for (std::size_t j = 0; j < len; ++j) payload.push_back(options.alphabet[rng.below(options.alphabet.size())]);
        }
        std::string request = options.tagged ? std::string(1, task_tag(task)) + payload : payload;
        out.push_back({std::move(request), solve(task, payload)});
    }
    return out;
}

std::vector<InstructionPair> load_jsonl(const std::string& path, std::vector<std::string>* warnings) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open dataset '" + path + "'");
    std::vector<InstructionPair> out;
    std::vector<std::string> problems;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto obj = nlohmann::json::parse(line, nullptr, false);
        const std::string where = "line " + std::to_string(lineno);
        if (obj.is_discarded() || !obj.is_object()) {
            problems.push_back(where + ": not a JSON object");
            continue;
        }
        auto text = [&](const char* key, bool required, std::string& dst) {
            auto it = obj.find(key);
            if (it == obj.end()) {
                if (required) problems.push_back(where + ": missing \"" + key + "\"");
                return;
            }
            if (!it->is_string()) {
                problems.push_back(where + ": \"" + key + "\" is not a string");
                return;
            }
            dst = it->get<std::string>();
        };
        InstructionPair p;
        std::string input;
        const std::size_t before = problems.size();
        text("instruction", true, p.request);
        text("input", false, input);
        text("output", true, p.response);
        if (problems.size() != before) continue;
        if (!input.empty()) p.request += "\n" + input;
        out.push_back(std::move(p));
    }
    if (!problems.empty()) {
        std::string msg = "malformed dataset '" + path + "':";
        for (const auto& p : problems) msg += "\n  " + p;
        throw IngestionError(msg);
    }
    if (out.empty() && warnings) warnings->push_back("dataset '" + path + "' contains no examples");
    return out;
}

EncodedExample encode(const InstructionPair& pair, const EncodeLimits& limits) {
    if (limits.max_seq < 4) throw ContractError("encode: max_seq must leave room for BOS, SEP, a response byte and EOS");
    // request is cut first, keeping at most max_request bytes and leaving room
    // for one response byte
    std::size_t req = std::min({pair.request.size(), limits.max_request, limits.max_seq - 4});
    std::size_t resp = std::min(pair.response.size(), limits.max_seq - 3 - req);
    if (resp == 0) throw ContractError("encode: empty response after truncation");
    EncodedExample ex;
    ex.tokens.reserve(req + resp + 3);
    ex.tokens.push_back(tokens::kBos);
    for (std::size_t i = 0; i < req; ++i) ex.tokens.push_back(static_cast<unsigned char>(pair.request[i]));
    ex.tokens.push_back(tokens::kSep);
    ex.prompt_length = ex.tokens.size();
    for (std::size_t i = 0; i < resp; ++i) ex.tokens.push_back(static_cast<unsigned char>(pair.response[i]));
    ex.tokens.push_back(tokens::kEos);
    ex.response_mask.assign(ex.tokens.size(), 0);
    std::fill(ex.response_mask.begin() + static_cast<std::ptrdiff_t>(ex.prompt_length), ex.response_mask.end(), 1);
    return ex;
}

std::vector<EncodedExample> encode_all(const std::vector<InstructionPair>& pairs, const EncodeLimits& limits) {
    std::vector<EncodedExample> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(encode(p, limits));
    return out;
}

std::string decode(const std::vector<int>& ids) {
    std::string s;
    for (int id : ids) {
        if (tokens::is_byte(id)) s.push_back(static_cast<char>(id));
    }
    return s;
}

std::string decode_response(const std::vector<int>& generated) {
    auto end = std::find(generated.begin(), generated.end(), tokens::kEos);
    return decode({generated.begin(), end});
}

Split split_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::size_t held = n / 30;
    if (held == 0 && n >= 3) held = 1;
    Split s;
    s.valid.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(held), order.begin() + static_cast<std::ptrdiff_t>(2 * held));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(2 * held), order.end());
    return s;
}

}  // namespace moelab
