#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/rng.hpp"

namespace moelab {

struct InstructionPair {
    std::string request;
    std::string response;
};

// [BOS, request..., SEP, response..., EOS]; the mask is 1 on the response
// and the EOS.
struct EncodedExample {
    std::vector<int> tokens;
    std::vector<std::uint8_t> response_mask;
    std::size_t prompt_length = 0;  // BOS + request + SEP

    std::vector<int> prompt() const { return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(prompt_length)}; }
    std::vector<int> response() const { return {tokens.begin() + static_cast<std::ptrdiff_t>(prompt_length), tokens.end()}; }
};

enum class Task { Copy, Reverse, SortBytes, CharArith };

Task parse_task(const std::string& name);
std::string task_name(Task task);

// Ground-truth response for a payload.
std::string solve(Task task, const std::string& payload);

struct SyntheticOptions {
    std::size_t min_length = 3;
    std::size_t max_length = 8;
    std::string alphabet = "abcdefgh";
    // Prefix the request with a one-byte task tag so mixtures are solvable.
    bool tagged = true;
};

char task_tag(Task task);

std::vector<InstructionPair> gen_synthetic(Task task, std::size_t n, Rng& rng, const SyntheticOptions& options = {});
// Each example's task drawn uniformly from `tasks`.
std::vector<InstructionPair> gen_mixture(const std::vector<Task>& tasks, std::size_t n, Rng& rng,
                                         const SyntheticOptions& options = {});

// One JSON object per line with "instruction" and "output" strings and an
// optional "input" appended to the instruction after a newline. Blank lines
// are skipped. An empty file yields no pairs and a warning.
std::vector<InstructionPair> load_jsonl(const std::string& path, std::vector<std::string>* warnings = nullptr);

struct EncodeLimits {
    std::size_t max_seq = 64;
    std::size_t max_request = 32;
};

EncodedExample encode(const InstructionPair& pair, const EncodeLimits& limits = {});
std::vector<EncodedExample> encode_all(const std::vector<InstructionPair>& pairs, const EncodeLimits& limits = {});

// Bytes of the token ids that are raw bytes; specials are dropped.
std::string decode(const std::vector<int>& tokens);
// Response tokens up to (not including) the first EOS.
std::string decode_response(const std::vector<int>& generated);

struct Split {
    std::vector<std::size_t> train, valid, test;
};

// Seeded permutation split in the proportion 28:1:1. Valid and test each get
// at least one example when the corpus has three or more.
Split split_indices(std::size_t n, std::uint64_t seed);

template <class T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& index) {
    std::vector<T> out;
    out.reserve(index.size());
    for (std::size_t i : index) out.push_back(items.at(i));
    return out;
}

}  // namespace moelab
