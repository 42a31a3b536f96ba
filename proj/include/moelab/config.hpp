#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/distill.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct DataSpec {
    std::string source = "synthetic";  // synthetic | jsonl
    std::vector<Task> tasks{Task::Copy, Task::Reverse};
    std::size_t n = 3000;
    std::string path;  // jsonl source
    std::size_t min_length = 3;
    std::size_t max_length = 8;
    std::size_t max_seq = 32;
    std::size_t max_request = 12;
    std::uint64_t seed = 1234;  // corpus and split; independent of the run seed
};

struct EvalSpec {
    std::vector<std::string> checkpoints;
    std::size_t max_new = 16;
    std::string split = "test";  // train | valid | test
    std::string routing = "all";  // all | topk
};

struct AnalyzeSpec {
    std::string kind = "gate-mass";  // gate-mass | router-shift | k-sweep
    std::string teacher;
    std::string teacher_after;
    std::size_t k = 0;  // 0 = the teacher's k
    std::vector<std::size_t> ks{1, 2, 4, 8};
    std::size_t sweep_steps = 0;  // distillation steps per k; 0 = distill.steps
};

struct SweepSpec {
    std::string param = "M";  // M | lambda | beta | k | seed | method
    std::vector<std::string> values{"1", "2", "3"};
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "runs/default";
    bool timing = false;
    ModelConfig teacher = ModelConfig::desk_teacher();
    ModelConfig student = ModelConfig::desk_student();
    PretrainConfig pretrain;
    std::size_t student_sft_steps = 0;  // optional SFT warm start written by pretrain
    DistillConfig distill;
    std::string teacher_checkpoint;
    std::string student_checkpoint;
    DataSpec data;
    EvalSpec eval;
    AnalyzeSpec analyze;
    SweepSpec sweep;

    void validate() const;
};

// Sectioned key = value text. '#' and ';' start comments. Unknown sections
// or keys are errors.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::string& path);

// Applies one "section.key=value" override.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Canonical text of every setting; parse_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& cfg);
// FNV-1a of the canonical text without run.out, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// Model architecture alone, used inside checkpoints.
std::string model_config_text(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

}  // namespace moelab
