#pragma once

#include <exception>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/config.hpp"
#include "moelab/data.hpp"

namespace moelab {

inline constexpr const char* kVersion = MOELAB_VERSION;

// Exit codes of the command-line front end.
enum ExitCode : int { kExitOk = 0, kExitOther = 1, kExitConfig = 2, kExitIo = 3, kExitContract = 4 };
int exit_code_for(const std::exception& e);

struct Corpus {
    std::vector<EncodedExample> train, valid, test;
};
Corpus load_corpus(const DataSpec& spec, std::vector<std::string>* warnings = nullptr);

// {config_hash, seed, version}
nlohmann::json provenance(const RunConfig& cfg);

// Exclusive claim on an output directory for the lifetime of the object.
class OutputLock {
public:
    explicit OutputLock(const std::string& dir);
    ~OutputLock();
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

private:
    std::string path_;
};

// Each command writes into cfg.out and returns the summary it also writes as
// summary.json.
nlohmann::json cmd_pretrain(const RunConfig& cfg);
nlohmann::json cmd_distill(const RunConfig& cfg);
nlohmann::json cmd_analyze(const RunConfig& cfg);
nlohmann::json cmd_eval(const RunConfig& cfg);
nlohmann::json cmd_sweep(const RunConfig& cfg);

}  // namespace moelab
