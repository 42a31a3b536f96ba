#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Violated precondition of an operation (bad argument, wrong state).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Operand extents do not agree.
class DimensionError : public ContractError {
public:
    using ContractError::ContractError;
};

// A softmax slice with no finite entry.
class DegenerateSliceError : public ContractError {
public:
    using ContractError::ContractError;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dataset lines that failed to parse. what() lists every offending line.
class IngestionError : public IoError {
public:
    using IoError::IoError;
};

}  // namespace moelab
