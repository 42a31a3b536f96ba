#pragma once

#include <string>

#include "moelab/model.hpp"

namespace moelab {

// Binary container:
//   "MOELABCK" | u32 version | u64 len, model config text | u64 len, metadata
//   text | u64 count | per parameter: u32 len, name, u32 ndim, u64 extents,
//   raw little-endian f64 values | u64 FNV-1a of every preceding byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    LanguageModel model;
    std::string metadata;  // free-form provenance text, stored verbatim
};

std::string serialize_checkpoint(const LanguageModel& model, const std::string& metadata);
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "<checkpoint>");

// Atomic via a temporary file and rename.
void save_checkpoint(const std::string& path, const LanguageModel& model, const std::string& metadata);
Checkpoint load_checkpoint(const std::string& path);

// Writes `contents` to `path` through a temporary sibling and rename.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace moelab
