#pragma once

namespace moelab::tokens {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by specials.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kSep = 258;
inline constexpr int kPad = 259;
inline constexpr int kVocabSize = 260;

inline bool is_byte(int id) { return id >= 0 && id < 256; }

}  // namespace moelab::tokens
