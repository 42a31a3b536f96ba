#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace moelab {

// Seeded random source. Built on std::mt19937_64, whose output sequence is
// fixed by the standard; the distributions are implemented here rather than
// through <random> distributions so that draws are identical across
// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (one value per call, the pair's sine half
    // is cached).
    double normal();

    bool bernoulli(double p) { return uniform() < p; }

    // Index drawn with probability proportional to weights[i]. Weights must be
    // nonnegative with a positive sum.
    std::size_t categorical(std::span<const double> weights);

    // Uniform integer in [0, n).
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    std::uint64_t next_u64() { return engine_(); }

    // Child stream with an independent seed derived from this one.
    Rng fork() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace moelab
