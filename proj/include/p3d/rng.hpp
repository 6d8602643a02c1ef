#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace p3d {

/// Deterministic RNG with explicit sampling code so streams are identical
/// across platforms and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0,1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi);

    /// Standard normal via Box-Muller (no cached second value, keeps the
    /// stream position independent of call interleaving).
    double normal();

    bool bernoulli(double p) { return uniform() < p; }

    /// Derive an independent child stream (for per-parameter init etc.).
    Rng fork();

    std::string serialize() const;
    void deserialize(const std::string& state);

private:
    std::mt19937_64 engine_;
};

}  // namespace p3d
