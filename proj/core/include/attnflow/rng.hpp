#pragma once

#include <cstdint>
#include <random>

#include "attnflow/tensor.hpp"

namespace attnflow {

// Stateless 64-bit mixer used to derive independent per-layer / per-iteration
// seeds from a base seed. Deterministic across platforms.
std::uint64_t splitmix64(std::uint64_t x);

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    return splitmix64(splitmix64(splitmix64(base ^ (a * 0x9e3779b97f4a7c15ULL)) ^ b) ^ c);
}

// Deterministic RNG. mt19937_64 output is bit-specified by the standard; the
// uniform/normal/integer draws below avoid std distributions, which are not.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1) with 53 random bits; never returns 1.0.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Uniform in (0,1]; safe as a log() argument.
    double uniform_pos() { return 1.0 - uniform(); }

    // Standard normal via Box-Muller.
    double normal();

    // Uniform integer in [0, n) by rejection; n >= 1.
    std::uint64_t below(std::uint64_t n);

private:
    std::mt19937_64 eng_;
};

Tensor normal_tensor(Shape s, Rng& rng, double stddev = 1.0);
Tensor uniform_tensor(Shape s, Rng& rng, double lo, double hi);

}  // namespace attnflow
