#include "attnflow/rng.hpp"

#include <cmath>

namespace attnflow {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double Rng::normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw DomainError("Rng::below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return v % n;
}

Tensor normal_tensor(Shape s, Rng& rng, double stddev) {
    Tensor t(s);
    for (auto& v : t.data) v = stddev * rng.normal();
    return t;
}

Tensor uniform_tensor(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(s);
    for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
    return t;
}

}  // namespace attnflow
