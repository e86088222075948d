#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace psvit {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic RNG with pinned uniform/normal transforms so the same seed
// yields the same stream on any platform (std distributions are
// implementation-defined; we only use the raw mt19937_64 output).
struct Rng {
    std::mt19937_64 gen;
    std::uint64_t seed0;
    bool have_spare = false;
    double spare = 0;

    explicit Rng(std::uint64_t seed) : gen(seed), seed0(seed) {}

    std::uint64_t next_u64() { return gen(); }

    double uniform() { return double(gen() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, one spare cached.
    double normal() {
        if (have_spare) {
            have_spare = false;
            return spare;
        }
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare = r * std::sin(a);
        have_spare = true;
        return r * std::cos(a);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // inclusive range
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = std::uint64_t(hi - lo) + 1;
        return lo + std::int64_t(gen() % span);
    }

    // Independent child stream; deterministic in (seed, k).
    Rng fork(std::uint64_t k) const { return Rng(splitmix64(seed0 ^ splitmix64(k + 1))); }
};

}  // namespace psvit
