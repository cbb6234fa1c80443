// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gac {

// Violated precondition or internal invariant. CLI maps this to exit code 3.
struct InvariantError : std::runtime_error {
    explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / serialization failure. CLI maps this to exit code 2.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvariantError(msg);
}

// splitmix64: used for seed scrambling and counter-based streams.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d49bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash64(uint64_t x) {
    uint64_t s = x;
    return splitmix64(s);
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derives the seed of a named sub-stream from a root seed. Stable across runs
// and platforms; every consumer of randomness pulls from its own stream so
// adding a feature never perturbs an unrelated one.
inline uint64_t substream_seed(uint64_t root, std::string_view name) {
    uint64_t s = root ^ hash_str(name);
    return splitmix64(s);
}

inline uint64_t substream_seed(uint64_t root, std::string_view name, uint64_t index) {
    uint64_t s = substream_seed(root, name) ^ (0x9e3779b97f4a7c15ull + index);
    return splitmix64(s);
}

// Deterministic RNG. Wraps mt19937_64 but maps bits to doubles itself:
// std::uniform_real_distribution and std::normal_distribution are
// implementation-defined, which would break bit-reproducibility guarantees.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(hash64(seed)) {}

    uint64_t bits() { return eng_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    int uniform_int(int n) {
        require(n > 0, "Rng::uniform_int: n must be positive");
        return int(eng_() % uint64_t(n));
    }

    // Standard normal via Box-Muller; caches the paired deviate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard log(0).
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Counter-based standard normal: value depends only on (seed, key), not on
// call order. Used where per-element noise must survive reordering.
inline double normal_at(uint64_t seed, uint64_t key) {
    uint64_t s = seed ^ (key * 0x9e3779b97f4a7c15ull);
    uint64_t a = splitmix64(s);
    uint64_t b = splitmix64(s);
    double u1 = double(a >> 11) * 0x1.0p-53;
    double u2 = double(b >> 11) * 0x1.0p-53;
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace gac
