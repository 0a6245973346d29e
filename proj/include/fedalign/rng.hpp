#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fedalign {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent stream seed derived from a base seed and a key path,
/// e.g. derive_seed(seed, {round, client_id}).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = splitmix64(seed);
    for (auto k : keys) {
        h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    }
    return h;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {}) {
    return Rng(derive_seed(seed, keys));
}

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::vector<double> normal_vector(Rng& rng, std::size_t n, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

inline std::vector<double> rademacher_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = (rng() & 1ULL) ? 1.0 : -1.0;
    return v;
}

/// Beta(a, b) via two Gamma draws; redraws the (underflow) case where both are zero.
inline double beta_sample(Rng& rng, double a, double b) {
    std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
    for (;;) {
        const double x = ga(rng);
        const double y = gb(rng);
        if (x + y > 0.0) {
            return x / (x + y);
        }
    }
}

} // namespace fedalign
