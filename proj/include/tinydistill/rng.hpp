#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tinydistill {

// All randomness flows through mt19937_64 plus the explicitly coded
// distributions below. The standard distributions
// (std::normal_distribution etc.) are implementation-defined, which would
// break the byte-identical-rerun contract across toolchains.
using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent seeds for per-example or
// per-epoch streams from (seed, stream).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Uniform double in [0, 1) using the top 53 bits.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n). n must be positive.
inline std::size_t bounded(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(rng()) * n) >> 64);
}

// Box-Muller; draws two uniforms per call so the stream advance is fixed.
inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform01(rng);
    double u2 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    return mean + stddev * z;
}

// Normal resampled until within clip standard deviations (BERT-style init).
inline double truncated_normal(Rng& rng, double mean, double stddev, double clip = 2.0) {
    for (;;) {
        double u1 = uniform01(rng);
        double u2 = uniform01(rng);
        if (u1 <= 0.0) continue;
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
        if (z >= -clip && z <= clip) return mean + stddev * z;
    }
}

// Fisher-Yates with the portable bounded() draw.
template <typename T>
void shuffle_vector(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = bounded(rng, i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace tinydistill
