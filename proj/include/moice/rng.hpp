#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace moice {

// Deterministic RNG wrapper. std::uniform_*_distribution output is
// implementation-defined, so all draws are derived here from raw mt19937_64
// words to keep artifacts byte-identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(mix(seed)) {}

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // tiny compared to 2^64, bias < 2^-50.
    std::uint64_t next_below(std::uint64_t n) {
        return eng_() % n;
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // Standard normal via Box-Muller (pairwise, one cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream; used to decouple corpus/init/eval randomness.
    Rng fork(std::uint64_t stream) {
        return Rng(mix(eng_() ^ (0x9e3779b97f4a7c15ULL * (stream + 1))));
    }

private:
    static std::uint64_t mix(std::uint64_t x) {
        // splitmix64 finalizer; avoids correlated mt19937_64 seedings
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace moice
