#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moice/errors.hpp"

namespace moice {

// Rotary frequencies theta_i = B^(-2i/d), i in [0, d/2).
inline std::vector<double> compute_angles(double base, int head_dim) {
    if (base <= 0.0) throw ConfigError("rotary base must be positive");
    if (head_dim < 2 || head_dim % 2 != 0)
        throw ConfigError("head_dim must be even and >= 2, got " + std::to_string(head_dim));
    std::vector<double> theta(head_dim / 2);
    for (int i = 0; i < head_dim / 2; ++i)
        theta[i] = std::pow(base, -2.0 * i / head_dim);
    return theta;
}

// N candidate angle configurations sharing one head dimension. Pairing
// convention throughout: coordinates (2i, 2i+1) form the i-th rotation plane.
struct RopeAngleSet {
    int head_dim = 0;
    std::vector<double> bases;
    std::vector<std::vector<double>> angles; // [expert][head_dim/2]

    RopeAngleSet() = default;

    RopeAngleSet(std::vector<double> base_values, int d) : head_dim(d), bases(std::move(base_values)) {
        if (bases.empty()) throw ConfigError("angle set needs at least one base");
        for (std::size_t i = 0; i < bases.size(); ++i)
            for (std::size_t j = i + 1; j < bases.size(); ++j)
                if (bases[i] == bases[j]) throw ConfigError("duplicate rotary base in angle set");
        angles.reserve(bases.size());
        for (double b : bases) angles.push_back(compute_angles(b, d));
    }

    int num_experts() const { return static_cast<int>(bases.size()); }
};

// Applies the block-diagonal rotation at position n: pair (v[2i], v[2i+1])
// rotated by n*theta_i. Norm-preserving.
inline std::vector<double> rotate(std::span<const double> v, std::int64_t n, std::span<const double> theta) {
    if (v.size() != 2 * theta.size())
        throw ShapeError("rotate: vector length " + std::to_string(v.size()) + " vs 2*" +
                         std::to_string(theta.size()) + " angles");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double a = static_cast<double>(n) * theta[i];
        const double c = std::cos(a), s = std::sin(a);
        const double x = v[2 * i], y = v[2 * i + 1];
        out[2 * i] = c * x - s * y;
        out[2 * i + 1] = s * x + c * y;
    }
    return out;
}

// Score of a rotated query at position n against a rotated key at position m.
// Depends on the positions only through m - n.
inline double rotary_dot(std::span<const double> q, std::span<const double> k, std::int64_t n,
                         std::int64_t m, std::span<const double> theta) {
    if (q.size() != k.size()) throw ShapeError("rotary_dot: q and k lengths differ");
    const auto rq = rotate(q, n, theta);
    const auto rk = rotate(k, m, theta);
    double s = 0.0;
    for (std::size_t i = 0; i < rq.size(); ++i) s += rq[i] * rk[i];
    return s;
}

// Attention-score upper bound at relative distance x for all-one q,k:
// sum_i 2 cos(x * theta_i). Equals d at x = 0.
inline double waveform_upper_bound(std::int64_t x, std::span<const double> theta) {
    double s = 0.0;
    for (double t : theta) s += 2.0 * std::cos(static_cast<double>(x) * t);
    return s;
}

struct WaveformSample {
    std::int64_t x = 0;
    double bound = 0.0;
};

struct WaveformProfile {
    double base = 0.0;
    int head_dim = 0;
    std::vector<WaveformSample> samples;
};

inline WaveformProfile waveform_profile(double base, int head_dim, std::int64_t x_max, std::int64_t stride) {
    if (x_max <= 0) throw ConfigError("waveform x_max must be positive");
    if (stride < 1) throw ConfigError("waveform stride must be >= 1");
    const auto theta = compute_angles(base, head_dim);
    WaveformProfile p;
    p.base = base;
    p.head_dim = head_dim;
    for (std::int64_t x = 0; x <= x_max; x += stride)
        p.samples.push_back({x, waveform_upper_bound(x, theta)});
    return p;
}

inline std::int64_t waveform_trough(double base, int head_dim, std::int64_t x_max) {
    const auto theta = compute_angles(base, head_dim);
    std::int64_t best_x = 0;
    double best = waveform_upper_bound(0, theta);
    for (std::int64_t x = 1; x <= x_max; ++x) {
        const double w = waveform_upper_bound(x, theta);
        if (w < best) {
            best = w;
            best_x = x;
        }
    }
    return best_x;
}

// Complementary base sets as shipped; N=7 is the default working set.
inline std::vector<double> shipped_base_set(int n) {
    switch (n) {
        case 3: return {10000, 18000, 19000};
        case 5: return {10000, 17500, 18000, 19000, 20000};
        case 7: return {10000, 17500, 18000, 19000, 20000, 22500, 25000};
        case 9: return {10000, 13500, 17500, 18000, 19000, 20000, 22500, 24000, 25000};
        default: throw ConfigError("no shipped base set for N=" + std::to_string(n) + " (supported: 3,5,7,9)");
    }
}

// Greedy stand-in for a complementary-base search: starting from the 10000
// anchor, repeatedly add the candidate that maximizes
//   min over x in [0, x_max] of max over chosen bases of the waveform bound,
// i.e. every relative distance should be covered by some base's peak.
// Deterministic; ties broken toward the smaller base.
inline std::vector<double> greedy_complementary_search(std::vector<double> candidates, int n,
                                                       int head_dim, std::int64_t x_max) {
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    if (n < 1 || n > static_cast<int>(candidates.size()))
        throw ConfigError("greedy search needs 1 <= N <= #candidates");
    constexpr double kAnchor = 10000.0;
    if (std::find(candidates.begin(), candidates.end(), kAnchor) == candidates.end())
        candidates.push_back(kAnchor);

    const std::int64_t len = x_max + 1;
    std::vector<std::vector<double>> bound(candidates.size(), std::vector<double>(len));
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        const auto theta = compute_angles(candidates[c], head_dim);
        for (std::int64_t x = 0; x <= x_max; ++x)
            bound[c][x] = waveform_upper_bound(x, theta);
    }

    std::vector<double> chosen;
    std::vector<double> cover(len, -1e300); // running max over chosen bases
    auto pick = [&](std::size_t idx) {
        chosen.push_back(candidates[idx]);
        for (std::int64_t x = 0; x < len; ++x) cover[x] = std::max(cover[x], bound[idx][x]);
    };

    const auto anchor_it = std::find(candidates.begin(), candidates.end(), kAnchor);
    pick(static_cast<std::size_t>(anchor_it - candidates.begin()));

    while (static_cast<int>(chosen.size()) < n) {
        double best_score = -1e300;
        std::size_t best_idx = candidates.size();
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            if (std::find(chosen.begin(), chosen.end(), candidates[c]) != chosen.end()) continue;
            double worst = 1e300;
            for (std::int64_t x = 0; x < len; ++x)
                worst = std::min(worst, std::max(cover[x], bound[c][x]));
            if (worst > best_score) {
                best_score = worst;
                best_idx = c;
            }
        }
        pick(best_idx);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

} // namespace moice
