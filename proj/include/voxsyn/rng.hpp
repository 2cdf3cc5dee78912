#pragma once
// rng.hpp
//
// Seeded RNG used everywhere randomness appears (init, noise draws, toy
// data).  mt19937_64 is fully specified by the standard and the normal
// transform is our own Box-Muller, so a given seed yields the same stream on
// every build — the determinism contracts (byte-identical artifacts for the
// same seed) lean on this.

#include <cmath>
#include <cstdint>
#include <random>

#include "tensor.hpp"

namespace voxsyn {

struct Rng {
    std::mt19937_64 eng;
    bool have_spare = false;
    float spare = 0.0f;

    explicit Rng(std::uint64_t seed) : eng(seed) {}

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(eng() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    i64 uniform_int(i64 lo, i64 hi) {  // inclusive bounds
        return lo + static_cast<i64>(eng() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    // Standard normal via Box-Muller; pairs generated, one cached.
    float normal() {
        if (have_spare) {
            have_spare = false;
            return spare;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586477 * u2;
        spare = static_cast<float>(r * std::sin(a));
        have_spare = true;
        return static_cast<float>(r * std::cos(a));
    }

    void fill_normal(Tensor5& t, float scale = 1.0f) {
        for (auto& v : t.data) v = scale * normal();
    }

    void fill_uniform(Tensor5& t, float lo, float hi) {
        for (auto& v : t.data) v = static_cast<float>(uniform(lo, hi));
    }
};

}  // namespace voxsyn
