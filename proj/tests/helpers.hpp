#pragma once
// Shared test utilities: projection losses and the central finite-difference
// harness used to check every hand-derived backward pass.
//
// The loss is L = sum(r ⊙ out) with r in {-1, +1} accumulated in doubles, so
// the only f32 noise in a central difference comes from the perturbed value's
// own path through the op.  h = 1e-3, tolerance: |a - fd| must be within
// 1e-3 relative with a 1e-3 absolute floor for near-zero entries.

#include <cmath>
#include <functional>
#include <vector>

#include "voxsyn/nn.hpp"
#include "voxsyn/rng.hpp"
#include "voxsyn/tensor.hpp"

namespace th {

using namespace voxsyn;

constexpr double kFdH = 1e-3;
constexpr double kFdRel = 1e-3;
constexpr double kFdAbs = 1e-3;

inline std::vector<float> sign_proj(Rng& rng, i64 n) {
    std::vector<float> r(static_cast<std::size_t>(n));
    for (auto& v : r) v = rng.uniform() < 0.5 ? -1.0f : 1.0f;
    return r;
}

inline double proj(const Tensor5& t, const std::vector<float>& r) {
    double acc = 0.0;
    for (i64 i = 0; i < t.numel(); ++i) acc += static_cast<double>(r[i]) * t.data[i];
    return acc;
}

inline double proj(const std::vector<float>& t, const std::vector<float>& r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) acc += static_cast<double>(r[i]) * t[i];
    return acc;
}

struct FdStats {
    int total = 0, bad = 0;
    double worst = 0.0;  // worst |a - fd| / max(|a|, |fd|, 1)

    bool ok() const { return bad == 0 && total > 0; }
};

// Checks analytic gradients for `count` scalars living at arr[0..count) by
// re-evaluating `loss` under ±h perturbations.  `rel` can be loosened for
// deep f32 compositions where the forward's own rounding noise, divided by
// 2h, exceeds the per-op bound.
inline void fd_check_array(const std::function<double()>& loss, float* arr, std::size_t count,
                           const float* analytic, FdStats& st, double rel = kFdRel,
                           double abs_floor = kFdAbs) {
    for (std::size_t i = 0; i < count; ++i) {
        const float keep = arr[i];
        arr[i] = keep + static_cast<float>(kFdH);
        const double lp = loss();
        arr[i] = keep - static_cast<float>(kFdH);
        const double lm = loss();
        arr[i] = keep;
        const double fd = (lp - lm) / (2.0 * kFdH);
        const double a = analytic[i];
        const double err = std::abs(a - fd);
        const double scale = std::max({std::abs(a), std::abs(fd), abs_floor / rel});
        st.total += 1;
        st.worst = std::max(st.worst, err / scale);
        if (err > rel * scale) st.bad += 1;
    }
}

// ---------------------------------------------------------------------
//  Random chain generator for split-equivalence sweeps
// ---------------------------------------------------------------------

struct RandomChainCase {
    voxsyn::LayerChain chain;
    std::array<voxsyn::i64, 5> dims;  // input shape
    bool has_norm = false;
};

// Seeded random conv chains over small shapes: stride-1 and stride-2 convs,
// group norms, activations, upsamples.  Shapes stay tiny so a sweep of many
// chains runs in seconds.  force_norm=true guarantees at least one norm
// layer (for statistics-ablation sweeps).
inline RandomChainCase make_random_chain(voxsyn::Rng& rng, bool force_norm = false) {
    using namespace voxsyn;
    RandomChainCase rc;
    i64 c = rng.uniform_int(1, 3);
    i64 d = rng.uniform_int(6, 18), h = rng.uniform_int(4, 8), w = rng.uniform_int(4, 8);
    rc.dims = {1, c, d, h, w};

    const i64 n_layers = rng.uniform_int(2, 6);
    i64 cd = d, ch = h, cw = w;
    for (i64 i = 0; i < n_layers; ++i) {
        const i64 pick = rng.uniform_int(0, 9);
        if (pick <= 3) {  // stride-1 conv
            const i64 co = rng.uniform_int(1, 4);
            const i64 k = rng.uniform_int(0, 1) ? 3 : 1;
            rc.chain.layers.push_back(
                Conv3dLayer(c, co, {k, k, k}, {1, 1, 1}));
            c = co;
        } else if (pick <= 5 && cd >= 4 && ch >= 4 && cw >= 4) {  // stride-2 conv
            const i64 co = rng.uniform_int(1, 4);
            // k < s cases leave unread input rows — the planner's coverage
            // closure path — so k = 1 is deliberately in the pool.
            const i64 k = rng.uniform_int(1, 3);
            rc.chain.layers.push_back(Conv3dLayer(c, co, {k, k, k}, {2, 2, 2}));
            c = co;
            cd = conv_out_extent(cd, k, 2, k / 2);
            ch = conv_out_extent(ch, k, 2, k / 2);
            cw = conv_out_extent(cw, k, 2, k / 2);
        } else if (pick <= 7) {  // group norm
            const i64 g = (c % 2 == 0 && rng.uniform_int(0, 1)) ? 2 : 1;
            rc.chain.layers.push_back(GroupNormLayer(c, g));
            rc.has_norm = true;
        } else if (pick == 8 && cd <= 12 && ch <= 8 && cw <= 8) {  // upsample
            rc.chain.layers.push_back(UpsampleLayer{});
            cd *= 2;
            ch *= 2;
            cw *= 2;
        } else {
            const ActKind kinds[3] = {ActKind::silu, ActKind::relu, ActKind::leaky_relu};
            rc.chain.layers.push_back(ActivationLayer{kinds[rng.uniform_int(0, 2)]});
        }
    }
    if (force_norm && !rc.has_norm) {
        rc.chain.layers.push_back(GroupNormLayer(c, 1));
        rc.has_norm = true;
    }
    init_chain(rc.chain, rng);
    // Perturb norm scales so norm layers are not near-identity.
    for (Layer& l : rc.chain.layers)
        if (auto* gn = std::get_if<GroupNormLayer>(&l)) {
            for (auto& v : gn->gamma.w) v = 1.0f + 0.2f * rng.normal();
            for (auto& v : gn->beta.w) v = 0.2f * rng.normal();
        }
    return rc;
}

}  // namespace th
