#pragma once
// toydata.hpp
//
// Small deterministic datasets for the toy training loops.  Everything is
// generated from a seed so trajectories (and therefore the training
// criteria) are reproducible run to run.

#include <vector>

#include "rng.hpp"
#include "tensor.hpp"
#include "volume.hpp"

namespace voxsyn {

// =====================================================================
//  Blob volumes (autoencoder fodder)
// =====================================================================

// Smooth synthetic "organs": a flat 0.2 background plus a few gaussian
// bumps, clamped to [0, 1].
inline std::vector<Tensor5> make_blob_volumes(int count = 8, i64 side = 32,
                                              std::uint64_t seed = 4242) {
    Rng rng(seed);
    std::vector<Tensor5> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Tensor5 v(1, 1, side, side, side);
        std::fill(v.data.begin(), v.data.end(), 0.2f);
        const int n_blobs = static_cast<int>(rng.uniform_int(2, 4));
        for (int b = 0; b < n_blobs; ++b) {
            const double cd = rng.uniform(0.2, 0.8) * static_cast<double>(side);
            const double ch = rng.uniform(0.2, 0.8) * static_cast<double>(side);
            const double cw = rng.uniform(0.2, 0.8) * static_cast<double>(side);
            const double sg = rng.uniform(0.10, 0.20) * static_cast<double>(side);
            const double amp = rng.uniform(0.3, 0.8);
            for (i64 d = 0; d < side; ++d)
                for (i64 h = 0; h < side; ++h)
                    for (i64 w = 0; w < side; ++w) {
                        const double r2 = (d - cd) * (d - cd) + (h - ch) * (h - ch) +
                                          (w - cw) * (w - cw);
                        v.at(0, 0, d, h, w) +=
                            static_cast<float>(amp * std::exp(-r2 / (2.0 * sg * sg)));
                    }
        }
        for (auto& x : v.data) x = std::clamp(x, 0.0f, 1.0f);
        out.push_back(std::move(v));
    }
    return out;
}

// =====================================================================
//  Fixed latent targets (diffusion fodder)
// =====================================================================

struct LatentSample {
    Tensor5 z0;
    PrimaryCond cond;
};

namespace detail {

// Low-frequency field: white noise smoothed twice with a 3^3 box filter,
// then rescaled to an exact population std.  Smoothness makes the handful
// of samples easy to memorize; the amplitude keeps them identifiable
// against unit noise.
inline Tensor5 smooth_field(const std::array<i64, 5>& dims, Rng& rng, float target_std) {
    Tensor5 t = Tensor5::shaped(dims);
    rng.fill_normal(t);
    for (int pass = 0; pass < 2; ++pass) {
        Tensor5 s = Tensor5::shaped(dims);
        for (i64 n = 0; n < dims[0]; ++n)
            for (i64 c = 0; c < dims[1]; ++c)
                for (i64 d = 0; d < dims[2]; ++d)
                    for (i64 h = 0; h < dims[3]; ++h)
                        for (i64 w = 0; w < dims[4]; ++w) {
                            double acc = 0;
                            int cnt = 0;
                            for (i64 dd = -1; dd <= 1; ++dd)
                                for (i64 dh = -1; dh <= 1; ++dh)
                                    for (i64 dw = -1; dw <= 1; ++dw) {
                                        const i64 id = d + dd, ih = h + dh, iw = w + dw;
                                        if (id < 0 || id >= dims[2] || ih < 0 ||
                                            ih >= dims[3] || iw < 0 || iw >= dims[4])
                                            continue;
                                        acc += t.at(n, c, id, ih, iw);
                                        ++cnt;
                                    }
                            s.at(n, c, d, h, w) = static_cast<float>(acc / cnt);
                        }
        t = std::move(s);
    }
    double mean = 0;
    for (float v : t.data) mean += v;
    mean /= static_cast<double>(t.numel());
    double var = 0;
    for (float v : t.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(t.numel());
    const float k = static_cast<float>(target_std / std::sqrt(var));
    for (auto& v : t.data) v = (v - static_cast<float>(mean)) * k;
    return t;
}

}  // namespace detail

// Three cubes and two elongated volumes, amplitude ~±2, with distinct
// anatomical conditions.
inline std::vector<LatentSample> make_latent_toyset(i64 lc = 4, std::uint64_t seed = 5151) {
    Rng rng(seed);
    const std::array<std::array<i64, 5>, 5> shapes{{{1, lc, 8, 8, 8},
                                                    {1, lc, 8, 8, 8},
                                                    {1, lc, 8, 8, 8},
                                                    {1, lc, 8, 8, 16},
                                                    {1, lc, 8, 8, 16}}};
    const std::array<std::pair<Region, Region>, 5> regions{{
        {Region::head_neck, Region::chest},
        {Region::chest, Region::abdomen},
        {Region::abdomen, Region::lower_body},
        {Region::head_neck, Region::abdomen},
        {Region::chest, Region::lower_body},
    }};
    const std::array<std::array<float, 3>, 5> spacings{{{1.0f, 0.8f, 0.8f},
                                                        {1.5f, 0.7f, 0.7f},
                                                        {2.0f, 1.0f, 1.0f},
                                                        {0.92f, 0.86f, 0.86f},
                                                        {3.0f, 1.5f, 1.5f}}};
    std::vector<LatentSample> out;
    for (int i = 0; i < 5; ++i) {
        LatentSample s;
        // Unit std matches both the diffusion process's noise scale and what
        // a KL-regularized encoder emits; larger scales visibly degrade
        // ancestral recovery of a memorized latent.
        s.z0 = detail::smooth_field(shapes[static_cast<std::size_t>(i)], rng, 1.0f);
        VolumeMeta meta;
        meta.top = regions[static_cast<std::size_t>(i)].first;
        meta.bottom = regions[static_cast<std::size_t>(i)].second;
        meta.spacing = spacings[static_cast<std::size_t>(i)];
        s.cond = encode_primary_cond(meta);
        out.push_back(std::move(s));
    }
    return out;
}

// =====================================================================
//  Mask-correlated latents (control-branch fodder)
// =====================================================================

struct ControlSample {
    Tensor5 z0;        // latent the branch should learn to steer toward
    SegMask mask;      // full-resolution segmentation driving it
    PrimaryCond cond;  // identical across samples: the mask carries the signal
};

// Each sample places a label-2 sphere at a different corner of a label-1
// body.  z0 is a function of the sphere position (downsampled indicator
// with alternating channel signs), so the mask fully determines the target
// while the anatomical condition does not.
inline std::vector<ControlSample> make_control_toyset(i64 lc = 4, i64 f = 4, i64 side = 32,
                                                      std::uint64_t seed = 6161) {
    Rng rng(seed);
    VolumeMeta meta;
    meta.top = Region::abdomen;
    meta.bottom = Region::abdomen;
    meta.spacing = {1.0f, 1.0f, 1.0f};

    const i64 ls = side / f;  // latent side
    const std::array<std::array<double, 3>, 4> centers{{{0.30, 0.30, 0.30},
                                                        {0.70, 0.30, 0.70},
                                                        {0.30, 0.70, 0.70},
                                                        {0.70, 0.70, 0.30}}};
    std::vector<ControlSample> out;
    for (int i = 0; i < 4; ++i) {
        ControlSample s;
        s.cond = encode_primary_cond(meta);
        s.mask.meta = meta;
        s.mask.dims = {side, side, side};
        s.mask.labels.assign(static_cast<std::size_t>(side * side * side), 0);
        const double cd = centers[static_cast<std::size_t>(i)][0] * side;
        const double ch = centers[static_cast<std::size_t>(i)][1] * side;
        const double cw = centers[static_cast<std::size_t>(i)][2] * side;
        const double r_body = 0.45 * side, r_sph = 0.12 * side;
        for (i64 d = 0; d < side; ++d)
            for (i64 h = 0; h < side; ++h)
                for (i64 w = 0; w < side; ++w) {
                    const double db = (d - side / 2.0) * (d - side / 2.0) +
                                      (h - side / 2.0) * (h - side / 2.0) +
                                      (w - side / 2.0) * (w - side / 2.0);
                    const double ds =
                        (d - cd) * (d - cd) + (h - ch) * (h - ch) + (w - cw) * (w - cw);
                    std::uint16_t l = 0;
                    if (db < r_body * r_body) l = 1;
                    if (ds < r_sph * r_sph) l = 2;
                    s.mask.labels[static_cast<std::size_t>((d * side + h) * side + w)] = l;
                }
        // Latent: alternating-sign sphere indicator at latent resolution plus
        // a faint seeded texture so channels are not exactly constant.
        s.z0 = Tensor5(1, lc, ls, ls, ls);
        for (i64 c = 0; c < lc; ++c) {
            const float sign = (c % 2 == 0) ? 1.0f : -1.0f;
            for (i64 d = 0; d < ls; ++d)
                for (i64 h = 0; h < ls; ++h)
                    for (i64 w = 0; w < ls; ++w) {
                        const double fd = (d + 0.5) * f, fh = (h + 0.5) * f,
                                     fw = (w + 0.5) * f;
                        const double ds = (fd - cd) * (fd - cd) + (fh - ch) * (fh - ch) +
                                          (fw - cw) * (fw - cw);
                        const bool inside = ds < (r_sph + f) * (r_sph + f);
                        s.z0.at(0, c, d, h, w) =
                            (inside ? sign * 1.8f : -sign * 0.4f) + 0.1f * rng.normal();
                    }
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace voxsyn
