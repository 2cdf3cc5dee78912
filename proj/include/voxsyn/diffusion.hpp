#pragma once
// diffusion.hpp
//
// Conditioned latent diffusion: a DDPM noise schedule, an epsilon-predicting
// 3D UNet over VAE latents, the training objective, and the ancestral
// sampler.  Conditioning is an 11-float vector — two one-hot body regions
// plus normalized voxel spacing — embedded alongside the timestep and added
// as per-channel biases inside every residual block, so the same weights
// serve any volume size the latent grid allows.

#include <cmath>
#include <string>
#include <vector>

#include "nn.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "volume.hpp"

namespace voxsyn {

// =====================================================================
//  Noise schedule
// =====================================================================

struct NoiseSchedule {
    i64 T = 0;
    std::vector<double> beta, alpha, alpha_bar;  // index t-1 for t in [1, T]

    double abar(i64 t) const {  // abar(0) == 1 closes the t=1 step
        if (t < 0 || t > T) throw std::invalid_argument("schedule: t out of range");
        return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
    }
};

inline NoiseSchedule make_schedule(i64 T, double beta_min = 1e-4, double beta_max = 0.02) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw std::invalid_argument("schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule ns;
    ns.T = T;
    double bar = 1.0;
    for (i64 t = 0; t < T; ++t) {
        const double b =
            T == 1 ? beta_min
                   : beta_min + (beta_max - beta_min) * static_cast<double>(t) /
                                    static_cast<double>(T - 1);
        ns.beta.push_back(b);
        ns.alpha.push_back(1.0 - b);
        bar *= 1.0 - b;
        ns.alpha_bar.push_back(bar);
    }
    return ns;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
inline Tensor5 q_sample(const NoiseSchedule& ns, const Tensor5& z0, i64 t, const Tensor5& eps) {
    if (t < 1 || t > ns.T) throw std::invalid_argument("q_sample: t out of range");
    detail::check_same_shape(z0, eps, "q_sample");
    const float a = static_cast<float>(std::sqrt(ns.abar(t)));
    const float b = static_cast<float>(std::sqrt(1.0 - ns.abar(t)));
    Tensor5 zt = Tensor5::shaped(z0.dims);
    for (i64 i = 0; i < z0.numel(); ++i) zt.data[i] = a * z0.data[i] + b * eps.data[i];
    return zt;
}

// One ancestral step t -> t-1.  noise is ignored at t == 1.
inline Tensor5 ddpm_step(const NoiseSchedule& ns, const Tensor5& z_t, const Tensor5& eps_hat,
                         i64 t, const Tensor5* noise) {
    if (t < 1 || t > ns.T) throw std::invalid_argument("ddpm_step: t out of range");
    detail::check_same_shape(z_t, eps_hat, "ddpm_step");
    const double beta = ns.beta[static_cast<std::size_t>(t - 1)];
    const double alpha = ns.alpha[static_cast<std::size_t>(t - 1)];
    const float k_eps = static_cast<float>(beta / std::sqrt(1.0 - ns.abar(t)));
    const float k_all = static_cast<float>(1.0 / std::sqrt(alpha));
    Tensor5 out = Tensor5::shaped(z_t.dims);
    for (i64 i = 0; i < out.numel(); ++i)
        out.data[i] = k_all * (z_t.data[i] - k_eps * eps_hat.data[i]);
    if (t > 1) {
        if (noise == nullptr) throw std::invalid_argument("ddpm_step: noise required for t > 1");
        detail::check_same_shape(z_t, *noise, "ddpm_step noise");
        const float sigma = static_cast<float>(
            std::sqrt((1.0 - ns.abar(t - 1)) / (1.0 - ns.abar(t)) * beta));
        for (i64 i = 0; i < out.numel(); ++i) out.data[i] += sigma * noise->data[i];
    }
    return out;
}

// =====================================================================
//  Conditioning and embeddings
// =====================================================================

inline constexpr i64 kCondDim = 11;  // 4 + 4 region one-hots, 3 spacing floats

// [i_top | i_bottom | spacing/5 clamped to [0,1]]
inline std::vector<float> cond_vector(const PrimaryCond& c) {
    std::vector<float> v;
    v.reserve(kCondDim);
    for (float x : c.i_top) v.push_back(x);
    for (float x : c.i_bottom) v.push_back(x);
    for (float s : c.s) v.push_back(std::clamp(s / 5.0f, 0.0f, 1.0f));
    return v;
}

// Transformer-style sinusoidal features of the integer timestep.
inline std::vector<float> time_features(i64 t, i64 te) {
    if (te < 2 || te % 2 != 0) throw std::invalid_argument("time_features: te must be even >= 2");
    const i64 half = te / 2;
    std::vector<float> f(static_cast<std::size_t>(te));
    for (i64 i = 0; i < half; ++i) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(i) /
                     static_cast<double>(std::max<i64>(1, half - 1)));
        f[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(t * freq));
        f[static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(t * freq));
    }
    return f;
}

// Two-layer MLP with a SiLU between — the embedding head for both the
// timestep and the condition vector.
struct Mlp2 {
    LinearLayer l1, l2;

    Mlp2() = default;
    Mlp2(i64 in, i64 hidden, i64 out) : l1(in, hidden), l2(hidden, out) {}
};

struct Mlp2Cache {
    std::vector<float> x, h1, a1;
};

inline std::vector<float> mlp2_forward(const Mlp2& m, const std::vector<float>& x,
                                       Mlp2Cache* cache = nullptr) {
    std::vector<float> h1 = linear_forward(m.l1, x);
    std::vector<float> a1(h1.size());
    for (std::size_t i = 0; i < h1.size(); ++i) a1[i] = act_eval(ActKind::silu, 0.0f, h1[i]);
    std::vector<float> y = linear_forward(m.l2, a1);
    if (cache) {
        cache->x = x;
        cache->h1 = std::move(h1);
        cache->a1 = std::move(a1);
    }
    return y;
}

inline std::vector<float> mlp2_backward(Mlp2& m, const Mlp2Cache& c,
                                        const std::vector<float>& gy, bool accumulate = true) {
    LinearGrads g2 = linear_backward(m.l2, c.a1, gy);
    std::vector<float> gh1(c.h1.size());
    for (std::size_t i = 0; i < c.h1.size(); ++i)
        gh1[i] = g2.grad_x[i] * act_grad(ActKind::silu, 0.0f, c.h1[i]);
    LinearGrads g1 = linear_backward(m.l1, c.x, gh1);
    if (accumulate) {
        for (std::size_t i = 0; i < g2.grad_W.size(); ++i) m.l2.W.g[i] += g2.grad_W[i];
        for (std::size_t i = 0; i < g2.grad_b.size(); ++i) m.l2.b.g[i] += g2.grad_b[i];
        for (std::size_t i = 0; i < g1.grad_W.size(); ++i) m.l1.W.g[i] += g1.grad_W[i];
        for (std::size_t i = 0; i < g1.grad_b.size(); ++i) m.l1.b.g[i] += g1.grad_b[i];
    }
    return g1.grad_x;
}

// =====================================================================
//  Residual block
// =====================================================================

// Most groups dividing c while keeping every group at least two channels
// wide.  A single-channel group would normalize away the per-channel
// embedding bias added between the convs — the norm subtracts exactly what
// the embedding added — silently disconnecting the conditioning.
inline i64 pick_groups(i64 c) {
    if (c % 4 == 0 && c / 4 >= 2) return 4;
    if (c % 2 == 0 && c / 2 >= 2) return 2;
    return 1;
}

// gn -> silu -> conv -> +emb bias -> gn -> silu -> conv, plus a (1x1-conv
// projected) skip.  The embedding enters as a per-channel bias after the
// first conv.
struct ResBlock {
    i64 c_in = 0, c_out = 0;
    GroupNormLayer gn1, gn2;
    Conv3dLayer conv1, conv2;
    LinearLayer emb;    // te -> c_out
    Conv3dLayer skip;   // k1, only used when c_in != c_out
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(i64 ci, i64 co, i64 te)
        : c_in(ci),
          c_out(co),
          gn1(ci, pick_groups(ci)),
          gn2(co, pick_groups(co)),
          conv1(ci, co, {3, 3, 3}, {1, 1, 1}),
          conv2(co, co, {3, 3, 3}, {1, 1, 1}),
          emb(te, co),
          skip(ci, co, {1, 1, 1}, {1, 1, 1}),
          has_skip(ci != co) {}

    void init(Rng& rng) {
        init_conv(conv1, rng);
        init_conv(conv2, rng);
        init_linear(emb, rng);
        if (has_skip) init_conv(skip, rng);
    }
    void collect_params(std::vector<ParamTensor*>& out) {
        out.push_back(&gn1.gamma);
        out.push_back(&gn1.beta);
        out.push_back(&conv1.weight);
        out.push_back(&conv1.bias);
        out.push_back(&emb.W);
        out.push_back(&emb.b);
        out.push_back(&gn2.gamma);
        out.push_back(&gn2.beta);
        out.push_back(&conv2.weight);
        out.push_back(&conv2.bias);
        if (has_skip) {
            out.push_back(&skip.weight);
            out.push_back(&skip.bias);
        }
    }
    void collect_named(const std::string& p,
                       std::vector<std::pair<std::string, ParamTensor*>>& out) {
        out.emplace_back(p + ".gn1.gamma", &gn1.gamma);
        out.emplace_back(p + ".gn1.beta", &gn1.beta);
        out.emplace_back(p + ".conv1.weight", &conv1.weight);
        out.emplace_back(p + ".conv1.bias", &conv1.bias);
        out.emplace_back(p + ".emb.W", &emb.W);
        out.emplace_back(p + ".emb.b", &emb.b);
        out.emplace_back(p + ".gn2.gamma", &gn2.gamma);
        out.emplace_back(p + ".gn2.beta", &gn2.beta);
        out.emplace_back(p + ".conv2.weight", &conv2.weight);
        out.emplace_back(p + ".conv2.bias", &conv2.bias);
        if (has_skip) {
            out.emplace_back(p + ".skip.weight", &skip.weight);
            out.emplace_back(p + ".skip.bias", &skip.bias);
        }
    }
};

struct ResCache {
    Tensor5 x, xn, xa, h, hn, ha;
    GroupStats st1, st2;
    std::vector<float> e;
};

inline Tensor5 res_forward(const ResBlock& b, const Tensor5& x, const std::vector<float>& e,
                           ResCache* cache) {
    static const ActivationLayer kSilu{ActKind::silu};
    const GroupStats st1 = groupnorm_stats(b.gn1, x);
    Tensor5 xn = groupnorm_apply(b.gn1, x, st1);
    Tensor5 xa = act_forward(kSilu, xn);
    Tensor5 h = conv3d_forward(b.conv1, xa);
    const std::vector<float> bias = linear_forward(b.emb, e);
    for (i64 n = 0; n < h.dims[0]; ++n)
        for (i64 c = 0; c < h.dims[1]; ++c) {
            const float bc = bias[static_cast<std::size_t>(c)];
            for (i64 d = 0; d < h.dims[2]; ++d)
                for (i64 hh = 0; hh < h.dims[3]; ++hh)
                    for (i64 w = 0; w < h.dims[4]; ++w) h.at(n, c, d, hh, w) += bc;
        }
    const GroupStats st2 = groupnorm_stats(b.gn2, h);
    Tensor5 hn = groupnorm_apply(b.gn2, h, st2);
    Tensor5 ha = act_forward(kSilu, hn);
    Tensor5 y = conv3d_forward(b.conv2, ha);
    if (b.has_skip) {
        const Tensor5 s = conv3d_forward(b.skip, x);
        for (i64 i = 0; i < y.numel(); ++i) y.data[i] += s.data[i];
    } else {
        for (i64 i = 0; i < y.numel(); ++i) y.data[i] += x.data[i];
    }
    if (cache) {
        cache->x = x;
        cache->xn = std::move(xn);
        cache->xa = std::move(xa);
        cache->h = std::move(h);
        cache->hn = std::move(hn);
        cache->ha = std::move(ha);
        cache->st1 = st1;
        cache->st2 = st2;
        cache->e = e;
    }
    return y;
}

struct ResGrads {
    Tensor5 gx;
    std::vector<float> ge;
};

inline ResGrads res_backward(ResBlock& b, const ResCache& c, const Tensor5& gy,
                             bool accumulate = true) {
    static const ActivationLayer kSilu{ActKind::silu};
    ResGrads out;

    // main path, back to front
    ConvGrads g2 = conv3d_backward(b.conv2, c.ha, gy);
    if (accumulate) {
        for (std::size_t i = 0; i < g2.grad_w.size(); ++i) b.conv2.weight.g[i] += g2.grad_w[i];
        for (std::size_t i = 0; i < g2.grad_b.size(); ++i) b.conv2.bias.g[i] += g2.grad_b[i];
    }
    Tensor5 gha = act_backward(kSilu, c.hn, g2.grad_x);
    GroupNormGrads gg2 = groupnorm_backward(b.gn2, c.h, c.st2, gha);
    if (accumulate) {
        for (std::size_t i = 0; i < gg2.grad_gamma.size(); ++i)
            b.gn2.gamma.g[i] += gg2.grad_gamma[i];
        for (std::size_t i = 0; i < gg2.grad_beta.size(); ++i) b.gn2.beta.g[i] += gg2.grad_beta[i];
    }
    Tensor5& gh = gg2.grad_x;

    // embedding bias: per-channel sum of gh
    std::vector<float> gbias(static_cast<std::size_t>(b.c_out), 0.0f);
    for (i64 n = 0; n < gh.dims[0]; ++n)
        for (i64 ch = 0; ch < gh.dims[1]; ++ch) {
            double s = 0;
            for (i64 d = 0; d < gh.dims[2]; ++d)
                for (i64 hh = 0; hh < gh.dims[3]; ++hh)
                    for (i64 w = 0; w < gh.dims[4]; ++w) s += gh.at(n, ch, d, hh, w);
            gbias[static_cast<std::size_t>(ch)] += static_cast<float>(s);
        }
    LinearGrads ge_lin = linear_backward(b.emb, c.e, gbias);
    if (accumulate) {
        for (std::size_t i = 0; i < ge_lin.grad_W.size(); ++i) b.emb.W.g[i] += ge_lin.grad_W[i];
        for (std::size_t i = 0; i < ge_lin.grad_b.size(); ++i) b.emb.b.g[i] += ge_lin.grad_b[i];
    }
    out.ge = std::move(ge_lin.grad_x);

    ConvGrads g1 = conv3d_backward(b.conv1, c.xa, gh);
    if (accumulate) {
        for (std::size_t i = 0; i < g1.grad_w.size(); ++i) b.conv1.weight.g[i] += g1.grad_w[i];
        for (std::size_t i = 0; i < g1.grad_b.size(); ++i) b.conv1.bias.g[i] += g1.grad_b[i];
    }
    Tensor5 gxa = act_backward(kSilu, c.xn, g1.grad_x);
    GroupNormGrads gg1 = groupnorm_backward(b.gn1, c.x, c.st1, gxa);
    if (accumulate) {
        for (std::size_t i = 0; i < gg1.grad_gamma.size(); ++i)
            b.gn1.gamma.g[i] += gg1.grad_gamma[i];
        for (std::size_t i = 0; i < gg1.grad_beta.size(); ++i) b.gn1.beta.g[i] += gg1.grad_beta[i];
    }
    out.gx = std::move(gg1.grad_x);

    // skip path
    if (b.has_skip) {
        ConvGrads gs = conv3d_backward(b.skip, c.x, gy);
        if (accumulate) {
            for (std::size_t i = 0; i < gs.grad_w.size(); ++i) b.skip.weight.g[i] += gs.grad_w[i];
            for (std::size_t i = 0; i < gs.grad_b.size(); ++i) b.skip.bias.g[i] += gs.grad_b[i];
        }
        for (i64 i = 0; i < out.gx.numel(); ++i) out.gx.data[i] += gs.grad_x.data[i];
    } else {
        for (i64 i = 0; i < out.gx.numel(); ++i) out.gx.data[i] += gy.data[i];
    }
    return out;
}

// =====================================================================
//  UNet
// =====================================================================

struct UNetConfig {
    i64 latent_channels = 4;
    i64 w1 = 16;
    i64 w2 = 32;
    i64 te = 32;
};

struct UNet3d {
    UNetConfig cfg;
    Mlp2 time_mlp, cond_mlp;
    ResBlock res1;        // lc  -> w1
    Conv3dLayer down;     // w1  -> w2, stride 2
    ResBlock mid;         // w2  -> w2
    Conv3dLayer up_conv;  // w2  -> w1 (after nearest upsample)
    ResBlock dec;         // 2*w1 -> w1 (skip concat)
    Conv3dLayer out_conv; // w1  -> lc, zero-init

    std::vector<ParamTensor*> params() {
        std::vector<ParamTensor*> out;
        for (auto* L : {&time_mlp, &cond_mlp}) {
            out.push_back(&L->l1.W);
            out.push_back(&L->l1.b);
            out.push_back(&L->l2.W);
            out.push_back(&L->l2.b);
        }
        res1.collect_params(out);
        out.push_back(&down.weight);
        out.push_back(&down.bias);
        mid.collect_params(out);
        out.push_back(&up_conv.weight);
        out.push_back(&up_conv.bias);
        dec.collect_params(out);
        out.push_back(&out_conv.weight);
        out.push_back(&out_conv.bias);
        return out;
    }
    std::vector<std::pair<std::string, ParamTensor*>> named_params(
        const std::string& prefix = "unet") {
        std::vector<std::pair<std::string, ParamTensor*>> out;
        const char* mlp_names[2] = {"time_mlp", "cond_mlp"};
        Mlp2* mlps[2] = {&time_mlp, &cond_mlp};
        for (int i = 0; i < 2; ++i) {
            const std::string p = prefix + "." + mlp_names[i];
            out.emplace_back(p + ".l1.W", &mlps[i]->l1.W);
            out.emplace_back(p + ".l1.b", &mlps[i]->l1.b);
            out.emplace_back(p + ".l2.W", &mlps[i]->l2.W);
            out.emplace_back(p + ".l2.b", &mlps[i]->l2.b);
        }
        res1.collect_named(prefix + ".res1", out);
        out.emplace_back(prefix + ".down.weight", &down.weight);
        out.emplace_back(prefix + ".down.bias", &down.bias);
        mid.collect_named(prefix + ".mid", out);
        out.emplace_back(prefix + ".up_conv.weight", &up_conv.weight);
        out.emplace_back(prefix + ".up_conv.bias", &up_conv.bias);
        dec.collect_named(prefix + ".dec", out);
        out.emplace_back(prefix + ".out_conv.weight", &out_conv.weight);
        out.emplace_back(prefix + ".out_conv.bias", &out_conv.bias);
        return out;
    }
};

inline UNet3d make_unet(const UNetConfig& cfg, Rng& rng) {
    UNet3d m;
    m.cfg = cfg;
    m.time_mlp = Mlp2(cfg.te, cfg.te, cfg.te);
    m.cond_mlp = Mlp2(kCondDim, cfg.te, cfg.te);
    m.res1 = ResBlock(cfg.latent_channels, cfg.w1, cfg.te);
    m.down = Conv3dLayer(cfg.w1, cfg.w2, {3, 3, 3}, {2, 2, 2});
    m.mid = ResBlock(cfg.w2, cfg.w2, cfg.te);
    m.up_conv = Conv3dLayer(cfg.w2, cfg.w1, {3, 3, 3}, {1, 1, 1});
    m.dec = ResBlock(2 * cfg.w1, cfg.w1, cfg.te);
    m.out_conv = Conv3dLayer(cfg.w1, cfg.latent_channels, {3, 3, 3}, {1, 1, 1});

    init_linear(m.time_mlp.l1, rng);
    init_linear(m.time_mlp.l2, rng);
    init_linear(m.cond_mlp.l1, rng);
    init_linear(m.cond_mlp.l2, rng);
    m.res1.init(rng);
    init_conv(m.down, rng);
    m.mid.init(rng);
    init_conv(m.up_conv, rng);
    m.dec.init(rng);
    // Zero-initialized head: the untrained net predicts eps == 0, so the
    // initial L1 sits at E|N(0,1)| = sqrt(2/pi) — a frozen baseline tests
    // (and training criteria) measure progress against.
    std::fill(m.out_conv.weight.w.begin(), m.out_conv.weight.w.end(), 0.0f);
    std::fill(m.out_conv.bias.w.begin(), m.out_conv.bias.w.end(), 0.0f);
    return m;
}

struct UNetCache {
    Mlp2Cache tc, cc;
    std::vector<float> e;
    ResCache r1, rm, rd;
    Tensor5 h1, h3, u, h6;  // inputs the conv backwards need
    Tensor5 eps_hat;
};

// The embedding shared by every block: time features and condition vector
// through their own MLPs, summed.
inline std::vector<float> unet_embedding(const UNet3d& m, i64 t, const PrimaryCond& cond,
                                         UNetCache* cache) {
    std::vector<float> et =
        mlp2_forward(m.time_mlp, time_features(t, m.cfg.te), cache ? &cache->tc : nullptr);
    std::vector<float> ec =
        mlp2_forward(m.cond_mlp, cond_vector(cond), cache ? &cache->cc : nullptr);
    for (std::size_t i = 0; i < et.size(); ++i) et[i] += ec[i];
    return et;
}

// Predict the noise in z_t.  Spatial dims must be even (one stride-2 level).
inline Tensor5 unet_forward(const UNet3d& m, const Tensor5& z_t, i64 t,
                            const PrimaryCond& cond, UNetCache* cache = nullptr) {
    if (z_t.dims[1] != m.cfg.latent_channels)
        throw std::invalid_argument("unet: channel mismatch");
    for (int a = 2; a < 5; ++a)
        if (z_t.dims[a] % 2 != 0 || z_t.dims[a] < 2)
            throw std::invalid_argument("unet: spatial dims must be even and >= 2");

    const std::vector<float> e = unet_embedding(m, t, cond, cache);
    Tensor5 h1 = res_forward(m.res1, z_t, e, cache ? &cache->r1 : nullptr);
    Tensor5 h2 = conv3d_forward(m.down, h1);
    Tensor5 h3 = res_forward(m.mid, h2, e, cache ? &cache->rm : nullptr);
    Tensor5 u = upsample2_forward(h3);
    Tensor5 h4 = conv3d_forward(m.up_conv, u);
    Tensor5 h5 = concat_channels(h4, h1);
    Tensor5 h6 = res_forward(m.dec, h5, e, cache ? &cache->rd : nullptr);
    Tensor5 eps_hat = conv3d_forward(m.out_conv, h6);
    if (cache) {
        cache->e = e;
        cache->h1 = std::move(h1);
        cache->h3 = std::move(h3);
        cache->u = std::move(u);
        cache->h6 = std::move(h6);
        cache->eps_hat = eps_hat;
    }
    return eps_hat;
}

// Backprop through the whole net; returns grad w.r.t. z_t.  With accumulate
// == false nothing is written to parameter grads (frozen-base use).
inline Tensor5 unet_backward(UNet3d& m, const UNetCache& c, const Tensor5& g_eps,
                             bool accumulate = true) {
    ConvGrads g_out = conv3d_backward(m.out_conv, c.h6, g_eps);
    if (accumulate) {
        for (std::size_t i = 0; i < g_out.grad_w.size(); ++i)
            m.out_conv.weight.g[i] += g_out.grad_w[i];
        for (std::size_t i = 0; i < g_out.grad_b.size(); ++i)
            m.out_conv.bias.g[i] += g_out.grad_b[i];
    }
    ResGrads gd = res_backward(m.dec, c.rd, g_out.grad_x, accumulate);
    auto [gh4, gh1_skip] = split_channels(gd.gx, m.cfg.w1);
    ConvGrads g_up = conv3d_backward(m.up_conv, c.u, gh4);
    if (accumulate) {
        for (std::size_t i = 0; i < g_up.grad_w.size(); ++i)
            m.up_conv.weight.g[i] += g_up.grad_w[i];
        for (std::size_t i = 0; i < g_up.grad_b.size(); ++i) m.up_conv.bias.g[i] += g_up.grad_b[i];
    }
    Tensor5 gh3 = upsample2_backward(c.h3, g_up.grad_x);
    ResGrads gm = res_backward(m.mid, c.rm, gh3, accumulate);
    ConvGrads g_down = conv3d_backward(m.down, c.h1, gm.gx);
    if (accumulate) {
        for (std::size_t i = 0; i < g_down.grad_w.size(); ++i)
            m.down.weight.g[i] += g_down.grad_w[i];
        for (std::size_t i = 0; i < g_down.grad_b.size(); ++i)
            m.down.bias.g[i] += g_down.grad_b[i];
    }
    Tensor5 gh1 = std::move(g_down.grad_x);
    for (i64 i = 0; i < gh1.numel(); ++i) gh1.data[i] += gh1_skip.data[i];
    ResGrads g1 = res_backward(m.res1, c.r1, gh1, accumulate);

    // embedding gradient fans in from all three res blocks
    std::vector<float> ge = g1.ge;
    for (std::size_t i = 0; i < ge.size(); ++i) ge[i] += gm.ge[i] + gd.ge[i];
    mlp2_backward(m.time_mlp, c.tc, ge, accumulate);
    mlp2_backward(m.cond_mlp, c.cc, ge, accumulate);

    return std::move(g1.gx);
}

// =====================================================================
//  Objective, trainer, sampler
// =====================================================================

// L1 between predicted and true noise; optionally backprops.
inline double diffusion_loss(UNet3d& m, const NoiseSchedule& ns, const Tensor5& z0,
                             const PrimaryCond& cond, i64 t, const Tensor5& eps,
                             bool backward_pass = false) {
    const Tensor5 z_t = q_sample(ns, z0, t, eps);
    UNetCache cache;
    const Tensor5 eps_hat = unet_forward(m, z_t, t, cond, backward_pass ? &cache : nullptr);
    if (!backward_pass) {
        double l = 0;
        for (i64 i = 0; i < eps_hat.numel(); ++i)
            l += std::abs(static_cast<double>(eps_hat.data[i]) - eps.data[i]);
        return l / static_cast<double>(eps_hat.numel());
    }
    double l = 0;
    Tensor5 g = Tensor5::shaped(eps_hat.dims);
    const double n = static_cast<double>(eps_hat.numel());
    for (i64 i = 0; i < eps_hat.numel(); ++i) {
        const float d = eps_hat.data[i] - eps.data[i];
        l += std::abs(static_cast<double>(d));
        g.data[i] = (d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f)) / static_cast<float>(n);
    }
    unet_backward(m, cache, g);
    return l / n;
}

struct DmTrainer {
    UNet3d* model = nullptr;
    NoiseSchedule sched;
    AdamState opt;
};

inline DmTrainer make_dm_trainer(UNet3d& m, NoiseSchedule sched, AdamConfig cfg) {
    DmTrainer t;
    t.model = &m;
    t.sched = std::move(sched);
    t.opt = make_adam(m.params(), cfg);
    return t;
}

// One step on one latent: random timestep, random noise.
inline double train_step_dm(DmTrainer& t, const Tensor5& z0, const PrimaryCond& cond,
                            Rng& rng) {
    const i64 step_t = rng.uniform_int(1, t.sched.T);
    Tensor5 eps = Tensor5::shaped(z0.dims);
    rng.fill_normal(eps);
    zero_grads(t.opt);
    const double loss =
        diffusion_loss(*t.model, t.sched, z0, cond, step_t, eps, /*backward_pass=*/true);
    if (!std::isfinite(loss))
        throw std::runtime_error("dm training diverged: loss not finite at step " +
                                 std::to_string(t.opt.step));
    adam_step(t.opt);
    return loss;
}

// Full ancestral sampling loop from seeded gaussian noise.  Deterministic in
// (model, schedule, dims, cond, seed).
inline Tensor5 generate_latent(const UNet3d& m, const NoiseSchedule& ns,
                               const std::array<i64, 5>& dims, const PrimaryCond& cond,
                               std::uint64_t seed) {
    Rng rng(seed);
    Tensor5 z = Tensor5::shaped(dims);
    rng.fill_normal(z);
    Tensor5 noise = Tensor5::shaped(dims);
    for (i64 t = ns.T; t >= 1; --t) {
        const Tensor5 eps_hat = unet_forward(m, z, t, cond);
        if (t > 1) {
            rng.fill_normal(noise);
            z = ddpm_step(ns, z, eps_hat, t, &noise);
        } else {
            z = ddpm_step(ns, z, eps_hat, t, nullptr);
        }
    }
    return z;
}

}  // namespace voxsyn
