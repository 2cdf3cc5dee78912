#pragma once
// vae.hpp
//
// Compression stage: a small 3D VAE-GAN.  The encoder squeezes a [1,1,D,H,W]
// volume by a factor f per axis into latent_channels feature maps; the
// decoder is a plain LayerChain, which is exactly what the tensor-splitting
// executor consumes — so compressed volumes can be decoded slab-by-slab with
// the same numerics as a monolithic decode.
//
// Training composes four losses: voxel L1, a multi-scale "perceptual" L1
// pyramid, a KL pull toward the unit gaussian, and a patch discriminator.
// The perceptual term sits behind a tiny interface so a richer feature loss
// can be swapped in without touching the trainer.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "nn.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tsp.hpp"

namespace voxsyn {

// =====================================================================
//  Model
// =====================================================================

struct VaeConfig {
    i64 f = 4;                       // spatial compression per axis, power of two
    i64 latent_channels = 4;
    std::vector<i64> widths{8, 16};  // encoder width per stride-2 level
    i64 gn_groups = 2;
};

struct VaeModel {
    VaeConfig cfg;
    LayerChain trunk;                 // stride-2 feature stack
    Conv3dLayer mu_head, logvar_head; // k3 heads on the trunk output
    LayerChain decoder;

    std::vector<ParamTensor*> params() {
        std::vector<ParamTensor*> out;
        chain_params(trunk, out);
        out.push_back(&mu_head.weight);
        out.push_back(&mu_head.bias);
        out.push_back(&logvar_head.weight);
        out.push_back(&logvar_head.bias);
        chain_params(decoder, out);
        return out;
    }
    std::vector<std::pair<std::string, ParamTensor*>> named_params(
        const std::string& prefix = "vae") {
        std::vector<std::pair<std::string, ParamTensor*>> out;
        chain_named_params(trunk, prefix + ".trunk", out);
        out.emplace_back(prefix + ".mu.weight", &mu_head.weight);
        out.emplace_back(prefix + ".mu.bias", &mu_head.bias);
        out.emplace_back(prefix + ".logvar.weight", &logvar_head.weight);
        out.emplace_back(prefix + ".logvar.bias", &logvar_head.bias);
        chain_named_params(decoder, prefix + ".decoder", out);
        return out;
    }
};

inline i64 log2_exact(i64 v, const char* what) {
    i64 k = 0, x = v;
    while (x > 1 && x % 2 == 0) {
        x /= 2;
        ++k;
    }
    if (x != 1 || v < 2)
        throw std::invalid_argument(std::string(what) + " must be a power of two >= 2, got " +
                                    std::to_string(v));
    return k;
}

inline VaeModel make_vae(const VaeConfig& cfg, Rng& rng) {
    const i64 levels = log2_exact(cfg.f, "vae f");
    if (static_cast<i64>(cfg.widths.size()) != levels)
        throw std::invalid_argument("vae: widths must have one entry per stride-2 level");
    VaeModel m;
    m.cfg = cfg;

    i64 c = 1;
    for (i64 i = 0; i < levels; ++i) {
        const i64 w = cfg.widths[static_cast<std::size_t>(i)];
        m.trunk.layers.push_back(Conv3dLayer(c, w, {3, 3, 3}, {2, 2, 2}));
        m.trunk.layers.push_back(GroupNormLayer(w, std::min<i64>(cfg.gn_groups, w)));
        m.trunk.layers.push_back(ActivationLayer{ActKind::silu});
        c = w;
    }
    m.mu_head = Conv3dLayer(c, cfg.latent_channels, {3, 3, 3}, {1, 1, 1});
    m.logvar_head = Conv3dLayer(c, cfg.latent_channels, {3, 3, 3}, {1, 1, 1});

    m.decoder.layers.push_back(Conv3dLayer(cfg.latent_channels, c, {3, 3, 3}, {1, 1, 1}));
    m.decoder.layers.push_back(GroupNormLayer(c, std::min<i64>(cfg.gn_groups, c)));
    m.decoder.layers.push_back(ActivationLayer{ActKind::silu});
    for (i64 i = levels - 1; i >= 1; --i) {
        const i64 w_in = cfg.widths[static_cast<std::size_t>(i)];
        const i64 w_out = cfg.widths[static_cast<std::size_t>(i - 1)];
        m.decoder.layers.push_back(UpsampleLayer{});
        m.decoder.layers.push_back(Conv3dLayer(w_in, w_out, {3, 3, 3}, {1, 1, 1}));
        m.decoder.layers.push_back(GroupNormLayer(w_out, std::min<i64>(cfg.gn_groups, w_out)));
        m.decoder.layers.push_back(ActivationLayer{ActKind::silu});
    }
    m.decoder.layers.push_back(UpsampleLayer{});
    m.decoder.layers.push_back(Conv3dLayer(cfg.widths[0], 1, {3, 3, 3}, {1, 1, 1}));

    init_chain(m.trunk, rng);
    init_conv(m.mu_head, rng);
    init_conv(m.logvar_head, rng);
    // Zero logvar head: sigma starts at exactly 1 everywhere, so early
    // latents are unit-ish by construction and KL starts near zero.
    std::fill(m.logvar_head.weight.w.begin(), m.logvar_head.weight.w.end(), 0.0f);
    init_chain(m.decoder, rng);
    return m;
}

// =====================================================================
//  Forward passes
// =====================================================================

struct VaeEncoding {
    Tensor5 mu, logvar;
};

struct VaeEncCache {
    ChainCache trunk;
};

inline VaeEncoding vae_encode(const VaeModel& m, const Tensor5& x,
                              VaeEncCache* cache = nullptr) {
    if (x.dims[1] != 1) throw std::invalid_argument("vae_encode: expects single-channel input");
    for (int a = 2; a < 5; ++a)
        if (x.dims[a] % m.cfg.f != 0)
            throw std::invalid_argument("vae_encode: spatial dims must be divisible by f=" +
                                        std::to_string(m.cfg.f));
    VaeEncoding e;
    if (cache) {
        cache->trunk = chain_forward_cached(m.trunk, x);
        e.mu = conv3d_forward(m.mu_head, cache->trunk.acts.back());
        e.logvar = conv3d_forward(m.logvar_head, cache->trunk.acts.back());
    } else {
        const Tensor5 h = run_chain(m.trunk, x);
        e.mu = conv3d_forward(m.mu_head, h);
        e.logvar = conv3d_forward(m.logvar_head, h);
    }
    return e;
}

// z = mu + exp(logvar/2) * eps.  The noise is an explicit argument so tests
// can pass zeros (z == mu) and training can seed it.
inline Tensor5 reparameterize(const VaeEncoding& e, const Tensor5& eps) {
    detail::check_same_shape(e.mu, eps, "reparameterize");
    Tensor5 z = Tensor5::shaped(e.mu.dims);
    for (i64 i = 0; i < z.numel(); ++i)
        z.data[i] = e.mu.data[i] + std::exp(0.5f * e.logvar.data[i]) * eps.data[i];
    return z;
}

inline Tensor5 vae_decode(const VaeModel& m, const Tensor5& z) {
    return run_chain(m.decoder, z);
}

// Slab-parallel decode through the splitting executor.  n_segments == 1
// reproduces the monolithic decode bit for bit.
inline Tensor5 vae_decode_tsp(const VaeModel& m, const Tensor5& z, int n_segments,
                              const TspOptions& opt = {}) {
    const SplitPlan plan = plan_split(m.decoder, z.dims, n_segments);
    return execute_tsp(m.decoder, z, plan, opt);
}

// =====================================================================
//  Losses
// =====================================================================

struct ScalarLoss {
    double value = 0;
    Tensor5 grad;  // w.r.t. the first argument
};

inline ScalarLoss l1_loss(const Tensor5& pred, const Tensor5& target) {
    detail::check_same_shape(pred, target, "l1_loss");
    ScalarLoss r;
    r.grad = Tensor5::shaped(pred.dims);
    const double n = static_cast<double>(pred.numel());
    for (i64 i = 0; i < pred.numel(); ++i) {
        const float d = pred.data[i] - target.data[i];
        r.value += std::abs(static_cast<double>(d));
        r.grad.data[i] = (d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f)) / static_cast<float>(n);
    }
    r.value /= n;
    return r;
}

// Pluggable perceptual term.
struct PerceptualLoss {
    virtual ~PerceptualLoss() = default;
    virtual ScalarLoss eval(const Tensor5& pred, const Tensor5& target) const = 0;
};

// Mean voxel L1 at full, half, and quarter resolution (2x mean pools).
struct PyramidL1Loss final : PerceptualLoss {
    ScalarLoss eval(const Tensor5& pred, const Tensor5& target) const override {
        ScalarLoss full = l1_loss(pred, target);

        const Tensor5 p1 = avgpool2_forward(pred);
        const Tensor5 t1 = avgpool2_forward(target);
        ScalarLoss half = l1_loss(p1, t1);

        const Tensor5 p2 = avgpool2_forward(p1);
        const Tensor5 t2 = avgpool2_forward(t1);
        ScalarLoss quarter = l1_loss(p2, t2);

        ScalarLoss r;
        r.value = (full.value + half.value + quarter.value) / 3.0;
        const Tensor5 g_half = avgpool2_backward(pred, half.grad);
        const Tensor5 g_quarter =
            avgpool2_backward(pred, avgpool2_backward(p1, quarter.grad));
        r.grad = std::move(full.grad);
        for (i64 i = 0; i < r.grad.numel(); ++i)
            r.grad.data[i] = (r.grad.data[i] + g_half.data[i] + g_quarter.data[i]) / 3.0f;
        return r;
    }
};

struct KlLoss {
    double value = 0;
    Tensor5 grad_mu, grad_logvar;
};

// KL(N(mu, sigma^2) || N(0, 1)) averaged over latent elements.
inline KlLoss kl_loss(const VaeEncoding& e) {
    detail::check_same_shape(e.mu, e.logvar, "kl_loss");
    KlLoss r;
    r.grad_mu = Tensor5::shaped(e.mu.dims);
    r.grad_logvar = Tensor5::shaped(e.mu.dims);
    const double n = static_cast<double>(e.mu.numel());
    for (i64 i = 0; i < e.mu.numel(); ++i) {
        const double mu = e.mu.data[i];
        const double lv = e.logvar.data[i];
        r.value += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
        r.grad_mu.data[i] = static_cast<float>(mu / n);
        r.grad_logvar.data[i] = static_cast<float>(0.5 * (std::exp(lv) - 1.0) / n);
    }
    r.value /= n;
    return r;
}

// Binary cross-entropy on patch logits, mean over patches.  Loss values
// clamp the probability into [1e-7, 1 - 1e-7] to stay finite; gradients use
// the exact sigmoid identities (the clamp boundary is measure-zero and the
// exact forms are what keep finite-difference checks honest).
inline ScalarLoss bce_want_real(const Tensor5& logits) {
    ScalarLoss r;
    r.grad = Tensor5::shaped(logits.dims);
    const double n = static_cast<double>(logits.numel());
    for (i64 i = 0; i < logits.numel(); ++i) {
        const float p = std::clamp(sigmoidf(logits.data[i]), 1e-7f, 1.0f - 1e-7f);
        r.value += -std::log(static_cast<double>(p));
        r.grad.data[i] = (sigmoidf(logits.data[i]) - 1.0f) / static_cast<float>(n);
    }
    r.value /= n;
    return r;
}

inline ScalarLoss bce_want_fake(const Tensor5& logits) {
    ScalarLoss r;
    r.grad = Tensor5::shaped(logits.dims);
    const double n = static_cast<double>(logits.numel());
    for (i64 i = 0; i < logits.numel(); ++i) {
        const float p = std::clamp(sigmoidf(logits.data[i]), 1e-7f, 1.0f - 1e-7f);
        r.value += -std::log(static_cast<double>(1.0f - p));
        r.grad.data[i] = sigmoidf(logits.data[i]) / static_cast<float>(n);
    }
    r.value /= n;
    return r;
}

// Patch discriminator: logits at 1/4 resolution, one per spatial site.
inline LayerChain make_discriminator(Rng& rng) {
    LayerChain d;
    d.layers.push_back(Conv3dLayer(1, 8, {3, 3, 3}, {2, 2, 2}));
    d.layers.push_back(ActivationLayer{ActKind::leaky_relu, 0.2f});
    d.layers.push_back(Conv3dLayer(8, 16, {3, 3, 3}, {2, 2, 2}));
    d.layers.push_back(ActivationLayer{ActKind::leaky_relu, 0.2f});
    d.layers.push_back(Conv3dLayer(16, 1, {3, 3, 3}, {1, 1, 1}));
    init_chain(d, rng);
    return d;
}

// =====================================================================
//  Training
// =====================================================================

struct VaeTrainConfig {
    float lr_g = 1e-3f;
    float lr_d = 1e-3f;
    float w_recon = 1.0f;
    float w_perc = 0.5f;
    float w_kl = 0.05f;
    float w_adv = 0.02f;
};

struct VaeStepStats {
    double recon = 0, perceptual = 0, kl = 0, d_loss = 0, g_adv = 0;
    double g_total() const { return recon + perceptual + kl + g_adv; }  // unweighted sum
};

struct VaeTrainer {
    VaeModel* vae = nullptr;
    LayerChain* disc = nullptr;
    VaeTrainConfig cfg;
    const PerceptualLoss* perceptual = nullptr;  // null = built-in pyramid
    AdamState opt_g, opt_d;
};

inline VaeTrainer make_vae_trainer(VaeModel& vae, LayerChain& disc, VaeTrainConfig cfg = {}) {
    VaeTrainer t;
    t.vae = &vae;
    t.disc = &disc;
    t.cfg = cfg;
    AdamConfig ag;
    ag.lr = cfg.lr_g;
    t.opt_g = make_adam(vae.params(), ag);
    AdamConfig ad;
    ad.lr = cfg.lr_d;
    std::vector<ParamTensor*> dp;
    chain_params(disc, dp);
    t.opt_d = make_adam(std::move(dp), ad);
    return t;
}

namespace detail {

inline void throw_if_nan(double v, const char* what, int step) {
    if (!std::isfinite(v))
        throw std::runtime_error(std::string("vae training diverged: ") + what +
                                 " is not finite at trainer step " + std::to_string(step));
}

}  // namespace detail

// Forward (and optionally backward) of the full generator objective with a
// frozen discriminator and explicit noise.  Split out from the step so tests
// can finite-difference the whole objective end to end.  With accumulate ==
// false only the loss values are computed; nothing is written to any .g.
inline VaeStepStats vae_generator_pass(VaeModel& m, LayerChain& d, const VaeTrainConfig& cfg,
                                       const PerceptualLoss& perc_fn, const Tensor5& x,
                                       const Tensor5& eps, bool accumulate = true) {
    VaeStepStats stats;
    VaeEncCache enc_cache;
    const VaeEncoding e = vae_encode(m, x, &enc_cache);
    const Tensor5 z = reparameterize(e, eps);
    ChainCache dec_cache = chain_forward_cached(m.decoder, z);
    const Tensor5& xhat = dec_cache.acts.back();

    const ScalarLoss recon = l1_loss(xhat, x);
    const ScalarLoss perc = perc_fn.eval(xhat, x);
    const KlLoss kl = kl_loss(e);
    ChainCache cc_adv = chain_forward_cached(d, xhat);
    const ScalarLoss adv = bce_want_real(cc_adv.acts.back());

    stats.recon = recon.value;
    stats.perceptual = perc.value;
    stats.kl = kl.value;
    stats.g_adv = adv.value;
    if (!accumulate) return stats;

    // frozen discriminator: gradients flow through it to xhat only
    const Tensor5 g_adv_x = chain_backward(d, cc_adv, adv.grad, /*accumulate_params=*/false);

    Tensor5 g_xhat = Tensor5::shaped(xhat.dims);
    for (i64 i = 0; i < g_xhat.numel(); ++i)
        g_xhat.data[i] = cfg.w_recon * recon.grad.data[i] + cfg.w_perc * perc.grad.data[i] +
                         cfg.w_adv * g_adv_x.data[i];

    const Tensor5 gz = chain_backward(m.decoder, dec_cache, g_xhat);

    // through the reparameterization into the heads
    Tensor5 g_mu = Tensor5::shaped(e.mu.dims);
    Tensor5 g_logvar = Tensor5::shaped(e.mu.dims);
    for (i64 i = 0; i < g_mu.numel(); ++i) {
        g_mu.data[i] = gz.data[i] + cfg.w_kl * kl.grad_mu.data[i];
        g_logvar.data[i] =
            gz.data[i] * 0.5f * std::exp(0.5f * e.logvar.data[i]) * eps.data[i] +
            cfg.w_kl * kl.grad_logvar.data[i];
    }

    const Tensor5& trunk_out = enc_cache.trunk.acts.back();
    ConvGrads g_head_mu = conv3d_backward(m.mu_head, trunk_out, g_mu);
    ConvGrads g_head_lv = conv3d_backward(m.logvar_head, trunk_out, g_logvar);
    for (std::size_t i = 0; i < g_head_mu.grad_w.size(); ++i) {
        m.mu_head.weight.g[i] += g_head_mu.grad_w[i];
        m.logvar_head.weight.g[i] += g_head_lv.grad_w[i];
    }
    for (std::size_t i = 0; i < g_head_mu.grad_b.size(); ++i) {
        m.mu_head.bias.g[i] += g_head_mu.grad_b[i];
        m.logvar_head.bias.g[i] += g_head_lv.grad_b[i];
    }
    Tensor5 g_trunk = std::move(g_head_mu.grad_x);
    for (i64 i = 0; i < g_trunk.numel(); ++i) g_trunk.data[i] += g_head_lv.grad_x.data[i];
    chain_backward(m.trunk, enc_cache.trunk, g_trunk);
    return stats;
}

// The generator objective as one weighted scalar.
inline double vae_weighted_g_total(const VaeTrainConfig& cfg, const VaeStepStats& s) {
    return cfg.w_recon * s.recon + cfg.w_perc * s.perceptual + cfg.w_kl * s.kl +
           cfg.w_adv * s.g_adv;
}

// One alternating D/G step on a single volume.  The discriminator updates
// first; the generator then plays against the updated discriminator.
inline VaeStepStats train_step_vae(VaeTrainer& t, const Tensor5& x, Rng& rng) {
    VaeModel& m = *t.vae;
    LayerChain& d = *t.disc;

    // ---- discriminator step (xhat treated as a constant)
    double d_loss;
    {
        const VaeEncoding e = vae_encode(m, x);
        Tensor5 eps = Tensor5::shaped(e.mu.dims);
        rng.fill_normal(eps);
        const Tensor5 xhat = vae_decode(m, reparameterize(e, eps));

        zero_grads(t.opt_d);
        ChainCache cc_real = chain_forward_cached(d, x);
        ChainCache cc_fake = chain_forward_cached(d, xhat);
        ScalarLoss lr_ = bce_want_real(cc_real.acts.back());
        ScalarLoss lf = bce_want_fake(cc_fake.acts.back());
        d_loss = lr_.value + lf.value;
        detail::throw_if_nan(d_loss, "d_loss", static_cast<int>(t.opt_d.step));
        chain_backward(d, cc_real, lr_.grad);
        chain_backward(d, cc_fake, lf.grad);
        adam_step(t.opt_d);
    }

    // ---- generator step against the updated discriminator
    zero_grads(t.opt_g);
    static const PyramidL1Loss kPyramid;
    const PerceptualLoss& perc_fn = t.perceptual ? *t.perceptual : kPyramid;
    Tensor5 eps(1, m.cfg.latent_channels, x.dims[2] / m.cfg.f, x.dims[3] / m.cfg.f,
                x.dims[4] / m.cfg.f);
    rng.fill_normal(eps);
    VaeStepStats stats = vae_generator_pass(m, d, t.cfg, perc_fn, x, eps);
    stats.d_loss = d_loss;
    detail::throw_if_nan(stats.recon, "recon", static_cast<int>(t.opt_g.step));
    detail::throw_if_nan(stats.perceptual, "perceptual", static_cast<int>(t.opt_g.step));
    detail::throw_if_nan(stats.kl, "kl", static_cast<int>(t.opt_g.step));
    detail::throw_if_nan(stats.g_adv, "g_adv", static_cast<int>(t.opt_g.step));
    adam_step(t.opt_g);
    return stats;
}

// Population std over every element of a sampled latent for each volume in
// the set.  This is the calibration statistic: near 1.0 means a diffusion
// model trained against unit noise sees latents at the scale it expects.
inline double latent_std_statistic(const VaeModel& m, const std::vector<Tensor5>& xs,
                                   std::uint64_t seed = 99) {
    if (xs.empty()) throw std::invalid_argument("latent_std_statistic: empty set");
    Rng rng(seed);
    double sum = 0, sum2 = 0;
    i64 count = 0;
    for (const Tensor5& x : xs) {
        const VaeEncoding e = vae_encode(m, x);
        Tensor5 eps = Tensor5::shaped(e.mu.dims);
        rng.fill_normal(eps);
        const Tensor5 z = reparameterize(e, eps);
        for (float v : z.data) {
            sum += v;
            sum2 += static_cast<double>(v) * v;
            ++count;
        }
    }
    const double mean = sum / static_cast<double>(count);
    return std::sqrt(sum2 / static_cast<double>(count) - mean * mean);
}

}  // namespace voxsyn
