#pragma once

// Conditioning branch over a frozen denoiser: a trainable copy of the
// encoder half feeds back into the decoder through zero-initialized 1x1x1
// convs, so at init the branch is an exact no-op and training moves it off
// zero smoothly.  A compact encoder maps label masks to latent resolution.

#include <voxsyn/checkpoint.hpp>
#include <voxsyn/diffusion.hpp>
#include <voxsyn/vae.hpp>
#include <voxsyn/volume.hpp>

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace voxsyn {

// =====================================================================
//  Condition encoder: label mask -> latent-resolution features
// =====================================================================

struct CondEncoderConfig {
    i64 vocab = 128;            // label vocabulary (masks carry 0..127)
    i64 emb = 8;                // embedding width per label
    i64 latent_channels = 4;    // output channels, matches the denoiser
    i64 f = 4;                  // spatial reduction, power of two
};

struct CondEncodeCache {
    std::vector<std::uint16_t> labels;  // flat copy for the embedding scatter
    std::array<i64, 3> mask_dims{};
    std::vector<Tensor5> conv_in;       // input to downs[i]
    std::vector<Tensor5> pre_act;       // downs[i] output before silu
    Tensor5 proj_in;                    // input to the projection head used
    bool inpaint = false;
};

struct CondEncoder {
    CondEncoderConfig cfg;
    ParamTensor embed;                // [vocab, emb]; row 0 (background) zero at init
    std::vector<Conv3dLayer> downs;   // log2(f) stride-2 convs, emb -> emb
    Conv3dLayer proj_mask;            // k1, emb -> latent_channels
    Conv3dLayer proj_inpaint;         // k1, emb + latent_channels -> latent_channels

    std::vector<ParamTensor*> params() {
        std::vector<ParamTensor*> out{&embed};
        for (auto& c : downs) {
            out.push_back(&c.weight);
            out.push_back(&c.bias);
        }
        out.push_back(&proj_mask.weight);
        out.push_back(&proj_mask.bias);
        out.push_back(&proj_inpaint.weight);
        out.push_back(&proj_inpaint.bias);
        return out;
    }
    void collect_named(const std::string& p,
                       std::vector<std::pair<std::string, ParamTensor*>>& out) {
        out.emplace_back(p + ".embed", &embed);
        for (std::size_t i = 0; i < downs.size(); ++i) {
            const std::string d = p + ".down" + std::to_string(i);
            out.emplace_back(d + ".weight", &downs[i].weight);
            out.emplace_back(d + ".bias", &downs[i].bias);
        }
        out.emplace_back(p + ".proj_mask.weight", &proj_mask.weight);
        out.emplace_back(p + ".proj_mask.bias", &proj_mask.bias);
        out.emplace_back(p + ".proj_inpaint.weight", &proj_inpaint.weight);
        out.emplace_back(p + ".proj_inpaint.bias", &proj_inpaint.bias);
    }
};

inline CondEncoder make_cond_encoder(const CondEncoderConfig& cfg, Rng& rng) {
    if (cfg.vocab < 1 || cfg.emb < 1 || cfg.latent_channels < 1)
        throw std::invalid_argument("cond encoder: sizes must be >= 1");
    const i64 levels = log2_exact(cfg.f, "cond encoder f");
    CondEncoder e;
    e.cfg = cfg;
    e.embed.init({cfg.vocab, cfg.emb});
    for (auto& v : e.embed.w) v = 0.5f * rng.normal();
    // Background rows out: an all-background mask contributes nothing, so
    // the output is a pure function of the conv biases.
    for (i64 c = 0; c < cfg.emb; ++c) e.embed.w[static_cast<std::size_t>(c)] = 0.0f;
    for (i64 l = 0; l < levels; ++l) {
        e.downs.emplace_back(cfg.emb, cfg.emb, std::array<i64, 3>{3, 3, 3},
                             std::array<i64, 3>{2, 2, 2});
        init_conv(e.downs.back(), rng);
    }
    e.proj_mask = Conv3dLayer(cfg.emb, cfg.latent_channels, {1, 1, 1}, {1, 1, 1});
    e.proj_inpaint = Conv3dLayer(cfg.emb + cfg.latent_channels, cfg.latent_channels,
                                 {1, 1, 1}, {1, 1, 1});
    init_conv(e.proj_mask, rng);
    init_conv(e.proj_inpaint, rng);
    return e;
}

// Embed labels, reduce spatially by f, project to latent channels.  Pass a
// masked latent to get inpaint mode: its channels are concatenated before
// the final projection.
inline Tensor5 cond_encode(const CondEncoder& enc, const SegMask& mask,
                           const Tensor5* masked_latent = nullptr,
                           CondEncodeCache* cache = nullptr) {
    static const ActivationLayer kSilu{ActKind::silu};
    for (int a = 0; a < 3; ++a)
        if (mask.dims[a] % enc.cfg.f != 0 || mask.dims[a] < enc.cfg.f)
            throw std::invalid_argument("cond encoder: mask dims must be divisible by f");
    for (std::uint16_t l : mask.labels)
        if (l >= enc.cfg.vocab)
            throw std::invalid_argument("cond encoder: label " + std::to_string(l) +
                                        " out of vocabulary");

    Tensor5 x(1, enc.cfg.emb, mask.dims[0], mask.dims[1], mask.dims[2]);
    for (i64 d = 0; d < mask.dims[0]; ++d)
        for (i64 h = 0; h < mask.dims[1]; ++h)
            for (i64 w = 0; w < mask.dims[2]; ++w) {
                const std::size_t row =
                    static_cast<std::size_t>(mask.at(d, h, w)) *
                    static_cast<std::size_t>(enc.cfg.emb);
                for (i64 c = 0; c < enc.cfg.emb; ++c)
                    x.at(0, c, d, h, w) = enc.embed.w[row + static_cast<std::size_t>(c)];
            }

    if (cache) {
        cache->labels = mask.labels;
        cache->mask_dims = mask.dims;
        cache->conv_in.clear();
        cache->pre_act.clear();
    }
    for (const Conv3dLayer& cv : enc.downs) {
        if (cache) cache->conv_in.push_back(x);
        Tensor5 y = conv3d_forward(cv, x);
        if (cache) cache->pre_act.push_back(y);
        x = act_forward(kSilu, y);
    }

    const Conv3dLayer* proj = &enc.proj_mask;
    if (masked_latent) {
        if (masked_latent->dims[1] != enc.cfg.latent_channels ||
            masked_latent->dims[2] != x.dims[2] || masked_latent->dims[3] != x.dims[3] ||
            masked_latent->dims[4] != x.dims[4])
            throw std::invalid_argument("cond encoder: masked latent dims mismatch");
        x = concat_channels(x, *masked_latent);
        proj = &enc.proj_inpaint;
    }
    if (cache) {
        cache->proj_in = x;
        cache->inpaint = masked_latent != nullptr;
    }
    return conv3d_forward(*proj, x);
}

// Accumulates encoder parameter grads given the grad at the output.  The
// embedding grad is a scatter-add over label rows.
inline void cond_encode_backward(CondEncoder& enc, const CondEncodeCache& c,
                                 const Tensor5& g_cf) {
    static const ActivationLayer kSilu{ActKind::silu};
    Conv3dLayer& proj = c.inpaint ? enc.proj_inpaint : enc.proj_mask;
    ConvGrads gp = conv3d_backward(proj, c.proj_in, g_cf);
    for (std::size_t i = 0; i < gp.grad_w.size(); ++i) proj.weight.g[i] += gp.grad_w[i];
    for (std::size_t i = 0; i < gp.grad_b.size(); ++i) proj.bias.g[i] += gp.grad_b[i];

    // inpaint concatenates the (frozen, data-derived) latent last; its grad
    // half is discarded
    Tensor5 g = c.inpaint ? split_channels(gp.grad_x, enc.cfg.emb).first
                          : std::move(gp.grad_x);
    for (std::size_t i = c.conv_in.size(); i-- > 0;) {
        Tensor5 ga = act_backward(kSilu, c.pre_act[i], g);
        ConvGrads gc = conv3d_backward(enc.downs[i], c.conv_in[i], ga);
        for (std::size_t j = 0; j < gc.grad_w.size(); ++j)
            enc.downs[i].weight.g[j] += gc.grad_w[j];
        for (std::size_t j = 0; j < gc.grad_b.size(); ++j)
            enc.downs[i].bias.g[j] += gc.grad_b[j];
        g = std::move(gc.grad_x);
    }

    for (i64 d = 0; d < c.mask_dims[0]; ++d)
        for (i64 h = 0; h < c.mask_dims[1]; ++h)
            for (i64 w = 0; w < c.mask_dims[2]; ++w) {
                const std::size_t row =
                    static_cast<std::size_t>(
                        c.labels[static_cast<std::size_t>((d * c.mask_dims[1] + h) *
                                                          c.mask_dims[2] + w)]) *
                    static_cast<std::size_t>(enc.cfg.emb);
                for (i64 ch = 0; ch < enc.cfg.emb; ++ch)
                    enc.embed.g[row + static_cast<std::size_t>(ch)] += g.at(0, ch, d, h, w);
            }
}

// =====================================================================
//  Control model: frozen base + trainable encoder copy + zero convs
// =====================================================================

struct ControlNetModel {
    UNet3d base;            // frozen: never written by control training
    ResBlock ctrl_res1;     // trainable copies of the base encoder half
    Conv3dLayer ctrl_down;
    ResBlock ctrl_mid;
    Conv3dLayer zero_mid;   // k1 w2 -> w2, into the decoder's low-res input
    Conv3dLayer zero_skip;  // k1 w1 -> w1, into the skip concat
    CondEncoder cond_enc;

    std::vector<ParamTensor*> control_params() {
        std::vector<ParamTensor*> out;
        ctrl_res1.collect_params(out);
        out.push_back(&ctrl_down.weight);
        out.push_back(&ctrl_down.bias);
        ctrl_mid.collect_params(out);
        out.push_back(&zero_mid.weight);
        out.push_back(&zero_mid.bias);
        out.push_back(&zero_skip.weight);
        out.push_back(&zero_skip.bias);
        for (ParamTensor* p : cond_enc.params()) out.push_back(p);
        return out;
    }
    std::vector<std::pair<std::string, ParamTensor*>> control_named_params(
        const std::string& prefix = "cn") {
        std::vector<std::pair<std::string, ParamTensor*>> out;
        ctrl_res1.collect_named(prefix + ".ctrl_res1", out);
        out.emplace_back(prefix + ".ctrl_down.weight", &ctrl_down.weight);
        out.emplace_back(prefix + ".ctrl_down.bias", &ctrl_down.bias);
        ctrl_mid.collect_named(prefix + ".ctrl_mid", out);
        out.emplace_back(prefix + ".zero_mid.weight", &zero_mid.weight);
        out.emplace_back(prefix + ".zero_mid.bias", &zero_mid.bias);
        out.emplace_back(prefix + ".zero_skip.weight", &zero_skip.weight);
        out.emplace_back(prefix + ".zero_skip.bias", &zero_skip.bias);
        cond_enc.collect_named(prefix + ".cond", out);
        return out;
    }
};

// The trainable copies start FROM the base weights; the zero convs start at
// exactly zero so the whole branch is invisible until trained.
inline ControlNetModel make_controlnet(const UNet3d& base, Rng& rng,
                                       i64 cond_f = 4, i64 cond_emb = 8) {
    ControlNetModel cn;
    cn.base = base;
    cn.ctrl_res1 = base.res1;
    cn.ctrl_down = base.down;
    cn.ctrl_mid = base.mid;
    cn.zero_mid = Conv3dLayer(base.cfg.w2, base.cfg.w2, {1, 1, 1}, {1, 1, 1});
    cn.zero_skip = Conv3dLayer(base.cfg.w1, base.cfg.w1, {1, 1, 1}, {1, 1, 1});
    CondEncoderConfig ccfg;
    ccfg.emb = cond_emb;
    ccfg.latent_channels = base.cfg.latent_channels;
    ccfg.f = cond_f;
    cn.cond_enc = make_cond_encoder(ccfg, rng);
    return cn;
}

inline bool conv_all_zero(const Conv3dLayer& c) {
    for (float v : c.weight.w)
        if (v != 0.0f) return false;
    for (float v : c.bias.w)
        if (v != 0.0f) return false;
    return true;
}

// FNV-1a over the base parameter bytes, in params() order — the frozen
// contract's witness.
inline std::uint64_t base_checksum(ControlNetModel& cn) {
    std::uint64_t h = kFnvOffset;
    for (ParamTensor* p : cn.base.params())
        h = fnv1a64(p->w.data(), p->w.size() * sizeof(float), h);
    return h;
}

struct ControlCache {
    std::vector<float> e;
    ResCache c_r1, c_rm;     // control blocks
    Tensor5 c_h1, c_h3;      // control features: zero_skip / zero_mid inputs
    ResCache b_rd;           // base decoder block
    Tensor5 h3p, u, h6;      // post-injection tensors the decoder backward needs
    Tensor5 eps_hat;
};

// Base forward with the control branch injected at both decoder levels.
// While the zero convs are exactly zero the additions are skipped outright,
// which keeps the init identity bitwise (a computed zero would still flip
// -0.0 inputs to +0.0).
inline Tensor5 control_forward(const ControlNetModel& cn, const Tensor5& z_t, i64 t,
                               const PrimaryCond& cond, const Tensor5& c_f,
                               ControlCache* cache = nullptr) {
    if (z_t.dims[1] != cn.base.cfg.latent_channels)
        throw std::invalid_argument("control: channel mismatch");
    for (int a = 2; a < 5; ++a)
        if (z_t.dims[a] % 2 != 0 || z_t.dims[a] < 2)
            throw std::invalid_argument("control: spatial dims must be even and >= 2");
    if (c_f.dims != z_t.dims)
        throw std::invalid_argument("control: c_f dims must match z_t");

    const std::vector<float> e = unet_embedding(cn.base, t, cond, nullptr);

    // frozen encoder half — nothing upstream of the injections needs a cache
    Tensor5 h1 = res_forward(cn.base.res1, z_t, e, nullptr);
    Tensor5 h2 = conv3d_forward(cn.base.down, h1);
    Tensor5 h3 = res_forward(cn.base.mid, h2, e, nullptr);

    // trainable copy, fed the conditioned input
    Tensor5 xc = z_t;
    for (i64 i = 0; i < xc.numel(); ++i) xc.data[i] += c_f.data[i];
    Tensor5 hc1 = res_forward(cn.ctrl_res1, xc, e, cache ? &cache->c_r1 : nullptr);
    Tensor5 hc2 = conv3d_forward(cn.ctrl_down, hc1);
    Tensor5 hc3 = res_forward(cn.ctrl_mid, hc2, e, cache ? &cache->c_rm : nullptr);

    if (!conv_all_zero(cn.zero_mid)) {
        const Tensor5 inj = conv3d_forward(cn.zero_mid, hc3);
        for (i64 i = 0; i < h3.numel(); ++i) h3.data[i] += inj.data[i];
    }
    if (!conv_all_zero(cn.zero_skip)) {
        const Tensor5 inj = conv3d_forward(cn.zero_skip, hc1);
        for (i64 i = 0; i < h1.numel(); ++i) h1.data[i] += inj.data[i];
    }

    Tensor5 u = upsample2_forward(h3);
    Tensor5 h4 = conv3d_forward(cn.base.up_conv, u);
    Tensor5 h5 = concat_channels(h4, h1);
    Tensor5 h6 = res_forward(cn.base.dec, h5, e, cache ? &cache->b_rd : nullptr);
    Tensor5 eps_hat = conv3d_forward(cn.base.out_conv, h6);
    if (cache) {
        cache->e = e;
        cache->c_h1 = std::move(hc1);
        cache->c_h3 = std::move(hc3);
        cache->h3p = std::move(h3);
        cache->u = std::move(u);
        cache->h6 = std::move(h6);
        cache->eps_hat = eps_hat;
    }
    return eps_hat;
}

// Backprop to the control parameters only; base layers pass gradients
// through without accumulating (res_backward's accumulate == false), and
// the walk stops at the injection points — nothing trainable sits above
// them on the base side.  Returns the grad w.r.t. c_f.
inline Tensor5 control_backward(ControlNetModel& cn, const ControlCache& c,
                                const Tensor5& g_eps) {
    ConvGrads g_out = conv3d_backward(cn.base.out_conv, c.h6, g_eps);
    ResGrads gd = res_backward(cn.base.dec, c.b_rd, g_out.grad_x, /*accumulate=*/false);
    auto [gh4, gh1p] = split_channels(gd.gx, cn.base.cfg.w1);
    ConvGrads g_up = conv3d_backward(cn.base.up_conv, c.u, gh4);
    Tensor5 gh3p = upsample2_backward(c.h3p, g_up.grad_x);

    ConvGrads gzm = conv3d_backward(cn.zero_mid, c.c_h3, gh3p);
    for (std::size_t i = 0; i < gzm.grad_w.size(); ++i) cn.zero_mid.weight.g[i] += gzm.grad_w[i];
    for (std::size_t i = 0; i < gzm.grad_b.size(); ++i) cn.zero_mid.bias.g[i] += gzm.grad_b[i];
    ResGrads gmc = res_backward(cn.ctrl_mid, c.c_rm, gzm.grad_x, /*accumulate=*/true);
    ConvGrads gdc = conv3d_backward(cn.ctrl_down, c.c_h1, gmc.gx);
    for (std::size_t i = 0; i < gdc.grad_w.size(); ++i) cn.ctrl_down.weight.g[i] += gdc.grad_w[i];
    for (std::size_t i = 0; i < gdc.grad_b.size(); ++i) cn.ctrl_down.bias.g[i] += gdc.grad_b[i];

    ConvGrads gzs = conv3d_backward(cn.zero_skip, c.c_h1, gh1p);
    for (std::size_t i = 0; i < gzs.grad_w.size(); ++i) cn.zero_skip.weight.g[i] += gzs.grad_w[i];
    for (std::size_t i = 0; i < gzs.grad_b.size(); ++i) cn.zero_skip.bias.g[i] += gzs.grad_b[i];

    // hc1 feeds both the control down conv and the skip-level zero conv
    Tensor5 ghc1 = std::move(gdc.grad_x);
    for (i64 i = 0; i < ghc1.numel(); ++i) ghc1.data[i] += gzs.grad_x.data[i];
    ResGrads g1c = res_backward(cn.ctrl_res1, c.c_r1, ghc1, /*accumulate=*/true);
    // the control blocks' embedding-input grads would flow into the frozen
    // base MLPs — dropped by the frozen contract
    return std::move(g1c.gx);  // d(loss)/d(xc) == d(loss)/d(c_f)
}

// =====================================================================
//  Objective and trainer
// =====================================================================

// Same L1-on-noise objective as the base model, with the extra condition.
inline double controlnet_loss(ControlNetModel& cn, const NoiseSchedule& ns, const Tensor5& z0,
                              const PrimaryCond& cond, const Tensor5& c_f, i64 t,
                              const Tensor5& eps, bool backward_pass = false,
                              Tensor5* grad_cf = nullptr) {
    const Tensor5 z_t = q_sample(ns, z0, t, eps);
    ControlCache cache;
    const Tensor5 eps_hat =
        control_forward(cn, z_t, t, cond, c_f, backward_pass ? &cache : nullptr);
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
    Tensor5 gcf = control_backward(cn, cache, g);
    if (grad_cf) *grad_cf = std::move(gcf);
    return l / n;
}

struct CnTrainer {
    ControlNetModel* model = nullptr;
    NoiseSchedule sched;
    AdamState opt;
};

inline CnTrainer make_cn_trainer(ControlNetModel& cn, NoiseSchedule sched, AdamConfig cfg) {
    CnTrainer t;
    t.model = &cn;
    t.sched = std::move(sched);
    t.opt = make_adam(cn.control_params(), cfg);
    // base grads start clean so the per-step audit can demand exact zeros
    for (ParamTensor* p : cn.base.params()) p->zero_grad();
    return t;
}

// One control step: encode the mask, denoise with the branch, update only
// control parameters.  Any gradient reaching a base parameter is a frozen-
// contract violation and aborts.
inline double train_step_cn(CnTrainer& t, const Tensor5& z0, const SegMask& mask,
                            const PrimaryCond& cond, Rng& rng) {
    const i64 step_t = rng.uniform_int(1, t.sched.T);
    Tensor5 eps = Tensor5::shaped(z0.dims);
    rng.fill_normal(eps);
    zero_grads(t.opt);
    CondEncodeCache ce;
    Tensor5 c_f = cond_encode(t.model->cond_enc, mask, nullptr, &ce);
    Tensor5 g_cf;
    const double loss = controlnet_loss(*t.model, t.sched, z0, cond, c_f, step_t, eps,
                                        /*backward_pass=*/true, &g_cf);
    cond_encode_backward(t.model->cond_enc, ce, g_cf);
    if (!std::isfinite(loss))
        throw std::runtime_error("cn training diverged: loss not finite at step " +
                                 std::to_string(t.opt.step));
    for (ParamTensor* p : t.model->base.params())
        for (float gv : p->g)
            if (gv != 0.0f)
                throw std::logic_error("control: frozen base received gradient");
    adam_step(t.opt);
    return loss;
}

// Ancestral sampling with the control branch engaged.
inline Tensor5 generate_latent_cn(const ControlNetModel& cn, const NoiseSchedule& ns,
                                  const std::array<i64, 5>& dims, const PrimaryCond& cond,
                                  const Tensor5& c_f, std::uint64_t seed) {
    Rng rng(seed);
    Tensor5 z = Tensor5::shaped(dims);
    rng.fill_normal(z);
    Tensor5 noise = Tensor5::shaped(dims);
    for (i64 t = ns.T; t >= 1; --t) {
        const Tensor5 eps_hat = control_forward(cn, z, t, cond, c_f);
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
