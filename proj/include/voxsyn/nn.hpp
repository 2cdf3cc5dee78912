#pragma once
// nn.hpp
//
// The 3-D layer zoo: conv, group norm, activations, nearest upsample,
// identity, plus vector-space linear layers and the sinusoidal time
// embedding.  Forward ops that care about the depth axis come in a "ranged"
// form that computes an arbitrary global output interval from an input slab —
// the monolithic forward is just the full-range call, so split execution and
// monolithic execution share one arithmetic path (same taps, same order).
//
// Backward passes are hand-derived and returned functionally (grad_x plus
// parameter grads); the chain walker accumulates them into grad buffers.
// GroupNorm statistics accumulate in doubles with a fixed iteration order
// (c-within-group, then d, h, w) so that partial sums over depth segments
// reduce to exactly the same result as the single-pass computation when the
// partition is trivial.

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace voxsyn {

// =====================================================================
//  Parameters
// =====================================================================

struct ParamTensor {
    std::vector<i64> shape;
    std::vector<float> w;  // values
    std::vector<float> g;  // gradient accumulator

    void init(std::vector<i64> s) {
        shape = std::move(s);
        i64 n = 1;
        for (i64 e : shape) n *= e;
        w.assign(static_cast<std::size_t>(n), 0.0f);
        g.assign(static_cast<std::size_t>(n), 0.0f);
    }
    i64 numel() const { return static_cast<i64>(w.size()); }
    void zero_grad() { std::fill(g.begin(), g.end(), 0.0f); }
};

// =====================================================================
//  Layer types
// =====================================================================

struct Conv3dLayer {
    i64 c_in = 1, c_out = 1;
    std::array<i64, 3> k{3, 3, 3};  // kernel  [kd, kh, kw]
    std::array<i64, 3> s{1, 1, 1};  // stride  in {1, 2}
    std::array<i64, 3> p{1, 1, 1};  // padding, fixed at k/2 (floor)
    ParamTensor weight;             // [c_out, c_in, kd, kh, kw]
    ParamTensor bias;               // [c_out]

    Conv3dLayer() = default;
    Conv3dLayer(i64 ci, i64 co, std::array<i64, 3> kernel, std::array<i64, 3> stride)
        : c_in(ci), c_out(co), k(kernel), s(stride) {
        if (ci < 1 || co < 1) throw std::invalid_argument("conv: channels must be >= 1");
        for (int i = 0; i < 3; ++i) {
            if (k[i] < 1) throw std::invalid_argument("conv: kernel must be >= 1");
            if (s[i] != 1 && s[i] != 2) throw std::invalid_argument("conv: stride must be 1 or 2");
            // Odd kernels with stride 1 keep spatial extent; even ones would
            // silently shift the grid, so they are rejected up front.
            if (s[i] == 1 && k[i] % 2 == 0)
                throw std::invalid_argument("conv: stride-1 axes need odd kernels");
            p[i] = k[i] / 2;
        }
        weight.init({co, ci, k[0], k[1], k[2]});
        bias.init({co});
    }

    i64 widx(i64 oc, i64 ic, i64 kd, i64 kh, i64 kw) const {
        return (((oc * c_in + ic) * k[0] + kd) * k[1] + kh) * k[2] + kw;
    }
};

struct GroupNormLayer {
    i64 channels = 1, groups = 1;
    float eps = 1e-5f;
    ParamTensor gamma, beta;

    GroupNormLayer() = default;
    GroupNormLayer(i64 ch, i64 g, float e = 1e-5f) : channels(ch), groups(g), eps(e) {
        if (g < 1 || ch < 1 || ch % g != 0)
            throw std::invalid_argument("groupnorm: groups must divide channels");
        gamma.init({ch});
        beta.init({ch});
        std::fill(gamma.w.begin(), gamma.w.end(), 1.0f);
    }
};

enum class ActKind { silu, relu, leaky_relu };

struct ActivationLayer {
    ActKind kind = ActKind::silu;
    float alpha = 0.2f;  // leaky slope; ignored otherwise
};

struct UpsampleLayer {};  // nearest-neighbour x2 on d, h, w

struct IdentityLayer {};

using Layer =
    std::variant<Conv3dLayer, GroupNormLayer, ActivationLayer, UpsampleLayer, IdentityLayer>;

struct LayerChain {
    std::vector<Layer> layers;
};

// =====================================================================
//  Shape propagation
// =====================================================================

inline i64 conv_out_extent(i64 in, i64 k, i64 s, i64 p) {
    i64 o = (in + 2 * p - k) / s + 1;
    if (o < 1)
        throw std::invalid_argument("conv: output extent < 1 (in=" + std::to_string(in) + ")");
    return o;
}

inline std::array<i64, 5> layer_out_dims(const Layer& layer, const std::array<i64, 5>& in) {
    std::array<i64, 5> out = in;
    if (const auto* cv = std::get_if<Conv3dLayer>(&layer)) {
        if (in[1] != cv->c_in)
            throw std::invalid_argument("conv: expected " + std::to_string(cv->c_in) +
                                        " input channels, got " + std::to_string(in[1]));
        out[1] = cv->c_out;
        for (int i = 0; i < 3; ++i)
            out[2 + i] = conv_out_extent(in[2 + i], cv->k[i], cv->s[i], cv->p[i]);
    } else if (const auto* gn = std::get_if<GroupNormLayer>(&layer)) {
        if (in[1] != gn->channels)
            throw std::invalid_argument("groupnorm: channel mismatch");
    } else if (std::get_if<UpsampleLayer>(&layer)) {
        for (int i = 0; i < 3; ++i) out[2 + i] = in[2 + i] * 2;
    }
    return out;
}

// Dims entering each layer plus the final output dims (size layers+1).
inline std::vector<std::array<i64, 5>> chain_dims(const LayerChain& chain,
                                                  const std::array<i64, 5>& in) {
    std::vector<std::array<i64, 5>> dims{in};
    for (const Layer& l : chain.layers) dims.push_back(layer_out_dims(l, dims.back()));
    return dims;
}

// =====================================================================
//  Conv3d
// =====================================================================
//
// Ranged form: `slab` holds global depth rows [d_in.start, d_in.end) of the
// layer's input; the result holds global output rows [d_out.start,
// d_out.end).  Depth taps outside [0, d_in_full) are true zero padding;
// depth taps inside that range must be present in the slab (planner
// contract).  h and w always run at full extent.  The monolithic forward is
// the d_in = [0, D), d_out = [0, outD) case — one code path for both.

inline Tensor5 conv3d_forward_ranged(const Conv3dLayer& L, const Tensor5& slab, Interval d_in,
                                     Interval d_out, i64 d_in_full) {
    if (slab.dims[1] != L.c_in) throw std::invalid_argument("conv: channel mismatch");
    if (slab.dims[2] != d_in.len()) throw std::invalid_argument("conv: slab/interval mismatch");
    const i64 H = slab.dims[3], W = slab.dims[4];
    const i64 oH = conv_out_extent(H, L.k[1], L.s[1], L.p[1]);
    const i64 oW = conv_out_extent(W, L.k[2], L.s[2], L.p[2]);

    Tensor5 out(slab.dims[0], L.c_out, d_out.len(), oH, oW);
    const float* wp = L.weight.w.data();
    for (i64 n = 0; n < slab.dims[0]; ++n)
        for (i64 oc = 0; oc < L.c_out; ++oc)
            for (i64 od = d_out.start; od < d_out.end; ++od)
                for (i64 oh = 0; oh < oH; ++oh)
                    for (i64 ow = 0; ow < oW; ++ow) {
                        float acc = L.bias.w[oc];
                        for (i64 ic = 0; ic < L.c_in; ++ic)
                            for (i64 kd = 0; kd < L.k[0]; ++kd) {
                                const i64 dg = od * L.s[0] - L.p[0] + kd;
                                if (dg < 0 || dg >= d_in_full) continue;
                                for (i64 kh = 0; kh < L.k[1]; ++kh) {
                                    const i64 hg = oh * L.s[1] - L.p[1] + kh;
                                    if (hg < 0 || hg >= H) continue;
                                    for (i64 kw = 0; kw < L.k[2]; ++kw) {
                                        const i64 wg = ow * L.s[2] - L.p[2] + kw;
                                        if (wg < 0 || wg >= W) continue;
                                        acc += wp[L.widx(oc, ic, kd, kh, kw)] *
                                               slab.at(n, ic, dg - d_in.start, hg, wg);
                                    }
                                }
                            }
                        out.at(n, oc, od - d_out.start, oh, ow) = acc;
                    }
    return out;
}

inline Tensor5 conv3d_forward(const Conv3dLayer& L, const Tensor5& x) {
    const i64 oD = conv_out_extent(x.dims[2], L.k[0], L.s[0], L.p[0]);
    return conv3d_forward_ranged(L, x, {0, x.dims[2]}, {0, oD}, x.dims[2]);
}

struct ConvGrads {
    Tensor5 grad_x;
    std::vector<float> grad_w, grad_b;
};

inline ConvGrads conv3d_backward(const Conv3dLayer& L, const Tensor5& x, const Tensor5& gy) {
    std::array<i64, 5> od = layer_out_dims(Layer{L}, x.dims);
    // The cheap way to keep Layer{L} above from copying parameter arrays is
    // not worth it at this scale; shape checks only need metadata anyway.
    if (od != gy.dims)
        throw std::invalid_argument("conv backward: grad shape " + shape_str(gy) +
                                    " does not match forward output");
    ConvGrads out;
    out.grad_x = Tensor5::shaped(x.dims);
    out.grad_w.assign(L.weight.w.size(), 0.0f);
    out.grad_b.assign(L.bias.w.size(), 0.0f);

    const i64 D = x.dims[2], H = x.dims[3], W = x.dims[4];
    const float* wp = L.weight.w.data();
    for (i64 n = 0; n < gy.dims[0]; ++n)
        for (i64 oc = 0; oc < L.c_out; ++oc)
            for (i64 odx = 0; odx < gy.dims[2]; ++odx)
                for (i64 oh = 0; oh < gy.dims[3]; ++oh)
                    for (i64 ow = 0; ow < gy.dims[4]; ++ow) {
                        const float g = gy.at(n, oc, odx, oh, ow);
                        out.grad_b[oc] += g;
                        for (i64 ic = 0; ic < L.c_in; ++ic)
                            for (i64 kd = 0; kd < L.k[0]; ++kd) {
                                const i64 dg = odx * L.s[0] - L.p[0] + kd;
                                if (dg < 0 || dg >= D) continue;
                                for (i64 kh = 0; kh < L.k[1]; ++kh) {
                                    const i64 hg = oh * L.s[1] - L.p[1] + kh;
                                    if (hg < 0 || hg >= H) continue;
                                    for (i64 kw = 0; kw < L.k[2]; ++kw) {
                                        const i64 wg = ow * L.s[2] - L.p[2] + kw;
                                        if (wg < 0 || wg >= W) continue;
                                        const i64 wi = L.widx(oc, ic, kd, kh, kw);
                                        out.grad_w[wi] += g * x.at(n, ic, dg, hg, wg);
                                        out.grad_x.at(n, ic, dg, hg, wg) += g * wp[wi];
                                    }
                                }
                            }
                    }
    return out;
}

// =====================================================================
//  GroupNorm — two-phase statistics
// =====================================================================

struct GroupStats {
    i64 n_batch = 0, groups = 0;
    std::vector<float> mean, var;  // [n_batch * groups], population variance

    i64 idx(i64 n, i64 g) const { return n * groups + g; }
};

// Partial sums for one depth interval of one tensor; reduced across segments
// in fixed order.  count is per (batch, group).
struct GroupPartial {
    std::vector<double> sum, sumsq;
    std::vector<i64> count;
};

// Accumulate over global depth rows [d_iv.start, d_iv.end), which must lie in
// the slab [slab_iv.start, slab_iv.end).  Iteration order per (batch, group)
// is c-within-group, d, h, w — the same order groupnorm_stats uses, so a
// full-extent partial reproduces its sums bit for bit.
inline GroupPartial groupnorm_partial(const GroupNormLayer& L, const Tensor5& slab,
                                      Interval slab_iv, Interval d_iv) {
    if (slab.dims[1] != L.channels) throw std::invalid_argument("groupnorm: channel mismatch");
    if (d_iv.start < slab_iv.start || d_iv.end > slab_iv.end)
        throw std::invalid_argument("groupnorm: owned interval outside slab");
    const i64 cpg = L.channels / L.groups;
    GroupPartial p;
    p.sum.assign(static_cast<std::size_t>(slab.dims[0] * L.groups), 0.0);
    p.sumsq.assign(p.sum.size(), 0.0);
    p.count.assign(p.sum.size(), 0);
    for (i64 n = 0; n < slab.dims[0]; ++n)
        for (i64 g = 0; g < L.groups; ++g) {
            double s = 0.0, s2 = 0.0;
            for (i64 cc = 0; cc < cpg; ++cc)
                for (i64 d = d_iv.start; d < d_iv.end; ++d)
                    for (i64 h = 0; h < slab.dims[3]; ++h)
                        for (i64 w = 0; w < slab.dims[4]; ++w) {
                            const double v =
                                slab.at(n, g * cpg + cc, d - slab_iv.start, h, w);
                            s += v;
                            s2 += v * v;
                        }
            const i64 i = n * L.groups + g;
            p.sum[i] = s;
            p.sumsq[i] = s2;
            p.count[i] = cpg * d_iv.len() * slab.dims[3] * slab.dims[4];
        }
    return p;
}

// Reduce partials in the order given (callers pass segment order).
inline GroupStats reduce_group_partials(const GroupNormLayer& L,
                                        const std::vector<GroupPartial>& parts, i64 n_batch) {
    GroupStats st;
    st.n_batch = n_batch;
    st.groups = L.groups;
    const std::size_t slots = static_cast<std::size_t>(n_batch * L.groups);
    st.mean.assign(slots, 0.0f);
    st.var.assign(slots, 0.0f);
    for (std::size_t i = 0; i < slots; ++i) {
        double s = 0.0, s2 = 0.0;
        i64 cnt = 0;
        for (const GroupPartial& p : parts) {
            s += p.sum[i];
            s2 += p.sumsq[i];
            cnt += p.count[i];
        }
        if (cnt == 0) throw std::runtime_error("groupnorm: empty group reduction");
        const double mean = s / static_cast<double>(cnt);
        const double var = std::max(0.0, s2 / static_cast<double>(cnt) - mean * mean);
        st.mean[i] = static_cast<float>(mean);
        st.var[i] = static_cast<float>(var);
    }
    return st;
}

inline GroupStats groupnorm_stats(const GroupNormLayer& L, const Tensor5& x) {
    std::vector<GroupPartial> one{groupnorm_partial(L, x, {0, x.dims[2]}, {0, x.dims[2]})};
    return reduce_group_partials(L, one, x.dims[0]);
}

inline Tensor5 groupnorm_apply(const GroupNormLayer& L, const Tensor5& x,
                               const GroupStats& st) {
    if (x.dims[1] != L.channels) throw std::invalid_argument("groupnorm: channel mismatch");
    const i64 cpg = L.channels / L.groups;
    Tensor5 out = Tensor5::shaped(x.dims);
    for (i64 n = 0; n < x.dims[0]; ++n)
        for (i64 c = 0; c < x.dims[1]; ++c) {
            const i64 g = c / cpg;
            const float mean = st.mean[st.idx(n, g)];
            const float inv = 1.0f / std::sqrt(st.var[st.idx(n, g)] + L.eps);
            const float ga = L.gamma.w[c], be = L.beta.w[c];
            for (i64 d = 0; d < x.dims[2]; ++d)
                for (i64 h = 0; h < x.dims[3]; ++h)
                    for (i64 w = 0; w < x.dims[4]; ++w)
                        out.at(n, c, d, h, w) =
                            ga * (x.at(n, c, d, h, w) - mean) * inv + be;
        }
    return out;
}

struct GroupNormGrads {
    Tensor5 grad_x;
    std::vector<float> grad_gamma, grad_beta;
};

// Full backward: statistics are functions of x, so the mean/var terms feed
// back.  With ghat = gy * gamma, per group of m elements:
//   dx = inv * (ghat - mean(ghat) - xhat * mean(ghat * xhat))
inline GroupNormGrads groupnorm_backward(const GroupNormLayer& L, const Tensor5& x,
                                         const GroupStats& st, const Tensor5& gy) {
    detail::check_same_shape(x, gy, "groupnorm backward");
    const i64 cpg = L.channels / L.groups;
    GroupNormGrads out;
    out.grad_x = Tensor5::shaped(x.dims);
    out.grad_gamma.assign(static_cast<std::size_t>(L.channels), 0.0f);
    out.grad_beta.assign(static_cast<std::size_t>(L.channels), 0.0f);

    for (i64 n = 0; n < x.dims[0]; ++n)
        for (i64 g = 0; g < L.groups; ++g) {
            const float mean = st.mean[st.idx(n, g)];
            const float inv = 1.0f / std::sqrt(st.var[st.idx(n, g)] + L.eps);
            const i64 m = cpg * x.dims[2] * x.dims[3] * x.dims[4];

            double s1 = 0.0, s2 = 0.0;  // sum(ghat), sum(ghat * xhat)
            for (i64 cc = 0; cc < cpg; ++cc) {
                const i64 c = g * cpg + cc;
                for (i64 d = 0; d < x.dims[2]; ++d)
                    for (i64 h = 0; h < x.dims[3]; ++h)
                        for (i64 w = 0; w < x.dims[4]; ++w) {
                            const float xhat = (x.at(n, c, d, h, w) - mean) * inv;
                            const float gyv = gy.at(n, c, d, h, w);
                            const float ghat = gyv * L.gamma.w[c];
                            s1 += ghat;
                            s2 += static_cast<double>(ghat) * xhat;
                            out.grad_gamma[c] += gyv * xhat;
                            out.grad_beta[c] += gyv;
                        }
            }
            const float m1 = static_cast<float>(s1 / m), m2 = static_cast<float>(s2 / m);
            for (i64 cc = 0; cc < cpg; ++cc) {
                const i64 c = g * cpg + cc;
                for (i64 d = 0; d < x.dims[2]; ++d)
                    for (i64 h = 0; h < x.dims[3]; ++h)
                        for (i64 w = 0; w < x.dims[4]; ++w) {
                            const float xhat = (x.at(n, c, d, h, w) - mean) * inv;
                            const float ghat = gy.at(n, c, d, h, w) * L.gamma.w[c];
                            out.grad_x.at(n, c, d, h, w) = inv * (ghat - m1 - xhat * m2);
                        }
            }
        }
    return out;
}

// =====================================================================
//  Activations
// =====================================================================

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

inline float act_eval(ActKind k, float alpha, float x) {
    switch (k) {
        case ActKind::silu: return x * sigmoidf(x);
        case ActKind::relu: return x > 0.0f ? x : 0.0f;
        default: return x > 0.0f ? x : alpha * x;
    }
}

inline float act_grad(ActKind k, float alpha, float x) {
    switch (k) {
        case ActKind::silu: {
            const float s = sigmoidf(x);
            return s * (1.0f + x * (1.0f - s));
        }
        case ActKind::relu: return x > 0.0f ? 1.0f : 0.0f;
        default: return x > 0.0f ? 1.0f : alpha;
    }
}

inline Tensor5 act_forward(const ActivationLayer& L, const Tensor5& x) {
    Tensor5 out = Tensor5::shaped(x.dims);
    for (i64 i = 0; i < x.numel(); ++i) out.data[i] = act_eval(L.kind, L.alpha, x.data[i]);
    return out;
}

inline Tensor5 act_backward(const ActivationLayer& L, const Tensor5& x, const Tensor5& gy) {
    detail::check_same_shape(x, gy, "act backward");
    Tensor5 out = Tensor5::shaped(x.dims);
    for (i64 i = 0; i < x.numel(); ++i)
        out.data[i] = gy.data[i] * act_grad(L.kind, L.alpha, x.data[i]);
    return out;
}

// =====================================================================
//  Nearest-neighbour upsample x2
// =====================================================================

inline Tensor5 upsample2_forward_ranged(const Tensor5& slab, Interval d_in, Interval d_out) {
    Tensor5 out(slab.dims[0], slab.dims[1], d_out.len(), slab.dims[3] * 2, slab.dims[4] * 2);
    for (i64 n = 0; n < out.dims[0]; ++n)
        for (i64 c = 0; c < out.dims[1]; ++c)
            for (i64 od = d_out.start; od < d_out.end; ++od) {
                const i64 sd = od / 2 - d_in.start;
                if (sd < 0 || sd >= slab.dims[2])
                    throw std::invalid_argument("upsample: slab missing source row");
                for (i64 oh = 0; oh < out.dims[3]; ++oh)
                    for (i64 ow = 0; ow < out.dims[4]; ++ow)
                        out.at(n, c, od - d_out.start, oh, ow) =
                            slab.at(n, c, sd, oh / 2, ow / 2);
            }
    return out;
}

inline Tensor5 upsample2_forward(const Tensor5& x) {
    return upsample2_forward_ranged(x, {0, x.dims[2]}, {0, x.dims[2] * 2});
}

inline Tensor5 upsample2_backward(const Tensor5& x, const Tensor5& gy) {
    Tensor5 gx = Tensor5::shaped(x.dims);
    for (i64 n = 0; n < gy.dims[0]; ++n)
        for (i64 c = 0; c < gy.dims[1]; ++c)
            for (i64 d = 0; d < gy.dims[2]; ++d)
                for (i64 h = 0; h < gy.dims[3]; ++h)
                    for (i64 w = 0; w < gy.dims[4]; ++w)
                        gx.at(n, c, d / 2, h / 2, w / 2) += gy.at(n, c, d, h, w);
    return gx;
}

// =====================================================================
//  Average pool x2 (multi-scale losses)
// =====================================================================

// 2x2x2 mean pool, stride 2, floor semantics: an odd trailing row is dropped.
inline Tensor5 avgpool2_forward(const Tensor5& x) {
    for (int a = 2; a < 5; ++a)
        if (x.dims[a] < 2)
            throw std::invalid_argument("avgpool2: spatial dim " + std::to_string(a) + " < 2");
    Tensor5 out(x.dims[0], x.dims[1], x.dims[2] / 2, x.dims[3] / 2, x.dims[4] / 2);
    for (i64 n = 0; n < out.dims[0]; ++n)
        for (i64 c = 0; c < out.dims[1]; ++c)
            for (i64 d = 0; d < out.dims[2]; ++d)
                for (i64 h = 0; h < out.dims[3]; ++h)
                    for (i64 w = 0; w < out.dims[4]; ++w) {
                        float s = 0.0f;
                        for (i64 dd = 0; dd < 2; ++dd)
                            for (i64 dh = 0; dh < 2; ++dh)
                                for (i64 dw = 0; dw < 2; ++dw)
                                    s += x.at(n, c, 2 * d + dd, 2 * h + dh, 2 * w + dw);
                        out.at(n, c, d, h, w) = s / 8.0f;
                    }
    return out;
}

// Dropped rows (odd extents) receive zero gradient.
inline Tensor5 avgpool2_backward(const Tensor5& x, const Tensor5& gy) {
    Tensor5 gx = Tensor5::shaped(x.dims);
    for (i64 n = 0; n < gy.dims[0]; ++n)
        for (i64 c = 0; c < gy.dims[1]; ++c)
            for (i64 d = 0; d < gy.dims[2]; ++d)
                for (i64 h = 0; h < gy.dims[3]; ++h)
                    for (i64 w = 0; w < gy.dims[4]; ++w) {
                        const float g = gy.at(n, c, d, h, w) / 8.0f;
                        for (i64 dd = 0; dd < 2; ++dd)
                            for (i64 dh = 0; dh < 2; ++dh)
                                for (i64 dw = 0; dw < 2; ++dw)
                                    gx.at(n, c, 2 * d + dd, 2 * h + dh, 2 * w + dw) += g;
                    }
    return gx;
}

// =====================================================================
//  Channel concat / split (skip connections)
// =====================================================================

inline Tensor5 concat_channels(const Tensor5& a, const Tensor5& b) {
    for (int i = 0; i < 5; ++i)
        if (i != 1 && a.dims[i] != b.dims[i])
            throw std::invalid_argument("concat_channels: dim " + std::to_string(i) +
                                        " mismatch");
    Tensor5 out(a.dims[0], a.dims[1] + b.dims[1], a.dims[2], a.dims[3], a.dims[4]);
    for (i64 n = 0; n < out.dims[0]; ++n)
        for (i64 c = 0; c < out.dims[1]; ++c) {
            const Tensor5& src = c < a.dims[1] ? a : b;
            const i64 sc = c < a.dims[1] ? c : c - a.dims[1];
            for (i64 d = 0; d < out.dims[2]; ++d)
                for (i64 h = 0; h < out.dims[3]; ++h)
                    for (i64 w = 0; w < out.dims[4]; ++w)
                        out.at(n, c, d, h, w) = src.at(n, sc, d, h, w);
        }
    return out;
}

// Inverse of concat_channels: first c_first channels, then the rest.
inline std::pair<Tensor5, Tensor5> split_channels(const Tensor5& x, i64 c_first) {
    if (c_first < 1 || c_first >= x.dims[1])
        throw std::invalid_argument("split_channels: bad split point");
    Tensor5 a(x.dims[0], c_first, x.dims[2], x.dims[3], x.dims[4]);
    Tensor5 b(x.dims[0], x.dims[1] - c_first, x.dims[2], x.dims[3], x.dims[4]);
    for (i64 n = 0; n < x.dims[0]; ++n)
        for (i64 c = 0; c < x.dims[1]; ++c) {
            Tensor5& dst = c < c_first ? a : b;
            const i64 dc = c < c_first ? c : c - c_first;
            for (i64 d = 0; d < x.dims[2]; ++d)
                for (i64 h = 0; h < x.dims[3]; ++h)
                    for (i64 w = 0; w < x.dims[4]; ++w)
                        dst.at(n, dc, d, h, w) = x.at(n, c, d, h, w);
        }
    return {std::move(a), std::move(b)};
}

// =====================================================================
//  Linear layers on flat vectors (embedding MLPs)
// =====================================================================

struct LinearLayer {
    i64 in = 1, out = 1;
    ParamTensor W;  // [out, in]
    ParamTensor b;  // [out]

    LinearLayer() = default;
    LinearLayer(i64 i, i64 o) : in(i), out(o) {
        W.init({o, i});
        b.init({o});
    }
};

inline std::vector<float> linear_forward(const LinearLayer& L, const std::vector<float>& x) {
    if (static_cast<i64>(x.size()) != L.in)
        throw std::invalid_argument("linear: input size mismatch");
    std::vector<float> y(static_cast<std::size_t>(L.out));
    for (i64 o = 0; o < L.out; ++o) {
        float acc = L.b.w[o];
        for (i64 i = 0; i < L.in; ++i) acc += L.W.w[o * L.in + i] * x[i];
        y[o] = acc;
    }
    return y;
}

struct LinearGrads {
    std::vector<float> grad_x, grad_W, grad_b;
};

inline LinearGrads linear_backward(const LinearLayer& L, const std::vector<float>& x,
                                   const std::vector<float>& gy) {
    LinearGrads out;
    out.grad_x.assign(x.size(), 0.0f);
    out.grad_W.assign(L.W.w.size(), 0.0f);
    out.grad_b.assign(L.b.w.size(), 0.0f);
    for (i64 o = 0; o < L.out; ++o) {
        const float g = gy[o];
        out.grad_b[o] += g;
        for (i64 i = 0; i < L.in; ++i) {
            out.grad_W[o * L.in + i] += g * x[i];
            out.grad_x[i] += g * L.W.w[o * L.in + i];
        }
    }
    return out;
}

// Sinusoidal step embedding: [sin(t*w_0..), cos(t*w_0..)] with
// w_i = 10000^(-2i/dim).  dim must be even.
inline std::vector<float> time_embedding(i64 t, i64 dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even");
    std::vector<float> e(static_cast<std::size_t>(dim));
    const i64 half = dim / 2;
    for (i64 i = 0; i < half; ++i) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
        e[i] = static_cast<float>(std::sin(t * w));
        e[half + i] = static_cast<float>(std::cos(t * w));
    }
    return e;
}

// =====================================================================
//  Chains: forward, cached forward, backward
// =====================================================================

inline Tensor5 layer_forward(const Layer& layer, const Tensor5& x) {
    if (const auto* cv = std::get_if<Conv3dLayer>(&layer)) return conv3d_forward(*cv, x);
    if (const auto* gn = std::get_if<GroupNormLayer>(&layer))
        return groupnorm_apply(*gn, x, groupnorm_stats(*gn, x));
    if (const auto* ac = std::get_if<ActivationLayer>(&layer)) return act_forward(*ac, x);
    if (std::get_if<UpsampleLayer>(&layer)) return upsample2_forward(x);
    return x;  // identity
}

// Monolithic execution: activations freed as the walk advances.
inline Tensor5 run_chain(const LayerChain& chain, const Tensor5& x) {
    Tensor5 cur = x;
    for (const Layer& l : chain.layers) cur = layer_forward(l, cur);
    return cur;
}

struct ChainCache {
    std::vector<Tensor5> acts;        // acts[i] = input of layer i; acts.back() = output
    std::vector<GroupStats> stats;    // per layer; empty entry unless groupnorm
};

inline ChainCache chain_forward_cached(const LayerChain& chain, const Tensor5& x) {
    ChainCache cc;
    cc.acts.push_back(x);
    cc.stats.resize(chain.layers.size());
    for (std::size_t i = 0; i < chain.layers.size(); ++i) {
        const Layer& l = chain.layers[i];
        if (const auto* gn = std::get_if<GroupNormLayer>(&l)) {
            cc.stats[i] = groupnorm_stats(*gn, cc.acts.back());
            cc.acts.push_back(groupnorm_apply(*gn, cc.acts.back(), cc.stats[i]));
        } else {
            cc.acts.push_back(layer_forward(l, cc.acts.back()));
        }
    }
    return cc;
}

// Returns grad w.r.t. the chain input.  Parameter grads accumulate into each
// layer's .g buffers unless accumulate_params is false (frozen chains).
inline Tensor5 chain_backward(LayerChain& chain, const ChainCache& cc, const Tensor5& grad_out,
                              bool accumulate_params = true) {
    Tensor5 g = grad_out;
    for (std::size_t ri = chain.layers.size(); ri-- > 0;) {
        Layer& l = chain.layers[ri];
        const Tensor5& x = cc.acts[ri];
        if (auto* cv = std::get_if<Conv3dLayer>(&l)) {
            ConvGrads cg = conv3d_backward(*cv, x, g);
            if (accumulate_params) {
                for (std::size_t i = 0; i < cg.grad_w.size(); ++i) cv->weight.g[i] += cg.grad_w[i];
                for (std::size_t i = 0; i < cg.grad_b.size(); ++i) cv->bias.g[i] += cg.grad_b[i];
            }
            g = std::move(cg.grad_x);
        } else if (auto* gn = std::get_if<GroupNormLayer>(&l)) {
            GroupNormGrads gg = groupnorm_backward(*gn, x, cc.stats[ri], g);
            if (accumulate_params) {
                for (std::size_t i = 0; i < gg.grad_gamma.size(); ++i)
                    gn->gamma.g[i] += gg.grad_gamma[i];
                for (std::size_t i = 0; i < gg.grad_beta.size(); ++i)
                    gn->beta.g[i] += gg.grad_beta[i];
            }
            g = std::move(gg.grad_x);
        } else if (const auto* ac = std::get_if<ActivationLayer>(&l)) {
            g = act_backward(*ac, x, g);
        } else if (std::get_if<UpsampleLayer>(&l)) {
            g = upsample2_backward(x, g);
        }
        // identity: grad passes through
    }
    return g;
}

inline void chain_params(LayerChain& chain, std::vector<ParamTensor*>& out) {
    for (Layer& l : chain.layers) {
        if (auto* cv = std::get_if<Conv3dLayer>(&l)) {
            out.push_back(&cv->weight);
            out.push_back(&cv->bias);
        } else if (auto* gn = std::get_if<GroupNormLayer>(&l)) {
            out.push_back(&gn->gamma);
            out.push_back(&gn->beta);
        }
    }
}

// Stable names for serialization: layer index within the chain, parameter
// role within the layer.  Parameterless layers still consume an index so
// names survive edits to activations.
inline void chain_named_params(LayerChain& chain, const std::string& prefix,
                               std::vector<std::pair<std::string, ParamTensor*>>& out) {
    for (std::size_t i = 0; i < chain.layers.size(); ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        if (auto* cv = std::get_if<Conv3dLayer>(&chain.layers[i])) {
            out.emplace_back(base + ".weight", &cv->weight);
            out.emplace_back(base + ".bias", &cv->bias);
        } else if (auto* gn = std::get_if<GroupNormLayer>(&chain.layers[i])) {
            out.emplace_back(base + ".gamma", &gn->gamma);
            out.emplace_back(base + ".beta", &gn->beta);
        }
    }
}

// =====================================================================
//  Initialisation
// =====================================================================

inline void init_conv(Conv3dLayer& L, Rng& rng, float gain = 1.0f) {
    const float fan_in = static_cast<float>(L.c_in * L.k[0] * L.k[1] * L.k[2]);
    const float std = gain * std::sqrt(2.0f / fan_in);
    for (auto& v : L.weight.w) v = std * rng.normal();
    std::fill(L.bias.w.begin(), L.bias.w.end(), 0.0f);
}

inline void init_linear(LinearLayer& L, Rng& rng, float gain = 1.0f) {
    const float std = gain * std::sqrt(1.0f / static_cast<float>(L.in));
    for (auto& v : L.W.w) v = std * rng.normal();
    std::fill(L.b.w.begin(), L.b.w.end(), 0.0f);
}

inline void init_chain(LayerChain& chain, Rng& rng) {
    for (Layer& l : chain.layers)
        if (auto* cv = std::get_if<Conv3dLayer>(&l)) init_conv(*cv, rng);
}

}  // namespace voxsyn
