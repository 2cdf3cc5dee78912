#pragma once
// optim.hpp
//
// Adam with bias correction over a registered parameter list, plus the
// polynomial learning-rate decay used by the training loops:
//   lr(step) = base * (1 - step/total)^power,  clamped to 0 past total.
// The factor is evaluated at the pre-update step count, so the first call
// runs at full base rate and a state stepped `total` times has hit zero.

#include <cmath>
#include <vector>

#include "nn.hpp"

namespace voxsyn {

struct AdamConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    i64 total_steps = 0;  // 0 = constant lr
    float power = 1.0f;
};

struct AdamState {
    std::vector<ParamTensor*> params;
    std::vector<std::vector<float>> m, v;
    i64 step = 0;
    AdamConfig cfg;
};

inline AdamState make_adam(std::vector<ParamTensor*> params, AdamConfig cfg) {
    AdamState st;
    st.params = std::move(params);
    st.cfg = cfg;
    for (ParamTensor* p : st.params) {
        st.m.emplace_back(p->w.size(), 0.0f);
        st.v.emplace_back(p->w.size(), 0.0f);
    }
    return st;
}

inline float scheduled_lr(const AdamConfig& cfg, i64 step) {
    if (cfg.total_steps <= 0) return cfg.lr;
    const double f = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps);
    if (f <= 0.0) return 0.0f;
    return static_cast<float>(cfg.lr * std::pow(f, cfg.power));
}

inline void zero_grads(AdamState& st) {
    for (ParamTensor* p : st.params) p->zero_grad();
}

inline float adam_step(AdamState& st) {
    const float lr = scheduled_lr(st.cfg, st.step);
    st.step += 1;
    const double t = static_cast<double>(st.step);
    const float bc1 = 1.0f - static_cast<float>(std::pow(st.cfg.beta1, t));
    const float bc2 = 1.0f - static_cast<float>(std::pow(st.cfg.beta2, t));
    for (std::size_t pi = 0; pi < st.params.size(); ++pi) {
        ParamTensor& p = *st.params[pi];
        std::vector<float>& m = st.m[pi];
        std::vector<float>& v = st.v[pi];
        for (std::size_t i = 0; i < p.w.size(); ++i) {
            const float g = p.g[i];
            m[i] = st.cfg.beta1 * m[i] + (1.0f - st.cfg.beta1) * g;
            v[i] = st.cfg.beta2 * v[i] + (1.0f - st.cfg.beta2) * g * g;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            p.w[i] -= lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
        }
    }
    return lr;  // lr actually used, handy for loss logs
}

}  // namespace voxsyn
