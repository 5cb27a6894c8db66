// SPDX-License-Identifier: Apache-2.0
//
// DDPM machinery: linear beta schedule, forward corruption, ancestral
// reverse steps and classifier-free guidance. Arrays are 1-indexed by
// timestep with a t=0 sentinel meaning "clean data".

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/rng.hpp"
#include "duogen/tensor.hpp"

namespace duogen {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[0] = 0 sentinel
    std::vector<double> alpha;      // alpha[0] = 1
    std::vector<double> alpha_bar;  // alpha_bar[0] = 1
    std::vector<double> sigma;      // sigma[t] = sqrt(beta[t]), sigma[0] = 0
};

enum class UncondMode { null_token, max_noise_condition };

struct GuidanceConfig {
    double scale = 2.0;
    UncondMode uncond_mode = UncondMode::max_noise_condition;
};

inline UncondMode parse_uncond_mode(const std::string& s) {
    if (s == "null-token") return UncondMode::null_token;
    if (s == "max-noise-condition") return UncondMode::max_noise_condition;
    throw ConfigError("unknown uncond_mode '" + s + "' (expected null-token or max-noise-condition)");
}

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("schedule needs T >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1, got [" + std::to_string(beta_start) +
                          ", " + std::to_string(beta_end) + "]");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(static_cast<size_t>(T) + 1, 0.0);
    s.alpha.assign(static_cast<size_t>(T) + 1, 1.0);
    s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
    s.sigma.assign(static_cast<size_t>(T) + 1, 0.0);
    for (int t = 1; t <= T; ++t) {
        double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
        s.beta[t] = beta_start + frac * (beta_end - beta_start);
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
        s.sigma[t] = std::sqrt(s.beta[t]);
    }
    return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. t=0 returns x0 exactly.
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.T)
        throw ConfigError("q_sample: t=" + std::to_string(t) + " outside [0, " + std::to_string(sched.T) + "]");
    if (x0.shape() != eps.shape())
        throw ShapeError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
    if (t == 0) return x0;
    double ab = sched.alpha_bar[static_cast<size_t>(t)];
    return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

// eps_hat = eps_uncond + s (eps_cond - eps_uncond)
inline Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s) {
    if (eps_uncond.shape() != eps_cond.shape())
        throw ShapeError("cfg_combine: " + shape_str(eps_uncond.shape()) + " vs " + shape_str(eps_cond.shape()));
    return add(eps_uncond, scale(sub(eps_cond, eps_uncond), s));
}

// One reverse step: mu = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t),
// x_{t-1} = mu + sigma_t z.
inline Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                        const Tensor& z) {
    if (t < 1 || t > sched.T)
        throw ConfigError("ddpm_step: t=" + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
    if (x_t.shape() != eps_hat.shape() || x_t.shape() != z.shape())
        throw ShapeError("ddpm_step: shape mismatch between x_t " + shape_str(x_t.shape()) + ", eps_hat " +
                         shape_str(eps_hat.shape()) + ", z " + shape_str(z.shape()));
    size_t ti = static_cast<size_t>(t);
    double coef = sched.beta[ti] / std::sqrt(1.0 - sched.alpha_bar[ti]);
    auto mu = scale(sub(x_t, scale(eps_hat, coef)), 1.0 / std::sqrt(sched.alpha[ti]));
    return add(mu, scale(z, sched.sigma[ti]));
}

// Denoiser callable: (x_t, t, condition or null, condition timestep) -> eps_hat.
using DenoiseFn = std::function<Tensor(const Tensor&, int, const Tensor*, int)>;

namespace detail {

inline Tensor randn_like_shape(const std::vector<int>& shape, Rng& rng) {
    return Tensor::from_data(shape, rng.normal_vec(shape_numel(shape)));
}

}  // namespace detail

// Ancestral sampling from pure noise down to x0 space. With a condition and
// guidance scale != 1 the denoiser runs twice per step and the two branches
// combine per cfg_combine; the unconditional branch follows guide.uncond_mode.
inline Tensor sample_loop(const DenoiseFn& denoiser, const std::vector<int>& shape, const Tensor* condition,
                          const NoiseSchedule& sched, const GuidanceConfig& guide, uint64_t seed) {
    NoGradGuard ng;
    Rng rng(seed);
    Rng init_rng = rng.fork("init");
    Rng z_rng = rng.fork("step-noise");
    Rng uncond_rng = rng.fork("uncond-condition");

    Tensor x = detail::randn_like_shape(shape, init_rng);

    Tensor uncond_input;  // reused across all steps
    bool use_guidance = condition != nullptr && guide.scale != 1.0;
    if (use_guidance) {
        if (guide.uncond_mode == UncondMode::null_token) {
            uncond_input = Tensor::zeros(condition->shape());
        } else {
            auto cond_eps = detail::randn_like_shape(condition->shape(), uncond_rng);
            uncond_input = q_sample(*condition, sched.T, cond_eps, sched);
        }
    }

    for (int t = sched.T; t >= 1; --t) {
        Tensor eps_hat;
        if (condition == nullptr) {
            eps_hat = denoiser(x, t, nullptr, 0);
        } else if (!use_guidance) {
            eps_hat = denoiser(x, t, condition, 0);
        } else {
            auto eps_cond = denoiser(x, t, condition, 0);
            auto eps_uncond = denoiser(x, t, &uncond_input, sched.T);
            eps_hat = cfg_combine(eps_uncond, eps_cond, guide.scale);
        }
        if (eps_hat.shape() != x.shape())
            throw ShapeError("sample_loop: denoiser returned " + shape_str(eps_hat.shape()) + " for input " +
                             shape_str(x.shape()));
        Tensor z = t > 1 ? detail::randn_like_shape(shape, z_rng) : Tensor::zeros(shape);
        x = ddpm_step(x, eps_hat, t, sched, z);
    }
    return x;
}

// Batched variant: samples B items in lockstep, sharing each timestep. The
// callable sees all per-sample states stacked along rows and must return the
// stacked noise predictions. Per-sample RNG streams are forked by index so a
// batch element's noise draws depend only on (seed, index).
using BatchDenoiseFn =
    std::function<Tensor(const Tensor&, int, const std::vector<const Tensor*>&, int)>;

inline std::vector<Tensor> sample_loop_batch(const BatchDenoiseFn& denoiser, const std::vector<int>& shape,
                                             const std::vector<const Tensor*>& conditions, int batch,
                                             const NoiseSchedule& sched, const GuidanceConfig& guide,
                                             uint64_t seed) {
    NoGradGuard ng;
    if (!conditions.empty() && static_cast<int>(conditions.size()) != batch)
        throw ShapeError("sample_loop_batch: condition count does not match batch");
    if (shape.size() != 2) throw ShapeError("sample_loop_batch: per-sample shape must be 2-D");
    const int rows = shape[0], cols = shape[1];

    std::vector<Rng> init_rngs, z_rngs, uncond_rngs;
    for (int b = 0; b < batch; ++b) {
        Rng r(splitmix64(seed ^ splitmix64(static_cast<uint64_t>(b) + 0x9e3779b97f4a7c15ull)));
        init_rngs.push_back(r.fork("init"));
        z_rngs.push_back(r.fork("step-noise"));
        uncond_rngs.push_back(r.fork("uncond-condition"));
    }

    std::vector<double> xdata;
    xdata.reserve(static_cast<size_t>(batch) * rows * cols);
    for (int b = 0; b < batch; ++b) {
        auto v = init_rngs[static_cast<size_t>(b)].normal_vec(static_cast<size_t>(rows) * cols);
        xdata.insert(xdata.end(), v.begin(), v.end());
    }
    Tensor x = Tensor::from_data({batch * rows, cols}, std::move(xdata));

    bool use_guidance = !conditions.empty() && guide.scale != 1.0;
    std::vector<Tensor> uncond_inputs(static_cast<size_t>(batch));
    std::vector<const Tensor*> uncond_ptrs(static_cast<size_t>(batch), nullptr);
    if (use_guidance) {
        for (int b = 0; b < batch; ++b) {
            const Tensor* c = conditions[static_cast<size_t>(b)];
            if (guide.uncond_mode == UncondMode::null_token) {
                uncond_inputs[static_cast<size_t>(b)] = Tensor::zeros(c->shape());
            } else {
                auto cond_eps = detail::randn_like_shape(c->shape(), uncond_rngs[static_cast<size_t>(b)]);
                uncond_inputs[static_cast<size_t>(b)] = q_sample(*c, sched.T, cond_eps, sched);
            }
            uncond_ptrs[static_cast<size_t>(b)] = &uncond_inputs[static_cast<size_t>(b)];
        }
    }

    std::vector<const Tensor*> no_conds;
    for (int t = sched.T; t >= 1; --t) {
        Tensor eps_hat;
        if (conditions.empty()) {
            eps_hat = denoiser(x, t, no_conds, 0);
        } else if (!use_guidance) {
            eps_hat = denoiser(x, t, conditions, 0);
        } else {
            auto eps_cond = denoiser(x, t, conditions, 0);
            auto eps_uncond = denoiser(x, t, uncond_ptrs, sched.T);
            eps_hat = cfg_combine(eps_uncond, eps_cond, guide.scale);
        }
        if (eps_hat.shape() != x.shape())
            throw ShapeError("sample_loop_batch: denoiser returned " + shape_str(eps_hat.shape()) +
                             " for input " + shape_str(x.shape()));
        std::vector<double> zdata;
        zdata.reserve(x.numel());
        for (int b = 0; b < batch; ++b) {
            if (t > 1) {
                auto v = z_rngs[static_cast<size_t>(b)].normal_vec(static_cast<size_t>(rows) * cols);
                zdata.insert(zdata.end(), v.begin(), v.end());
            } else {
                zdata.insert(zdata.end(), static_cast<size_t>(rows) * cols, 0.0);
            }
        }
        x = ddpm_step(x, eps_hat, t, sched, Tensor::from_data(x.shape(), std::move(zdata)));
    }

    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b) out.push_back(slice_rows(x, b * rows, (b + 1) * rows));
    return out;
}

}  // namespace duogen
