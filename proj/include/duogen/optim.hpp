// SPDX-License-Identifier: Apache-2.0
//
// AdamW with warmup + cosine decay. Frozen parameters (requires_grad=false)
// are skipped entirely so their bytes never move.

#pragma once

#include <cmath>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/nn.hpp"
#include "duogen/tensor.hpp"

namespace duogen {

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 0;
    int total_steps = 0;  // 0 disables cosine decay (constant lr after warmup)
};

inline OptimConfig make_optim_config(double lr, int total_steps, double warmup_ratio = 0.03) {
    OptimConfig cfg;
    cfg.lr = lr;
    cfg.total_steps = total_steps;
    cfg.warmup_steps = int(std::ceil(warmup_ratio * total_steps));
    return cfg;
}

struct AdamW {
    OptimConfig cfg;
    std::vector<Tensor> params;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    int64_t step_count = 0;

    AdamW() = default;
    AdamW(ParamList& plist, OptimConfig cfg_) : cfg(cfg_) {
        for (auto& p : plist) params.push_back(p.tensor);
        m.resize(params.size());
        v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].numel(), 0.0);
            v[i].assign(params[i].numel(), 0.0);
        }
    }

    double lr_at(int64_t step) const {
        double base = cfg.lr;
        if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) return base * double(step + 1) / double(cfg.warmup_steps);
        if (cfg.total_steps > cfg.warmup_steps) {
            double progress = double(step - cfg.warmup_steps) / double(cfg.total_steps - cfg.warmup_steps);
            progress = std::min(1.0, std::max(0.0, progress));
            return base * 0.5 * (1.0 + std::cos(M_PI * progress));
        }
        return base;
    }

    void zero_grad() {
        for (auto& p : params) p.zero_grad();
    }

    void step() {
        double lr = lr_at(step_count);
        ++step_count;
        double bc1 = 1.0 - std::pow(cfg.beta1, double(step_count));
        double bc2 = 1.0 - std::pow(cfg.beta2, double(step_count));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (!p.requires_grad()) continue;
            auto& node = *p.node();
            if (node.grad.size() != node.data.size()) continue;
            for (size_t j = 0; j < node.data.size(); ++j) {
                double g = node.grad[j];
                m[i][j] = cfg.beta1 * m[i][j] + (1.0 - cfg.beta1) * g;
                v[i][j] = cfg.beta2 * v[i][j] + (1.0 - cfg.beta2) * g * g;
                double mhat = m[i][j] / bc1;
                double vhat = v[i][j] / bc2;
                node.data[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * node.data[j]);
            }
        }
    }
};

}  // namespace duogen
