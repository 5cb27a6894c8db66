// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "duogen/tensor.hpp"

namespace duogen {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    size_t checked = 0;
    std::string worst;  // "param[i]" of the worst element
    bool ok(double tol) const { return max_rel_err <= tol; }
};

// f must rebuild its graph from the given parameters on every call and return
// a scalar loss. Central differences with step h on every element of every
// parameter; relative error uses max(|analytic|, |numeric|, floor) in the
// denominator so tiny gradients compare in absolute terms.
template <typename S>
GradCheckResult grad_check(const std::function<TensorT<S>()>& f, std::vector<TensorT<S>> params,
                           double h = 1e-5, double denom_floor = 1e-8) {
    GradCheckResult res;
    for (auto& p : params) p.zero_grad();
    auto loss = f();
    loss.backward();
    std::vector<std::vector<S>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.grad());

    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (size_t i = 0; i < p.numel(); ++i) {
            S orig = p.at(i);
            p.at(i) = orig + static_cast<S>(h);
            double up;
            {
                NoGradGuard ng;
                up = double(f().item());
            }
            p.at(i) = orig - static_cast<S>(h);
            double down;
            {
                NoGradGuard ng;
                down = double(f().item());
            }
            p.at(i) = orig;
            double numeric = (up - down) / (2.0 * h);
            double a = double(analytic[pi][i]);
            double abs_err = std::fabs(a - numeric);
            double rel = abs_err / std::max({std::fabs(a), std::fabs(numeric), denom_floor});
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = "param" + std::to_string(pi) + "[" + std::to_string(i) + "]";
            }
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            ++res.checked;
        }
    }
    return res;
}

}  // namespace duogen
