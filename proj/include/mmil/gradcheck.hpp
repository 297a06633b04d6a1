#pragma once

// Central-finite-difference verification of reverse-mode gradients.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mmil/error.hpp"
#include "mmil/rng.hpp"
#include "mmil/tensor.hpp"

namespace mmil {

struct GradCheckOptions {
    double h = 1e-6;                 // step, scaled per coordinate by max(1, |theta|)
    std::size_t max_coords = 0;      // 0 = check every coordinate
    std::uint64_t sample_seed = 17;  // coordinate sampling when max_coords caps
};

// Max over sampled parameter coordinates of
//   |analytic - central| / max(1, |central|)
// where `central` is the two-sided finite difference of f. f must rebuild its
// graph from `params` on every call and must be deterministic; two plain
// forward passes are compared bit-for-bit to verify that.
inline double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                             GradCheckOptions opt = {}) {
    if (opt.h <= 0.0) throw ContractError("gradient_check: h must be positive");

    {
        TapePause pause;
        const double a = f().item();
        const double b = f().item();
        if (!(a == b)) {
            throw ContractError("gradient_check: f is not deterministic (" +
                                std::to_string(a) + " vs " + std::to_string(b) + ")");
        }
    }

    for (auto& p : params) p.zero_grad();
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
        for (auto& p : params) analytic.push_back(p.grad());
    }

    // Enumerate (param, coord) pairs, optionally subsampled.
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::size_t ci = 0; ci < params[pi].numel(); ++ci) coords.emplace_back(pi, ci);
    if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
        Rng rng(opt.sample_seed);
        auto keep = rng.sample_without_replacement(coords.size(), opt.max_coords);
        std::vector<std::pair<std::size_t, std::size_t>> sub;
        sub.reserve(keep.size());
        for (std::size_t i : keep) sub.push_back(coords[i]);
        coords.swap(sub);
    }

    TapePause pause;
    double max_rel = 0.0;
    for (const auto& [pi, ci] : coords) {
        double& theta = params[pi].values()[ci];
        const double saved = theta;
        const double step = opt.h * std::max(1.0, std::fabs(saved));
        theta = saved + step;
        const double up = f().item();
        theta = saved - step;
        const double down = f().item();
        theta = saved;
        const double central = (up - down) / (2.0 * step);
        const double rel = std::fabs(analytic[pi][ci] - central) / std::max(1.0, std::fabs(central));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace mmil
