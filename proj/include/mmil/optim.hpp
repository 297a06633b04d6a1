#pragma once

// Adam with coupled L2 weight decay (the decay term joins the gradient before
// the moment updates, classic Adam rather than AdamW).

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmil/error.hpp"
#include "mmil/tensor.hpp"

namespace mmil {

struct AdamConfig {
    double lr = 1e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg = {})
        : cfg_(cfg) {
        slots_.reserve(params.size());
        for (auto& [name, t] : params) {
            slots_.push_back({name, t, std::vector<double>(t.numel(), 0.0),
                              std::vector<double>(t.numel(), 0.0)});
        }
    }

    const AdamConfig& config() const { return cfg_; }
    std::size_t steps() const { return t_; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& slot : slots_) {
            std::vector<double>& vals = slot.param.values();
            const bool has_grad = slot.param.has_grad();
            const std::vector<double>* grad = has_grad ? &slot.param.grad() : nullptr;
            for (std::size_t i = 0; i < vals.size(); ++i) {
                double g = grad ? (*grad)[i] : 0.0;
                if (std::isnan(g)) {
                    throw TrainingError("adam: NaN gradient in parameter " + slot.name);
                }
                g += cfg_.weight_decay * vals[i];
                slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
                slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = slot.m[i] / bc1;
                const double vhat = slot.v[i] / bc2;
                vals[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& slot : slots_) slot.param.zero_grad();
    }

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
    };

    AdamConfig cfg_;
    std::vector<Slot> slots_;
    std::size_t t_ = 0;
};

}  // namespace mmil
