#pragma once

#include "quantlab/error.hpp"
#include "quantlab/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace quantlab {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First and second moment estimates for one parameter array.
struct AdamMoments {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;

    explicit AdamMoments(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update applied in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& state,
                      const AdamConfig& cfg) {
    if (grads.empty()) return; // parameter not on the loss path
    if (params.size() != grads.size() || state.m.size() != params.size()) {
        throw ShapeError("adam_step: parameter, gradient and state sizes differ");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

/// Adam over a fixed set of leaf tensors.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        state_.reserve(params_.size());
        for (const auto& p : params_) state_.emplace_back(p.size());
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            adam_step(params_[i].mutable_values(), params_[i].grad(), state_[i], cfg_);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<Tensor> params_;
    std::vector<AdamMoments> state_;
    AdamConfig cfg_;
};

} // namespace quantlab
