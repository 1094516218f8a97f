#include "smb/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace smb::inline SMB_PRECISION::nn {

double cosine_lr(std::size_t step, std::size_t total, double peak, double warmup_frac) {
    if (total == 0) {
        throw std::invalid_argument("cosine_lr: total steps must be positive");
    }
    if (step > total) {
        throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " beyond total " +
                                    std::to_string(total));
    }
    const double warmup = warmup_frac * static_cast<double>(total);
    const double s = static_cast<double>(step);
    if (s < warmup) {
        return peak * s / warmup;
    }
    const double span = static_cast<double>(total) - warmup;
    if (span <= 0.0) {
        return peak;
    }
    const double progress = (s - warmup) / span;
    return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

bool decays(const Tensor& param) { return param.rank() >= 2; }

void adamw_step(const ParamList& params, OptimizerState& state, double lr) {
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) {
            throw std::logic_error("adamw_step: trainable parameter '" + p.name + "' has no gradient");
        }
    }
    state.step += 1;
    const auto& o = state.options;
    const real b1 = static_cast<real>(o.beta1);
    const real b2 = static_cast<real>(o.beta2);
    const real eps = static_cast<real>(o.eps);

    for (const auto& p : params) {
        Tensor t = p.tensor;
        auto data = t.data();
        auto grad = t.grad();
        auto& mom = state.moments[p.name];
        if (mom.m.size() != data.size()) {
            if (!mom.m.empty()) {
                throw std::logic_error("adamw_step: moment shape mismatch for '" + p.name + "'");
            }
            mom.m.assign(data.size(), real(0.0));
            mom.v.assign(data.size(), real(0.0));
            mom.count = 0;
        }
        mom.count += 1;
        const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(mom.count));
        const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(mom.count));
        const real step_size = static_cast<real>(lr / bc1);
        const real inv_sqrt_bc2 = static_cast<real>(1.0 / std::sqrt(bc2));
        const real shrink = decays(t) ? static_cast<real>(1.0 - lr * o.weight_decay) : real(1.0);
        for (std::size_t i = 0; i < data.size(); ++i) {
            const real g = grad[i];
            data[i] *= shrink;
            mom.m[i] = b1 * mom.m[i] + (real(1.0) - b1) * g;
            mom.v[i] = b2 * mom.v[i] + (real(1.0) - b2) * g * g;
            const real denom = std::sqrt(mom.v[i]) * inv_sqrt_bc2 + eps;
            data[i] -= step_size * mom.m[i] / denom;
        }
        t.zero_grad();
    }
}

double adamw_step(const ParamList& params, OptimizerState& state) {
    const auto& o = state.options;
    const double lr = cosine_lr(std::min<std::size_t>(state.step + 1, o.total_steps), o.total_steps,
                                o.peak_lr, o.warmup_frac);
    adamw_step(params, state, lr);
    return lr;
}

double grad_norm(const ParamList& params) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (real g : p.tensor.grad()) {
            sq += static_cast<double>(g) * g;
        }
    }
    return std::sqrt(sq);
}

double clip_grad_norm(const ParamList& params, double max_norm) {
    const double norm = grad_norm(params);
    if (max_norm > 0.0 && norm > max_norm) {
        const real s = static_cast<real>(max_norm / (norm + 1e-12));
        for (const auto& p : params) {
            Tensor t = p.tensor;
            if (t.has_grad()) {
                for (real& g : t.mutable_grad()) {
                    g *= s;
                }
            }
        }
    }
    return norm;
}

} // namespace smb::inline SMB_PRECISION::nn
