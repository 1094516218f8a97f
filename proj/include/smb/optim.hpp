#pragma once

#include "smb/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace smb::inline SMB_PRECISION::nn {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

// Linear warmup to `peak` over the first warmup_frac of `total` steps, then
// cosine decay to 0 at step == total.
double cosine_lr(std::size_t step, std::size_t total, double peak, double warmup_frac = 0.03);

struct AdamWOptions {
    double peak_lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double warmup_frac = 0.03;
    std::size_t total_steps = 1;
};

// Bias correction uses the per-parameter update count, so parameters that
// join training late (the JEPA predictor in a curriculum) start corrected.
struct Moments {
    std::vector<real> m;
    std::vector<real> v;
    std::uint64_t count = 0;
};

struct OptimizerState {
    AdamWOptions options;
    std::uint64_t step = 0;
    std::map<std::string, Moments> moments;
};

// True for parameters that take decoupled weight decay (matrices); vectors such
// as biases, norm gains and the mask token do not.
bool decays(const Tensor& param);

// One AdamW update with an explicit learning rate. Every param must carry a
// gradient; gradients are cleared afterwards. Weight decay multiplies the
// parameter by (1 - lr * weight_decay) before the moment update is applied.
void adamw_step(const ParamList& params, OptimizerState& state, double lr);

// Same, with lr = cosine_lr(step + 1, total_steps, peak_lr, warmup_frac).
double adamw_step(const ParamList& params, OptimizerState& state);

// Global L2 norm over all present gradients.
double grad_norm(const ParamList& params);

// Rescales gradients so that their global norm is at most max_norm; returns
// the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

} // namespace smb::inline SMB_PRECISION::nn
