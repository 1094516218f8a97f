#pragma once

// Differentiable operations. Every op validates shapes, checks that its
// output is finite, and records a backward rule when a tape is active and any
// input requires a gradient.

#include "smb/tensor.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace smb::inline SMB_PRECISION::nn {

// [n,k] x [k,m] -> [n,m]
Tensor matmul(const Tensor& a, const Tensor& b);
// [n,m] -> [m,n]
Tensor transpose(const Tensor& a);
// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// [n,m] + [m] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& a, real s);
// tanh approximation
Tensor gelu(const Tensor& x);
// Per-row normalisation over the last dimension, eps = 1e-5, then gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

inline constexpr real kLayerNormEps = real(1e-5);

struct TokenSubstitute {
    std::int32_t id;
    Tensor vector; // [d]
};

// Rows of `table` ([V,d]) selected by ids; ids equal to substitute->id take
// substitute->vector instead.
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids,
                 const std::optional<TokenSubstitute>& substitute = std::nullopt);

// Rows [begin, begin+count) of a rank-2 tensor.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);

// Multi-head scaled dot-product self-attention over a packed [L, 3d] q|k|v
// projection; returns [L, d]. causal=true masks keys after the query.
Tensor self_attention(const Tensor& qkv, std::size_t heads, bool causal);

// Mean of -log softmax(logits[p])[targets[p]] over positions with mask[p] != 0.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                             std::span<const std::uint8_t> mask);

// (1/|rows|) * sum_{i in rows} ||pred_i - target_i||^2
Tensor masked_mse(const Tensor& pred, const Tensor& target, std::span<const std::size_t> rows);

// Throws NumericalError naming `what` if any value is NaN/Inf.
void ensure_finite(const Tensor& t, const char* what);

} // namespace smb::inline SMB_PRECISION::nn
