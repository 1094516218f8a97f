#pragma once

// Online causal encoder with tied LM head, the bottleneck predictor, the EMA
// momentum encoder, the learnable mask token, and continuation masking.

#include "smb/ehr.hpp"
#include "smb/ops.hpp"
#include "smb/optim.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace smb::inline SMB_PRECISION::model {

using nn::ParamList;
using nn::Tensor;

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t hidden = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t max_len = 256;
    std::size_t ff_mult = 4;

    void validate() const;
};

struct PredictorConfig {
    std::size_t depth = 2;
    std::size_t bottleneck = 64;
    std::size_t heads = 8;
    std::size_t ff_mult = 4;

    void validate() const;
};

// Pre-norm transformer block.
struct BlockParams {
    Tensor ln1_gain, ln1_bias;
    Tensor w_qkv, b_qkv;
    Tensor w_out, b_out;
    Tensor ln2_gain, ln2_bias;
    Tensor w_ff1, b_ff1;
    Tensor w_ff2, b_ff2;
};

struct EncoderParams {
    Tensor tok_emb; // [V, d], tied with the output head
    Tensor pos_emb; // [max_len, d]
    std::vector<BlockParams> blocks;
    Tensor lnf_gain, lnf_bias;
};

struct PredictorParams {
    Tensor w_down; // [d, d_b]
    std::vector<BlockParams> blocks;
    Tensor w_up; // [d_b, d]
    Tensor ln_gain, ln_bias;
};

ParamList named_params(const EncoderParams& p, const std::string& prefix);
ParamList named_params(const PredictorParams& p, const std::string& prefix);

EncoderParams init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng);
PredictorParams init_predictor(const PredictorConfig& cfg, std::size_t hidden, std::mt19937_64& rng);

// Deep copy with gradients disabled.
EncoderParams detached_copy(const EncoderParams& p);

Tensor block_forward(const BlockParams& b, const Tensor& x, std::size_t heads, bool causal);

struct EncoderOutput {
    Tensor hidden; // [len, d], final-layer states after the output norm
    Tensor logits; // [len, V]; undefined when not requested
};

// Causal encoder. When `mask` is given, ids equal to mask->id are embedded as
// mask->vector (the learnable mask token).
EncoderOutput encoder_forward(const EncoderConfig& cfg, const EncoderParams& params,
                              std::span<const std::int32_t> ids,
                              const std::optional<nn::TokenSubstitute>& mask = std::nullopt,
                              bool with_logits = true);

// LayerNorm(Transformer(H W_down) W_up) with bidirectional attention; one
// predicted row per input row.
Tensor predictor_forward(const PredictorConfig& cfg, const PredictorParams& params, const Tensor& h_tilde);

struct ModelBundle {
    EncoderConfig encoder_cfg;
    PredictorConfig predictor_cfg;
    EncoderParams online;
    EncoderParams momentum;
    PredictorParams predictor;
    Tensor mask_token; // [d]
    std::int32_t mask_id = -1;

    static ModelBundle create(const EncoderConfig& enc, const PredictorConfig& pred, std::int32_t mask_id,
                              std::uint64_t seed);

    ParamList online_params() const { return named_params(online, "encoder"); }
    ParamList momentum_params() const { return named_params(momentum, "momentum"); }
    // Predictor weights and the mask token.
    ParamList jepa_params() const;

    nn::TokenSubstitute mask_substitute() const { return {mask_id, mask_token}; }
};

// Final-layer hidden states of the momentum encoder on an unmasked sequence,
// computed with gradient recording disabled.
Tensor momentum_forward(const ModelBundle& bundle, std::span<const std::int32_t> ids);

// theta_bar <- tau * theta_bar + (1 - tau) * theta for every name-matched
// encoder parameter. Returns the number of parameter pairs updated.
std::size_t ema_update(const ParamList& momentum, const ParamList& online, real tau);

struct MaskedSequence {
    std::vector<std::int32_t> ids;
    std::vector<std::size_t> positions; // sorted, all in [n, n+m)
};

// round-half-up(ratio * m), at least 1.
std::size_t mask_count(std::size_t continuation_len, double ratio);

// Replaces a uniformly drawn subset of continuation positions with mask_id.
MaskedSequence apply_mask(const ehr::TokenSequence& seq, double ratio, std::int32_t mask_id,
                          std::mt19937_64& rng);

} // namespace smb::inline SMB_PRECISION::model
