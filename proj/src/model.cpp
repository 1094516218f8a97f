#include "smb/model.hpp"

#include "smb/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace smb::inline SMB_PRECISION::model {

using nn::Tensor;

namespace {

constexpr real kInitStd = real(0.02);

Tensor normal(nn::Shape shape, real stddev, std::mt19937_64& rng) {
    std::normal_distribution<real> dist(real(0.0), stddev);
    std::vector<real> v(nn::numel(shape));
    for (real& x : v) {
        x = dist(rng);
    }
    return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor filled(nn::Shape shape, real value) {
    std::vector<real> v(nn::numel(shape), value);
    return Tensor::from(std::move(shape), std::move(v), true);
}

BlockParams init_block(std::size_t width, std::size_t ff_mult, std::size_t residual_layers,
                       std::mt19937_64& rng) {
    const real proj_std = kInitStd / std::sqrt(real(2.0) * static_cast<real>(residual_layers));
    BlockParams b;
    b.ln1_gain = filled({width}, real(1.0));
    b.ln1_bias = filled({width}, real(0.0));
    b.w_qkv = normal({width, 3 * width}, kInitStd, rng);
    b.b_qkv = filled({3 * width}, real(0.0));
    b.w_out = normal({width, width}, proj_std, rng);
    b.b_out = filled({width}, real(0.0));
    b.ln2_gain = filled({width}, real(1.0));
    b.ln2_bias = filled({width}, real(0.0));
    b.w_ff1 = normal({width, ff_mult * width}, kInitStd, rng);
    b.b_ff1 = filled({ff_mult * width}, real(0.0));
    b.w_ff2 = normal({ff_mult * width, width}, proj_std, rng);
    b.b_ff2 = filled({width}, real(0.0));
    return b;
}

void append_block(ParamList& out, const BlockParams& b, const std::string& prefix) {
    out.push_back({prefix + ".ln1.gain", b.ln1_gain});
    out.push_back({prefix + ".ln1.bias", b.ln1_bias});
    out.push_back({prefix + ".attn.w_qkv", b.w_qkv});
    out.push_back({prefix + ".attn.b_qkv", b.b_qkv});
    out.push_back({prefix + ".attn.w_out", b.w_out});
    out.push_back({prefix + ".attn.b_out", b.b_out});
    out.push_back({prefix + ".ln2.gain", b.ln2_gain});
    out.push_back({prefix + ".ln2.bias", b.ln2_bias});
    out.push_back({prefix + ".mlp.w_in", b.w_ff1});
    out.push_back({prefix + ".mlp.b_in", b.b_ff1});
    out.push_back({prefix + ".mlp.w_out", b.w_ff2});
    out.push_back({prefix + ".mlp.b_out", b.b_ff2});
}

Tensor detach(const Tensor& t) {
    Tensor c = t.clone();
    c.set_requires_grad(false);
    return c;
}

BlockParams detach_block(const BlockParams& b) {
    return {detach(b.ln1_gain), detach(b.ln1_bias), detach(b.w_qkv), detach(b.b_qkv),
            detach(b.w_out),    detach(b.b_out),    detach(b.ln2_gain), detach(b.ln2_bias),
            detach(b.w_ff1),    detach(b.b_ff1),    detach(b.w_ff2),  detach(b.b_ff2)};
}

std::string suffix(const std::string& name) {
    const auto dot = name.find('.');
    return dot == std::string::npos ? name : name.substr(dot);
}

} // namespace

void EncoderConfig::validate() const {
    if (vocab_size == 0 || hidden == 0 || layers == 0 || heads == 0 || max_len == 0 || ff_mult == 0) {
        throw UsageError("encoder config: all sizes must be positive");
    }
    if (hidden % heads != 0) {
        throw UsageError("encoder config: hidden " + std::to_string(hidden) + " not divisible by heads " +
                         std::to_string(heads));
    }
}

void PredictorConfig::validate() const {
    if (depth < 1 || bottleneck < 1 || heads < 1 || ff_mult < 1) {
        throw UsageError("predictor config: depth, bottleneck, heads and ff_mult must be >= 1");
    }
    if (bottleneck % heads != 0) {
        throw UsageError("predictor config: bottleneck " + std::to_string(bottleneck) +
                         " not divisible by heads " + std::to_string(heads));
    }
}

ParamList named_params(const EncoderParams& p, const std::string& prefix) {
    ParamList out;
    out.push_back({prefix + ".tok_emb", p.tok_emb});
    out.push_back({prefix + ".pos_emb", p.pos_emb});
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        append_block(out, p.blocks[i], prefix + ".blocks." + std::to_string(i));
    }
    out.push_back({prefix + ".ln_f.gain", p.lnf_gain});
    out.push_back({prefix + ".ln_f.bias", p.lnf_bias});
    return out;
}

ParamList named_params(const PredictorParams& p, const std::string& prefix) {
    ParamList out;
    out.push_back({prefix + ".w_down", p.w_down});
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        append_block(out, p.blocks[i], prefix + ".blocks." + std::to_string(i));
    }
    out.push_back({prefix + ".w_up", p.w_up});
    out.push_back({prefix + ".ln.gain", p.ln_gain});
    out.push_back({prefix + ".ln.bias", p.ln_bias});
    return out;
}

EncoderParams init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    EncoderParams p;
    p.tok_emb = normal({cfg.vocab_size, cfg.hidden}, kInitStd, rng);
    p.pos_emb = normal({cfg.max_len, cfg.hidden}, kInitStd, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        p.blocks.push_back(init_block(cfg.hidden, cfg.ff_mult, cfg.layers, rng));
    }
    p.lnf_gain = filled({cfg.hidden}, real(1.0));
    p.lnf_bias = filled({cfg.hidden}, real(0.0));
    return p;
}

PredictorParams init_predictor(const PredictorConfig& cfg, std::size_t hidden, std::mt19937_64& rng) {
    cfg.validate();
    PredictorParams p;
    p.w_down = normal({hidden, cfg.bottleneck}, kInitStd, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        p.blocks.push_back(init_block(cfg.bottleneck, cfg.ff_mult, cfg.depth, rng));
    }
    p.w_up = normal({cfg.bottleneck, hidden}, kInitStd, rng);
    p.ln_gain = filled({hidden}, real(1.0));
    p.ln_bias = filled({hidden}, real(0.0));
    return p;
}

EncoderParams detached_copy(const EncoderParams& p) {
    EncoderParams c;
    c.tok_emb = detach(p.tok_emb);
    c.pos_emb = detach(p.pos_emb);
    for (const auto& b : p.blocks) {
        c.blocks.push_back(detach_block(b));
    }
    c.lnf_gain = detach(p.lnf_gain);
    c.lnf_bias = detach(p.lnf_bias);
    return c;
}

Tensor block_forward(const BlockParams& b, const Tensor& x, std::size_t heads, bool causal) {
    using namespace nn;
    Tensor h = layer_norm(x, b.ln1_gain, b.ln1_bias);
    Tensor qkv = add_bias(matmul(h, b.w_qkv), b.b_qkv);
    Tensor attn = self_attention(qkv, heads, causal);
    Tensor y = add(x, add_bias(matmul(attn, b.w_out), b.b_out));
    Tensor h2 = layer_norm(y, b.ln2_gain, b.ln2_bias);
    Tensor ff = gelu(add_bias(matmul(h2, b.w_ff1), b.b_ff1));
    return add(y, add_bias(matmul(ff, b.w_ff2), b.b_ff2));
}

EncoderOutput encoder_forward(const EncoderConfig& cfg, const EncoderParams& params,
                              std::span<const std::int32_t> ids, const std::optional<nn::TokenSubstitute>& mask,
                              bool with_logits) {
    using namespace nn;
    if (ids.empty()) {
        throw std::invalid_argument("encoder_forward: empty sequence");
    }
    if (ids.size() > cfg.max_len) {
        throw std::invalid_argument("encoder_forward: sequence of " + std::to_string(ids.size()) +
                                    " tokens exceeds max length " + std::to_string(cfg.max_len));
    }
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw std::out_of_range("encoder_forward: token id " + std::to_string(id) +
                                    " outside vocabulary of size " + std::to_string(cfg.vocab_size));
        }
    }
    Tensor x = add(embedding(params.tok_emb, ids, mask), slice_rows(params.pos_emb, 0, ids.size()));
    for (const auto& b : params.blocks) {
        x = block_forward(b, x, cfg.heads, true);
    }
    EncoderOutput out;
    out.hidden = layer_norm(x, params.lnf_gain, params.lnf_bias);
    if (with_logits) {
        out.logits = matmul(out.hidden, transpose(params.tok_emb));
    }
    return out;
}

Tensor predictor_forward(const PredictorConfig& cfg, const PredictorParams& params, const Tensor& h_tilde) {
    using namespace nn;
    if (params.w_down.rank() != 2 || params.w_down.dim(1) != cfg.bottleneck ||
        params.w_up.dim(0) != cfg.bottleneck || params.blocks.size() != cfg.depth) {
        throw std::invalid_argument("predictor_forward: weights " + shape_str(params.w_down.shape()) + " / " +
                                    shape_str(params.w_up.shape()) + " do not match bottleneck " +
                                    std::to_string(cfg.bottleneck));
    }
    Tensor x = matmul(h_tilde, params.w_down);
    for (const auto& b : params.blocks) {
        x = block_forward(b, x, cfg.heads, false);
    }
    return layer_norm(matmul(x, params.w_up), params.ln_gain, params.ln_bias);
}

ModelBundle ModelBundle::create(const EncoderConfig& enc, const PredictorConfig& pred, std::int32_t mask_id,
                                std::uint64_t seed) {
    enc.validate();
    pred.validate();
    if (mask_id < 0 || static_cast<std::size_t>(mask_id) >= enc.vocab_size) {
        throw std::invalid_argument("ModelBundle: mask id outside vocabulary");
    }
    std::mt19937_64 rng(seed);
    ModelBundle b;
    b.encoder_cfg = enc;
    b.predictor_cfg = pred;
    b.online = init_encoder(enc, rng);
    b.momentum = detached_copy(b.online);
    b.predictor = init_predictor(pred, enc.hidden, rng);
    b.mask_token = normal({enc.hidden}, kInitStd, rng);
    b.mask_id = mask_id;
    return b;
}

ParamList ModelBundle::jepa_params() const {
    ParamList out = named_params(predictor, "predictor");
    out.push_back({"mask_token", mask_token});
    return out;
}

Tensor momentum_forward(const ModelBundle& bundle, std::span<const std::int32_t> ids) {
    nn::NoGradScope no_grad;
    return encoder_forward(bundle.encoder_cfg, bundle.momentum, ids, std::nullopt, false).hidden;
}

std::size_t ema_update(const ParamList& momentum, const ParamList& online, real tau) {
    if (momentum.size() != online.size()) {
        throw std::invalid_argument("ema_update: " + std::to_string(momentum.size()) + " momentum vs " +
                                    std::to_string(online.size()) + " online parameters");
    }
    const real keep = tau;
    const real take = real(1.0) - tau;
    for (std::size_t i = 0; i < momentum.size(); ++i) {
        const auto& mb = momentum[i];
        const auto& on = online[i];
        if (suffix(mb.name) != suffix(on.name) || mb.tensor.shape() != on.tensor.shape()) {
            throw std::invalid_argument("ema_update: mismatch between '" + mb.name + "' " +
                                        nn::shape_str(mb.tensor.shape()) + " and '" + on.name + "' " +
                                        nn::shape_str(on.tensor.shape()));
        }
        Tensor target = mb.tensor;
        auto dst = target.data();
        auto src = on.tensor.data();
        for (std::size_t k = 0; k < dst.size(); ++k) {
            dst[k] = keep * dst[k] + take * src[k];
        }
    }
    return momentum.size();
}

std::size_t mask_count(std::size_t continuation_len, double ratio) {
    const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(continuation_len) + 0.5));
    return std::clamp<std::size_t>(k, 1, continuation_len);
}

MaskedSequence apply_mask(const ehr::TokenSequence& seq, double ratio, std::int32_t mask_id,
                          std::mt19937_64& rng) {
    const std::size_t m = seq.continuation_length();
    if (m == 0) {
        throw std::invalid_argument("no continuation to mask");
    }
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw std::invalid_argument("apply_mask: ratio must be in (0, 1]");
    }
    const std::size_t k = mask_count(m, ratio);
    std::vector<std::size_t> pool(m);
    std::iota(pool.begin(), pool.end(), seq.split);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, m - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    MaskedSequence out;
    out.positions.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.positions.begin(), out.positions.end());
    out.ids = seq.ids;
    for (std::size_t p : out.positions) {
        out.ids[p] = mask_id;
    }
    return out;
}

} // namespace smb::inline SMB_PRECISION::model
