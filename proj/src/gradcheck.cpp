#include "smb/gradcheck.hpp"

#include "smb/model.hpp"
#include "smb/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#if !defined(SMB_REAL_DOUBLE)
#error "gradcheck.cpp is compiled against the f64 numerics build"
#endif

namespace smb::gradcheck {

namespace {

using nn::Tensor;
using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

constexpr real kGeluC = 0.7978845608028654;
constexpr real kGeluA = 0.044715;

Tensor random_tensor(nn::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<real> v(nn::numel(shape));
    for (auto& x : v) {
        x = dist(rng);
    }
    return Tensor::from(std::move(shape), std::move(v), true);
}

// Sum of w * y accumulated in long double; the probe that turns any output
// into a scalar with a non-trivial gradient.
long double probe_value(const Tensor& y, const std::vector<real>& w) {
    long double s = 0.0L;
    auto d = y.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        s += static_cast<long double>(w[i]) * d[i];
    }
    return s;
}

Tensor probe_loss(const Tensor& y, const std::vector<real>& w) {
    auto out = nn::Tensor::from({1}, {static_cast<real>(probe_value(y, w))});
    nn::TensorNode* yn = y.node();
    nn::TensorNode* on = out.node();
    on->requires_grad = true;
    on->leaf = false;
    nn::Tape::Entry e;
    e.output = out.shared();
    e.inputs = {y.shared()};
    e.backward = [yn, on, w] {
        auto& g = nn::pass_grad(yn);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += on->pass_grad[0] * w[i];
        }
    };
    nn::active_tape()->record(std::move(e));
    return out;
}

// GELU whose backward drops the cubic term of the inner derivative.
Tensor broken_gelu(const Tensor& x) {
    std::vector<real> v(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const real z = xd[i];
        v[i] = real(0.5) * z * (real(1.0) + std::tanh(kGeluC * (z + kGeluA * z * z * z)));
    }
    Tensor out = Tensor::from(x.shape(), std::move(v));
    if (nn::active_tape() && x.requires_grad()) {
        nn::TensorNode* xn = x.node();
        nn::TensorNode* on = out.node();
        on->requires_grad = true;
        on->leaf = false;
        nn::Tape::Entry e;
        e.output = out.shared();
        e.inputs = {x.shared()};
        e.backward = [xn, on] {
            auto& g = nn::pass_grad(xn);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const real z = xn->data[i];
                const real t = std::tanh(kGeluC * (z + kGeluA * z * z * z));
                const real dt = (real(1.0) - t * t) * kGeluC;
                g[i] += on->pass_grad[i] * (real(0.5) * (real(1.0) + t) + real(0.5) * z * dt);
            }
        };
        nn::active_tape()->record(std::move(e));
    }
    return out;
}

class Checker {
public:
    Checker(const Options& opt) : opt_(opt), rng_(opt.seed) {}

    void check(const std::string& name, bool composition, std::vector<Tensor> inputs, const Fn& fn) {
        std::vector<real> w;
        {
            nn::NoGradScope off;
            const Tensor y0 = fn(inputs);
            std::normal_distribution<double> dist(0.0, 1.0);
            w.resize(y0.numel());
            for (auto& x : w) {
                x = dist(rng_);
            }
        }
        for (auto& t : inputs) {
            t.zero_grad();
        }
        {
            nn::Tape tape;
            nn::TapeScope scope(tape);
            const Tensor y = fn(inputs);
            tape.backward(probe_loss(y, w));
        }

        std::size_t total = 0;
        for (const auto& t : inputs) {
            total += t.requires_grad() ? t.numel() : 0;
        }
        std::uniform_int_distribution<std::size_t> pick(0, total - 1);
        std::vector<double> analytic, numeric;
        for (std::size_t p = 0; p < opt_.points; ++p) {
            std::size_t flat = pick(rng_);
            std::size_t which = 0;
            while (!inputs[which].requires_grad() || flat >= inputs[which].numel()) {
                flat -= inputs[which].requires_grad() ? inputs[which].numel() : 0;
                ++which;
            }
            Tensor& t = inputs[which];
            analytic.push_back(t.has_grad() ? t.grad()[flat] : 0.0);

            nn::NoGradScope off;
            const real x = t.data()[flat];
            const real up = x + static_cast<real>(opt_.epsilon);
            const real down = x - static_cast<real>(opt_.epsilon);
            t.data()[flat] = up;
            const long double f_up = probe_value(fn(inputs), w);
            t.data()[flat] = down;
            const long double f_down = probe_value(fn(inputs), w);
            t.data()[flat] = x;
            numeric.push_back(static_cast<double>((f_up - f_down) / (static_cast<long double>(up) - down)));
        }

        double scale = 0.0;
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
        }
        const double floor = std::max(1e-2 * scale, 1e-12);
        double worst = 0.0;
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
            worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
        }
        const double tol = composition ? opt_.composition_tolerance : opt_.op_tolerance;
        results_.push_back({name, composition, analytic.size(), worst, tol, worst < tol});
    }

    std::mt19937_64& rng() { return rng_; }
    std::vector<OpResult> take() { return std::move(results_); }

private:
    Options opt_;
    std::mt19937_64 rng_;
    std::vector<OpResult> results_;
};

model::EncoderConfig tiny_encoder() {
    model::EncoderConfig cfg;
    cfg.vocab_size = 12;
    cfg.hidden = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.max_len = 10;
    cfg.ff_mult = 2;
    return cfg;
}

// Larger than the 0.02 init so that the attention and norm paths are far from
// their linear regime.
void scale_params(const nn::ParamList& params, std::mt19937_64& rng, double sd) {
    std::normal_distribution<double> dist(0.0, sd);
    for (const auto& p : params) {
        Tensor t = p.tensor;
        for (auto& x : t.data()) {
            x += static_cast<real>(dist(rng));
        }
    }
}

std::vector<Tensor> tensors_of(const nn::ParamList& params) {
    std::vector<Tensor> out;
    for (const auto& p : params) {
        out.push_back(p.tensor);
    }
    return out;
}

} // namespace

std::vector<OpResult> run(const Options& options) {
    using namespace nn;
    Checker c(options);
    auto& rng = c.rng();

    c.check("matmul", false, {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)},
            [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
    c.check("transpose", false, {random_tensor({3, 4}, rng)},
            [](const std::vector<Tensor>& in) { return transpose(in[0]); });
    c.check("add", false, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
            [](const std::vector<Tensor>& in) { return add(in[0], in[1]); });
    c.check("mul", false, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
            [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); });
    c.check("add_bias", false, {random_tensor({3, 4}, rng), random_tensor({4}, rng)},
            [](const std::vector<Tensor>& in) { return add_bias(in[0], in[1]); });
    c.check("scale", false, {random_tensor({3, 4}, rng)},
            [](const std::vector<Tensor>& in) { return scale(in[0], real(-1.7)); });
    c.check("gelu", false, {random_tensor({4, 5}, rng, 2.0)},
            [](const std::vector<Tensor>& in) { return gelu(in[0]); });
    c.check("layer_norm", false, {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
            [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); });

    const std::vector<std::int32_t> ids = {1, 4, 2, 4, 0, 2};
    c.check("embedding", false, {random_tensor({5, 4}, rng), random_tensor({4}, rng)},
            [ids](const std::vector<Tensor>& in) {
                return embedding(in[0], ids, TokenSubstitute{2, in[1]});
            });
    c.check("slice_rows", false, {random_tensor({6, 3}, rng)},
            [](const std::vector<Tensor>& in) { return slice_rows(in[0], 1, 4); });
    c.check("self_attention.causal", false, {random_tensor({5, 12}, rng)},
            [](const std::vector<Tensor>& in) { return self_attention(in[0], 2, true); });
    c.check("self_attention.bidirectional", false, {random_tensor({5, 12}, rng)},
            [](const std::vector<Tensor>& in) { return self_attention(in[0], 2, false); });

    const std::vector<std::int32_t> targets = {3, 0, 6, 2, 5};
    const std::vector<std::uint8_t> mask = {0, 1, 1, 0, 1};
    c.check("softmax_cross_entropy", false, {random_tensor({5, 7}, rng, 2.0)},
            [targets, mask](const std::vector<Tensor>& in) { return softmax_cross_entropy(in[0], targets, mask); });
    const std::vector<std::size_t> rows = {0, 2, 3};
    c.check("masked_mse", false, {random_tensor({5, 4}, rng), random_tensor({5, 4}, rng)},
            [rows](const std::vector<Tensor>& in) { return masked_mse(in[0], in[1], rows); });

    // Compositions.
    {
        model::BlockParams b = model::init_predictor(model::PredictorConfig{1, 8, 2, 2}, 8, rng).blocks.at(0);
        std::vector<Tensor> in = {random_tensor({5, 8}, rng), b.ln1_gain, b.ln1_bias, b.w_qkv, b.b_qkv, b.w_out,
                                  b.b_out, b.ln2_gain, b.ln2_bias, b.w_ff1, b.b_ff1, b.w_ff2, b.b_ff2};
        scale_params({{"", b.w_qkv}, {"", b.w_out}, {"", b.w_ff1}, {"", b.w_ff2}}, rng, 0.5);
        c.check("transformer_block", true, in, [](const std::vector<Tensor>& t) {
            model::BlockParams p{t[1], t[2], t[3], t[4], t[5], t[6], t[7], t[8], t[9], t[10], t[11], t[12]};
            return model::block_forward(p, t[0], 2, true);
        });
    }
    {
        const auto cfg = tiny_encoder();
        model::EncoderParams params = model::init_encoder(cfg, rng);
        const auto named = model::named_params(params, "encoder");
        scale_params(named, rng, 0.3);
        const std::vector<std::int32_t> seq = {1, 5, 7, 3, 9, 11, 4, 8};
        std::vector<std::int32_t> next(seq.size(), 0);
        std::vector<std::uint8_t> sup(seq.size(), 0);
        for (std::size_t p = 3; p + 1 < seq.size(); ++p) {
            next[p] = seq[p + 1];
            sup[p] = 1;
        }
        c.check("encoder_sft_loss", true, tensors_of(named), [cfg, params, seq, next, sup](const std::vector<Tensor>&) {
            auto out = model::encoder_forward(cfg, params, seq);
            return softmax_cross_entropy(out.logits, next, sup);
        });
    }
    {
        const auto cfg = tiny_encoder();
        model::ModelBundle bundle = model::ModelBundle::create(cfg, model::PredictorConfig{2, 4, 2, 2}, 2, rng());
        scale_params(bundle.online_params(), rng, 0.3);
        scale_params(bundle.jepa_params(), rng, 0.3);
        const std::vector<std::int32_t> seq = {1, 5, 7, 3, 9, 11, 4, 8};
        const std::vector<std::int32_t> masked = {1, 5, 7, 3, 2, 11, 2, 8};
        const std::vector<std::size_t> at = {4, 6};
        const Tensor target = model::momentum_forward(bundle, seq);
        std::vector<Tensor> in = tensors_of(bundle.online_params());
        for (const auto& p : bundle.jepa_params()) {
            in.push_back(p.tensor);
        }
        c.check("jepa_loss", true, in, [bundle, masked, at, target](const std::vector<Tensor>&) {
            auto h = model::encoder_forward(bundle.encoder_cfg, bundle.online, masked, bundle.mask_substitute(), false);
            auto pred = model::predictor_forward(bundle.predictor_cfg, bundle.predictor, h.hidden);
            return masked_mse(pred, target, at);
        });
    }

    if (options.inject_bug) {
        c.check("sentinel.broken_gelu", false, {random_tensor({4, 5}, rng, 2.0)},
                [](const std::vector<Tensor>& in) { return broken_gelu(in[0]); });
    }
    return c.take();
}

bool all_passed(const std::vector<OpResult>& results) {
    return std::all_of(results.begin(), results.end(), [](const OpResult& r) { return r.passed; });
}

} // namespace smb::gradcheck
