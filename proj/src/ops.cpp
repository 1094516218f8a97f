#include "smb/ops.hpp"

#include "smb/error.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace smb::inline SMB_PRECISION::nn {

namespace {

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (!active_tape()) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->requires_grad(); });
}

void record(Tensor& out, std::initializer_list<const Tensor*> inputs, std::function<void()> fn) {
    TensorNode* n = out.node();
    n->requires_grad = true;
    n->leaf = false;
    Tape::Entry e;
    e.output = out.shared();
    for (const Tensor* t : inputs) {
        e.inputs.push_back(t->shared());
    }
    e.backward = std::move(fn);
    active_tape()->record(std::move(e));
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                    shape_str(t.shape()));
    }
}

// c[n,m] += a[n,k] * b[k,m]
void gemm_acc(const real* a, const real* b, real* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        real* __restrict crow = c + i * m;
        const real* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const real av = arow[p];
            if (av == real(0.0)) {
                continue;
            }
            const real* __restrict brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c[k,m] += a[n,k]^T * b[n,m]
void gemm_tn_acc(const real* a, const real* b, real* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const real* arow = a + i * k;
        const real* __restrict brow = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const real av = arow[p];
            if (av == real(0.0)) {
                continue;
            }
            real* __restrict crow = c + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

std::vector<real> transposed(const real* a, std::size_t n, std::size_t m) {
    std::vector<real> t(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            t[j * n + i] = a[i * m + j];
        }
    }
    return t;
}

constexpr real kGeluC = real(0.7978845608028654); // sqrt(2/pi)
constexpr real kGeluA = real(0.044715);

} // namespace

void ensure_finite(const Tensor& t, const char* what) {
    for (real v : t.data()) {
        if (!std::isfinite(v)) {
            throw NumericalError(std::string(what) + ": non-finite value in output of shape " +
                                 shape_str(t.shape()));
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) {
        throw std::invalid_argument("matmul: inner dimensions differ: " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({n, m});
    gemm_acc(a.data().data(), b.data().data(), out.data().data(), n, k, m);
    ensure_finite(out, "matmul");
    if (wants_grad({&a, &b})) {
        TensorNode* an = a.node();
        TensorNode* bn = b.node();
        TensorNode* on = out.node();
        record(out, {&a, &b}, [an, bn, on, n, k, m] {
            const real* dc = on->pass_grad.data();
            if (an->requires_grad) {
                auto bt = transposed(bn->data.data(), k, m);
                gemm_acc(dc, bt.data(), pass_grad(an).data(), n, m, k);
            }
            if (bn->requires_grad) {
                gemm_tn_acc(an->data.data(), dc, pass_grad(bn).data(), n, k, m);
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t n = a.dim(0), m = a.dim(1);
    Tensor out = Tensor::from({m, n}, transposed(a.data().data(), n, m));
    if (wants_grad({&a})) {
        TensorNode* an = a.node();
        TensorNode* on = out.node();
        record(out, {&a}, [an, on, n, m] {
            auto& ga = pass_grad(an);
            const real* dc = on->pass_grad.data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    ga[i * m + j] += dc[j * n + i];
                }
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    std::vector<real> v(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = ad[i] + bd[i];
    }
    Tensor out = Tensor::from(a.shape(), std::move(v));
    ensure_finite(out, "add");
    if (wants_grad({&a, &b})) {
        TensorNode* an = a.node();
        TensorNode* bn = b.node();
        TensorNode* on = out.node();
        record(out, {&a, &b}, [an, bn, on] {
            for (TensorNode* x : {an, bn}) {
                if (x->requires_grad) {
                    auto& g = pass_grad(x);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] += on->pass_grad[i];
                    }
                }
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    std::vector<real> v(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = ad[i] * bd[i];
    }
    Tensor out = Tensor::from(a.shape(), std::move(v));
    ensure_finite(out, "mul");
    if (wants_grad({&a, &b})) {
        TensorNode* an = a.node();
        TensorNode* bn = b.node();
        TensorNode* on = out.node();
        record(out, {&a, &b}, [an, bn, on] {
            const auto& dc = on->pass_grad;
            if (an->requires_grad) {
                auto& g = pass_grad(an);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += dc[i] * bn->data[i];
                }
            }
            if (bn->requires_grad) {
                auto& g = pass_grad(bn);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += dc[i] * an->data[i];
                }
            }
        });
    }
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_rank2(x, "add_bias");
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (bias.numel() != m) {
        throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                                    shape_str(x.shape()));
    }
    std::vector<real> v(x.data().begin(), x.data().end());
    auto bd = bias.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            v[i * m + j] += bd[j];
        }
    }
    Tensor out = Tensor::from(x.shape(), std::move(v));
    ensure_finite(out, "add_bias");
    if (wants_grad({&x, &bias})) {
        TensorNode* xn = x.node();
        TensorNode* bn = bias.node();
        TensorNode* on = out.node();
        record(out, {&x, &bias}, [xn, bn, on, n, m] {
            const auto& dc = on->pass_grad;
            if (xn->requires_grad) {
                auto& g = pass_grad(xn);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += dc[i];
                }
            }
            if (bn->requires_grad) {
                auto& g = pass_grad(bn);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < m; ++j) {
                        g[j] += dc[i * m + j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, real s) {
    std::vector<real> v(a.numel());
    auto ad = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = ad[i] * s;
    }
    Tensor out = Tensor::from(a.shape(), std::move(v));
    ensure_finite(out, "scale");
    if (wants_grad({&a})) {
        TensorNode* an = a.node();
        TensorNode* on = out.node();
        record(out, {&a}, [an, on, s] {
            auto& g = pass_grad(an);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += on->pass_grad[i] * s;
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    std::vector<real> v(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const real z = xd[i];
        v[i] = real(0.5) * z * (real(1.0) + std::tanh(kGeluC * (z + kGeluA * z * z * z)));
    }
    Tensor out = Tensor::from(x.shape(), std::move(v));
    ensure_finite(out, "gelu");
    if (wants_grad({&x})) {
        TensorNode* xn = x.node();
        TensorNode* on = out.node();
        record(out, {&x}, [xn, on] {
            auto& g = pass_grad(xn);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const real z = xn->data[i];
                const real t = std::tanh(kGeluC * (z + kGeluA * z * z * z));
                const real dt = (real(1.0) - t * t) * kGeluC * (real(1.0) + real(3.0) * kGeluA * z * z);
                g[i] += on->pass_grad[i] * (real(0.5) * (real(1.0) + t) + real(0.5) * z * dt);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    require_rank2(x, "layer_norm");
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (m < 2) {
        throw std::invalid_argument("layer_norm: last dimension must be >= 2, got " +
                                    shape_str(x.shape()));
    }
    if (gain.numel() != m || bias.numel() != m) {
        throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                                    shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
    }
    std::vector<real> xhat(n * m);
    std::vector<real> rstd(n);
    std::vector<real> v(n * m);
    auto xd = x.data();
    auto gd = gain.data();
    auto bd = bias.data();
    for (std::size_t i = 0; i < n; ++i) {
        const real* row = xd.data() + i * m;
        double mean = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            mean += row[j];
        }
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(m);
        const double r = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[i] = static_cast<real>(r);
        for (std::size_t j = 0; j < m; ++j) {
            const real h = static_cast<real>((row[j] - mean) * r);
            xhat[i * m + j] = h;
            v[i * m + j] = h * gd[j] + bd[j];
        }
    }
    Tensor out = Tensor::from(x.shape(), std::move(v));
    ensure_finite(out, "layer_norm");
    if (wants_grad({&x, &gain, &bias})) {
        TensorNode* xn = x.node();
        TensorNode* gn = gain.node();
        TensorNode* bn = bias.node();
        TensorNode* on = out.node();
        record(out, {&x, &gain, &bias},
               [xn, gn, bn, on, n, m, xhat = std::move(xhat), rstd = std::move(rstd)] {
                   const auto& dy = on->pass_grad;
                   if (gn->requires_grad) {
                       auto& g = pass_grad(gn);
                       for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < m; ++j) {
                               g[j] += dy[i * m + j] * xhat[i * m + j];
                           }
                       }
                   }
                   if (bn->requires_grad) {
                       auto& g = pass_grad(bn);
                       for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < m; ++j) {
                               g[j] += dy[i * m + j];
                           }
                       }
                   }
                   if (xn->requires_grad) {
                       auto& g = pass_grad(xn);
                       const real* gd = gn->data.data();
                       for (std::size_t i = 0; i < n; ++i) {
                           double mean_dh = 0.0;
                           double mean_dh_h = 0.0;
                           for (std::size_t j = 0; j < m; ++j) {
                               const double dh = static_cast<double>(dy[i * m + j]) * gd[j];
                               mean_dh += dh;
                               mean_dh_h += dh * xhat[i * m + j];
                           }
                           mean_dh /= static_cast<double>(m);
                           mean_dh_h /= static_cast<double>(m);
                           for (std::size_t j = 0; j < m; ++j) {
                               const double dh = static_cast<double>(dy[i * m + j]) * gd[j];
                               g[i * m + j] += static_cast<real>(
                                   rstd[i] * (dh - mean_dh - xhat[i * m + j] * mean_dh_h));
                           }
                       }
                   }
               });
    }
    return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids,
                 const std::optional<TokenSubstitute>& substitute) {
    require_rank2(table, "embedding");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    if (substitute && substitute->vector.numel() != d) {
        throw std::invalid_argument("embedding: substitute vector " +
                                    shape_str(substitute->vector.shape()) + " does not match width " +
                                    std::to_string(d));
    }
    const std::size_t len = ids.size();
    std::vector<real> v(len * d);
    auto td = table.data();
    for (std::size_t p = 0; p < len; ++p) {
        const std::int32_t id = ids[p];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw std::out_of_range("embedding: token id " + std::to_string(id) +
                                    " outside vocabulary of size " + std::to_string(vocab));
        }
        const real* src = (substitute && id == substitute->id) ? substitute->vector.data().data()
                                                                 : td.data() + static_cast<std::size_t>(id) * d;
        std::copy(src, src + d, v.begin() + static_cast<std::ptrdiff_t>(p * d));
    }
    Tensor out = Tensor::from({len, d}, std::move(v));
    Tensor sub_vec = substitute ? substitute->vector : Tensor::zeros({d});
    if (wants_grad({&table, &sub_vec})) {
        TensorNode* tn = table.node();
        TensorNode* sn = substitute ? substitute->vector.node() : nullptr;
        const std::int32_t sub_id = substitute ? substitute->id : -1;
        TensorNode* on = out.node();
        std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
        record(out, {&table, &sub_vec}, [tn, sn, sub_id, on, d, id_copy = std::move(id_copy)] {
            const auto& dy = on->pass_grad;
            for (std::size_t p = 0; p < id_copy.size(); ++p) {
                real* dst = nullptr;
                if (sn && id_copy[p] == sub_id) {
                    if (sn->requires_grad) {
                        dst = pass_grad(sn).data();
                    }
                } else if (tn->requires_grad) {
                    dst = pass_grad(tn).data() + static_cast<std::size_t>(id_copy[p]) * d;
                }
                if (dst) {
                    for (std::size_t j = 0; j < d; ++j) {
                        dst[j] += dy[p * d + j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
    require_rank2(x, "slice_rows");
    const std::size_t m = x.dim(1);
    if (begin + count > x.dim(0)) {
        throw std::out_of_range("slice_rows: rows [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") outside " + shape_str(x.shape()));
    }
    auto xd = x.data();
    std::vector<real> v(xd.begin() + static_cast<std::ptrdiff_t>(begin * m),
                         xd.begin() + static_cast<std::ptrdiff_t>((begin + count) * m));
    Tensor out = Tensor::from({count, m}, std::move(v));
    if (wants_grad({&x})) {
        TensorNode* xn = x.node();
        TensorNode* on = out.node();
        record(out, {&x}, [xn, on, begin, m] {
            auto& g = pass_grad(xn);
            const auto& dy = on->pass_grad;
            for (std::size_t i = 0; i < dy.size(); ++i) {
                g[begin * m + i] += dy[i];
            }
        });
    }
    return out;
}

Tensor self_attention(const Tensor& qkv, std::size_t heads, bool causal) {
    require_rank2(qkv, "self_attention");
    const std::size_t len = qkv.dim(0);
    if (qkv.dim(1) % 3 != 0 || heads == 0 || (qkv.dim(1) / 3) % heads != 0) {
        throw std::invalid_argument("self_attention: width of " + shape_str(qkv.shape()) +
                                    " is not 3 x (heads=" + std::to_string(heads) + ") x head_dim");
    }
    const std::size_t d = qkv.dim(1) / 3;
    const std::size_t hd = d / heads;
    const std::size_t stride = 3 * d;
    const real sc = real(1.0) / std::sqrt(static_cast<real>(hd));
    const real* x = qkv.data().data();

    std::vector<real> probs(heads * len * len, real(0.0));
    std::vector<real> v(len * d, real(0.0));
    std::vector<double> scores(len);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t last = causal ? i : len - 1;
            const real* q = x + i * stride + qo;
            double mx = -1e300;
            for (std::size_t j = 0; j <= last; ++j) {
                const real* k = x + j * stride + ko;
                real s = real(0.0);
                for (std::size_t c = 0; c < hd; ++c) {
                    s += q[c] * k[c];
                }
                scores[j] = static_cast<double>(s) * sc;
                mx = std::max(mx, scores[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= last; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                sum += scores[j];
            }
            real* prow = probs.data() + (h * len + i) * len;
            real* orow = v.data() + i * d + h * hd;
            for (std::size_t j = 0; j <= last; ++j) {
                const real p = static_cast<real>(scores[j] / sum);
                prow[j] = p;
                const real* vv = x + j * stride + vo;
                for (std::size_t c = 0; c < hd; ++c) {
                    orow[c] += p * vv[c];
                }
            }
        }
    }
    Tensor out = Tensor::from({len, d}, std::move(v));
    ensure_finite(out, "self_attention");
    if (wants_grad({&qkv})) {
        TensorNode* in = qkv.node();
        TensorNode* on = out.node();
        record(out, {&qkv}, [in, on, len, d, hd, heads, stride, sc, causal, probs = std::move(probs)] {
            auto& g = pass_grad(in);
            const real* x = in->data.data();
            const real* dy = on->pass_grad.data();
            std::vector<real> dp(len);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t last = causal ? i : len - 1;
                    const real* prow = probs.data() + (h * len + i) * len;
                    const real* dor = dy + i * d + h * hd;
                    double r = 0.0;
                    for (std::size_t j = 0; j <= last; ++j) {
                        const real* vv = x + j * stride + vo;
                        real s = real(0.0);
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += dor[c] * vv[c];
                        }
                        dp[j] = s;
                        r += static_cast<double>(prow[j]) * s;
                    }
                    const real* q = x + i * stride + qo;
                    real* dq = g.data() + i * stride + qo;
                    for (std::size_t j = 0; j <= last; ++j) {
                        const real ds = prow[j] * static_cast<real>(dp[j] - r) * sc;
                        const real* k = x + j * stride + ko;
                        real* dk = g.data() + j * stride + ko;
                        real* dv = g.data() + j * stride + vo;
                        for (std::size_t c = 0; c < hd; ++c) {
                            dq[c] += ds * k[c];
                            dk[c] += ds * q[c];
                            dv[c] += prow[j] * dor[c];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                             std::span<const std::uint8_t> mask) {
    require_rank2(logits, "softmax_cross_entropy");
    const std::size_t n = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != n || mask.size() != n) {
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(targets.size()) +
                                    " targets / " + std::to_string(mask.size()) + " mask entries for " +
                                    std::to_string(n) + " rows");
    }
    std::vector<std::size_t> rows;
    for (std::size_t p = 0; p < n; ++p) {
        if (mask[p]) {
            if (targets[p] < 0 || static_cast<std::size_t>(targets[p]) >= vocab) {
                throw std::out_of_range("softmax_cross_entropy: target id " + std::to_string(targets[p]) +
                                        " outside vocabulary of size " + std::to_string(vocab));
            }
            rows.push_back(p);
        }
    }
    if (rows.empty()) {
        throw std::invalid_argument("no supervised positions");
    }
    const real* ld = logits.data().data();
    std::vector<real> probs(rows.size() * vocab);
    double total = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const real* row = ld + rows[r] * vocab;
        const real mx = *std::max_element(row, row + vocab);
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            sum += std::exp(static_cast<double>(row[j] - mx));
        }
        const double lse = std::log(sum) + mx;
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[r * vocab + j] = static_cast<real>(std::exp(row[j] - lse));
        }
        total += lse - row[targets[rows[r]]];
    }
    const real count = static_cast<real>(rows.size());
    Tensor out = Tensor::scalar(static_cast<real>(total / rows.size()));
    ensure_finite(out, "softmax_cross_entropy");
    if (wants_grad({&logits})) {
        TensorNode* ln = logits.node();
        TensorNode* on = out.node();
        std::vector<std::int32_t> tgt;
        tgt.reserve(rows.size());
        for (std::size_t p : rows) {
            tgt.push_back(targets[p]);
        }
        record(out, {&logits},
               [ln, on, vocab, count, rows = std::move(rows), tgt = std::move(tgt), probs = std::move(probs)] {
                   auto& g = pass_grad(ln);
                   const real up = on->pass_grad[0] / count;
                   for (std::size_t r = 0; r < rows.size(); ++r) {
                       real* gr = g.data() + rows[r] * vocab;
                       const real* pr = probs.data() + r * vocab;
                       for (std::size_t j = 0; j < vocab; ++j) {
                           gr[j] += up * pr[j];
                       }
                       gr[tgt[r]] -= up;
                   }
               });
    }
    return out;
}

Tensor masked_mse(const Tensor& pred, const Tensor& target, std::span<const std::size_t> rows) {
    require_rank2(pred, "masked_mse");
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument("masked_mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                    shape_str(target.shape()));
    }
    if (rows.empty()) {
        throw std::invalid_argument("masked_mse: empty index set");
    }
    const std::size_t n = pred.dim(0), d = pred.dim(1);
    const real* pd = pred.data().data();
    const real* td = target.data().data();
    double total = 0.0;
    for (std::size_t r : rows) {
        if (r >= n) {
            throw std::out_of_range("masked_mse: row " + std::to_string(r) + " outside " +
                                    shape_str(pred.shape()));
        }
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = static_cast<double>(pd[r * d + j]) - td[r * d + j];
            total += diff * diff;
        }
    }
    const real count = static_cast<real>(rows.size());
    Tensor out = Tensor::scalar(static_cast<real>(total / rows.size()));
    ensure_finite(out, "masked_mse");
    if (wants_grad({&pred, &target})) {
        TensorNode* pn = pred.node();
        TensorNode* tn = target.node();
        TensorNode* on = out.node();
        std::vector<std::size_t> row_copy(rows.begin(), rows.end());
        record(out, {&pred, &target}, [pn, tn, on, d, count, row_copy = std::move(row_copy)] {
            const real up = real(2.0) * on->pass_grad[0] / count;
            for (std::size_t r : row_copy) {
                for (std::size_t j = 0; j < d; ++j) {
                    const real diff = pn->data[r * d + j] - tn->data[r * d + j];
                    if (pn->requires_grad) {
                        pass_grad(pn)[r * d + j] += up * diff;
                    }
                    if (tn->requires_grad) {
                        pass_grad(tn)[r * d + j] -= up * diff;
                    }
                }
            }
        });
    }
    return out;
}

} // namespace smb::inline SMB_PRECISION::nn
