#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slm/error.hpp"
#include "slm/kahan.hpp"
#include "slm/rng.hpp"
#include "slm/tokenstream.hpp"

namespace slm::lm {

template <typename S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecT = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct LmConfig {
    int vocab_size = 0;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 512;
    int max_seq_len = 1024;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

std::string lm_config_to_json(const LmConfig& config);
LmConfig lm_config_from_json(const std::string& json_text);

/// Pre-norm decoder block: RMSNorm -> rotary attention -> residual,
/// RMSNorm -> gated-SiLU MLP -> residual. Weights are (out_dim x in_dim),
/// applied as y = W * x on column-major activations.
template <typename S>
struct LayerParamsT {
    VecT<S> attn_norm;
    MatT<S> wq, wk, wv, wo;  // d x d
    VecT<S> mlp_norm;
    MatT<S> w_gate, w_up;  // d_ff x d
    MatT<S> w_down;        // d x d_ff
};

template <typename S>
struct LmParamsT {
    LmConfig config;
    MatT<S> tok_emb;  // d x V, one column per token
    std::vector<LayerParamsT<S>> layers;
    VecT<S> final_norm;
    MatT<S> head;  // V x d, untied from tok_emb

    /// Visits every tensor as (name, data, size) in a fixed canonical order.
    template <typename F>
    void for_each_tensor(F&& f) {
        f("tok_emb", tok_emb.data(), tok_emb.size());
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            LayerParamsT<S>& lay = layers[l];
            f(p + "attn_norm", lay.attn_norm.data(), lay.attn_norm.size());
            f(p + "wq", lay.wq.data(), lay.wq.size());
            f(p + "wk", lay.wk.data(), lay.wk.size());
            f(p + "wv", lay.wv.data(), lay.wv.size());
            f(p + "wo", lay.wo.data(), lay.wo.size());
            f(p + "mlp_norm", lay.mlp_norm.data(), lay.mlp_norm.size());
            f(p + "w_gate", lay.w_gate.data(), lay.w_gate.size());
            f(p + "w_up", lay.w_up.data(), lay.w_up.size());
            f(p + "w_down", lay.w_down.data(), lay.w_down.size());
        }
        f("final_norm", final_norm.data(), final_norm.size());
        f("head", head.data(), head.size());
    }
    template <typename F>
    void for_each_tensor(F&& f) const {
        const_cast<LmParamsT*>(this)->for_each_tensor(
            [&f](const std::string& name, S* data, Eigen::Index size) {
                f(name, static_cast<const S*>(data), size);
            });
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for_each_tensor([&n](const std::string&, const S*, Eigen::Index size) { n += size; });
        return n;
    }
};

using LmParams = LmParamsT<float>;

/// Allocates all tensors at the configured shapes, filled with zeros.
template <typename S>
LmParamsT<S> zero_model(const LmConfig& config) {
    config.validate();
    LmParamsT<S> p;
    p.config = config;
    p.tok_emb = MatT<S>::Zero(config.d_model, config.vocab_size);
    p.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (LayerParamsT<S>& lay : p.layers) {
        lay.attn_norm = VecT<S>::Zero(config.d_model);
        lay.wq = MatT<S>::Zero(config.d_model, config.d_model);
        lay.wk = MatT<S>::Zero(config.d_model, config.d_model);
        lay.wv = MatT<S>::Zero(config.d_model, config.d_model);
        lay.wo = MatT<S>::Zero(config.d_model, config.d_model);
        lay.mlp_norm = VecT<S>::Zero(config.d_model);
        lay.w_gate = MatT<S>::Zero(config.d_ff, config.d_model);
        lay.w_up = MatT<S>::Zero(config.d_ff, config.d_model);
        lay.w_down = MatT<S>::Zero(config.d_model, config.d_ff);
    }
    p.final_norm = VecT<S>::Zero(config.d_model);
    p.head = MatT<S>::Zero(config.vocab_size, config.d_model);
    return p;
}

/// Seeded initialization. Each tensor draws from its own stream keyed by
/// (config.seed, tensor name), so the layout of other tensors cannot shift
/// the values. Residual output projections are scaled down with depth.
template <typename S>
LmParamsT<S> init_model(const LmConfig& config) {
    LmParamsT<S> p = zero_model<S>(config);
    const double out_scale = 0.02 / std::sqrt(2.0 * config.n_layers);
    p.for_each_tensor([&config, out_scale](const std::string& name, S* data, Eigen::Index size) {
        const bool is_norm = name.find("norm") != std::string::npos;
        if (is_norm) {
            for (Eigen::Index i = 0; i < size; ++i) data[i] = S(1);
            return;
        }
        const bool is_residual_out =
            name.find(".wo") != std::string::npos || name.find(".w_down") != std::string::npos;
        const double std_dev = is_residual_out ? out_scale : 0.02;
        rng::Rng rng(rng::derive_seed(config.seed, name, 0));
        for (Eigen::Index i = 0; i < size; ++i) {
            data[i] = static_cast<S>(std_dev * rng.normal());
        }
    });
    return p;
}

struct ScoreMask {
    enum class Mode { kAll, kSemanticOnly, kCustom };
    Mode mode = Mode::kAll;
    /// For kCustom: one flag per sequence position (the target's position).
    std::vector<std::uint8_t> include;

    static ScoreMask all() { return {}; }
    static ScoreMask semantic_only() { return {Mode::kSemanticOnly, {}}; }
    static ScoreMask custom(std::vector<std::uint8_t> flags) {
        return {Mode::kCustom, std::move(flags)};
    }
};

/// Per-position include flags for target positions 1..L-1 (index 0 unused).
std::vector<std::uint8_t> resolve_mask(const ScoreMask& mask, const tokens::UnifiedVocab& vocab,
                                       std::span<const tokens::TokenId> ids);

namespace detail {

template <typename S>
void check_ids(const LmConfig& config, std::span<const tokens::TokenId> ids) {
    if (ids.empty()) throw DataError("lm: empty token sequence");
    if (static_cast<int>(ids.size()) > config.max_seq_len) {
        std::ostringstream os;
        os << "lm: sequence length " << ids.size() << " exceeds max_seq_len "
           << config.max_seq_len;
        throw RangeError(os.str());
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= config.vocab_size) {
            std::ostringstream os;
            os << "lm: token id " << ids[i] << " at position " << i << " outside [0, "
               << config.vocab_size << ")";
            throw RangeError(os.str());
        }
    }
}

template <typename S>
void rmsnorm_forward(const MatT<S>& x, const VecT<S>& w, S eps, MatT<S>& out, VecT<S>& inv_rms) {
    const Eigen::Index d = x.rows();
    out.resize(d, x.cols());
    inv_rms.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const S ms = x.col(j).squaredNorm() / S(d);
        const S inv = S(1) / std::sqrt(ms + eps);
        inv_rms(j) = inv;
        out.col(j) = x.col(j).cwiseProduct(w) * inv;
    }
}

template <typename S>
void rmsnorm_backward(const MatT<S>& x, const VecT<S>& w, const VecT<S>& inv_rms,
                      const MatT<S>& dy, MatT<S>& dx_accum, VecT<S>& dw_accum) {
    const Eigen::Index d = x.rows();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const S inv = inv_rms(j);
        const S s = dy.col(j).cwiseProduct(w).cwiseProduct(x.col(j)).sum();
        dx_accum.col(j) +=
            dy.col(j).cwiseProduct(w) * inv - x.col(j) * (s * inv * inv * inv / S(d));
        dw_accum += dy.col(j).cwiseProduct(x.col(j)) * inv;
    }
}

/// In-place rotary rotation of per-head (even, odd) row pairs; column t sits
/// at absolute position pos_offset + t. `invert` applies the transpose.
template <typename S>
void apply_rotary(MatT<S>& m, int n_heads, S base, Eigen::Index pos_offset, bool invert) {
    const Eigen::Index d = m.rows();
    const Eigen::Index hd = d / n_heads;
    const Eigen::Index half = hd / 2;
    VecT<S> freqs(half);
    for (Eigen::Index i = 0; i < half; ++i) {
        freqs(i) = std::pow(base, -S(2 * i) / S(hd));
    }
    for (Eigen::Index t = 0; t < m.cols(); ++t) {
        const S pos = S(pos_offset + t);
        for (Eigen::Index i = 0; i < half; ++i) {
            const S angle = pos * freqs(i);
            const S c = std::cos(angle);
            const S s = invert ? -std::sin(angle) : std::sin(angle);
            for (int h = 0; h < n_heads; ++h) {
                const Eigen::Index r0 = h * hd + 2 * i;
                const S a = m(r0, t);
                const S b = m(r0 + 1, t);
                m(r0, t) = a * c - b * s;
                m(r0 + 1, t) = a * s + b * c;
            }
        }
    }
}

template <typename S>
struct LayerCache {
    MatT<S> x;        // layer input
    MatT<S> attn_in;  // post-norm
    VecT<S> attn_inv;
    MatT<S> q, k, v;  // q, k post-rotary
    std::vector<MatT<S>> probs;  // per head, L x L
    MatT<S> ctx;  // pre-wo
    MatT<S> mid;  // after attention residual
    MatT<S> mlp_in;
    VecT<S> mlp_inv;
    MatT<S> gate, up, act;
};

template <typename S>
struct ForwardCache {
    std::vector<LayerCache<S>> layers;
    MatT<S> final_in;
    VecT<S> final_inv;
    MatT<S> final_out;
};

template <typename S>
S silu(S x) {
    const S sig = S(1) / (S(1) + std::exp(-x));
    return x * sig;
}

template <typename S>
S silu_grad(S x) {
    const S sig = S(1) / (S(1) + std::exp(-x));
    return sig * (S(1) + x * (S(1) - sig));
}

template <typename S>
MatT<S> forward_cached(const LmParamsT<S>& p, std::span<const tokens::TokenId> ids,
                       ForwardCache<S>& cache) {
    const LmConfig& c = p.config;
    check_ids<S>(c, ids);
    const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
    const Eigen::Index d = c.d_model;
    const Eigen::Index hd = c.head_dim();
    const S scale = S(1) / std::sqrt(S(hd));

    MatT<S> x(d, L);
    for (Eigen::Index t = 0; t < L; ++t) x.col(t) = p.tok_emb.col(ids[t]);

    cache.layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const LayerParamsT<S>& lay = p.layers[l];
        LayerCache<S>& lc = cache.layers[l];
        lc.x = x;
        rmsnorm_forward(lc.x, lay.attn_norm, S(c.norm_eps), lc.attn_in, lc.attn_inv);
        lc.q.noalias() = lay.wq * lc.attn_in;
        lc.k.noalias() = lay.wk * lc.attn_in;
        lc.v.noalias() = lay.wv * lc.attn_in;
        apply_rotary(lc.q, c.n_heads, S(c.rope_base), 0, false);
        apply_rotary(lc.k, c.n_heads, S(c.rope_base), 0, false);
        lc.ctx.resize(d, L);
        lc.probs.resize(static_cast<std::size_t>(c.n_heads));
        for (int h = 0; h < c.n_heads; ++h) {
            auto qh = lc.q.middleRows(h * hd, hd);
            auto kh = lc.k.middleRows(h * hd, hd);
            auto vh = lc.v.middleRows(h * hd, hd);
            MatT<S>& probs = lc.probs[static_cast<std::size_t>(h)];
            probs.noalias() = kh.transpose() * qh;  // probs(i, j) = k_i . q_j
            probs *= scale;
            for (Eigen::Index j = 0; j < L; ++j) {
                // causal softmax over keys i <= j
                S m = probs(0, j);
                for (Eigen::Index i = 1; i <= j; ++i) m = std::max(m, probs(i, j));
                S z = S(0);
                for (Eigen::Index i = 0; i <= j; ++i) {
                    const S e = std::exp(probs(i, j) - m);
                    probs(i, j) = e;
                    z += e;
                }
                const S inv_z = S(1) / z;
                for (Eigen::Index i = 0; i <= j; ++i) probs(i, j) *= inv_z;
                for (Eigen::Index i = j + 1; i < L; ++i) probs(i, j) = S(0);
            }
            lc.ctx.middleRows(h * hd, hd).noalias() = vh * probs;
        }
        lc.mid.noalias() = lay.wo * lc.ctx;
        lc.mid += lc.x;
        rmsnorm_forward(lc.mid, lay.mlp_norm, S(c.norm_eps), lc.mlp_in, lc.mlp_inv);
        lc.gate.noalias() = lay.w_gate * lc.mlp_in;
        lc.up.noalias() = lay.w_up * lc.mlp_in;
        lc.act = lc.gate.unaryExpr([](S v) { return silu(v); }).cwiseProduct(lc.up);
        x.noalias() = lay.w_down * lc.act;
        x += lc.mid;
    }
    cache.final_in = x;
    rmsnorm_forward(cache.final_in, p.final_norm, S(c.norm_eps), cache.final_out,
                    cache.final_inv);
    MatT<S> logits;
    logits.noalias() = p.head * cache.final_out;
    return logits;
}

}  // namespace detail

/// Full-sequence forward pass; logits(v, t) scores token v as the successor
/// of prefix ids[0..t].
template <typename S>
MatT<S> forward(const LmParamsT<S>& p, std::span<const tokens::TokenId> ids) {
    detail::ForwardCache<S> cache;
    return detail::forward_cached(p, ids, cache);
}

/// Sum-form loss and gradient accumulation for one sequence: adds the
/// gradients of sum(-log p(target)) over included targets into `grads`
/// and returns the loss sum and target count. The batch mean is taken by
/// the caller.
template <typename S>
std::pair<double, std::int64_t> accumulate_loss_grads(const LmParamsT<S>& p,
                                                      std::span<const tokens::TokenId> ids,
                                                      const std::vector<std::uint8_t>& include,
                                                      LmParamsT<S>& grads) {
    const LmConfig& c = p.config;
    if (include.size() != ids.size()) {
        throw LayoutError("lm: include-mask length does not match sequence length");
    }
    detail::ForwardCache<S> cache;
    MatT<S> logits = detail::forward_cached(p, ids, cache);
    const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
    const Eigen::Index d = c.d_model;
    const Eigen::Index hd = c.head_dim();
    const S scale = S(1) / std::sqrt(S(hd));

    KahanSum loss;
    std::int64_t count = 0;
    MatT<S> dlogits = MatT<S>::Zero(c.vocab_size, L);
    for (Eigen::Index j = 1; j < L; ++j) {
        if (!include[static_cast<std::size_t>(j)]) continue;
        const Eigen::Index col = j - 1;
        const tokens::TokenId target = ids[static_cast<std::size_t>(j)];
        // loss in double for stable bookkeeping, gradient in S
        double m = static_cast<double>(logits(0, col));
        for (Eigen::Index v = 1; v < c.vocab_size; ++v) {
            m = std::max(m, static_cast<double>(logits(v, col)));
        }
        double z = 0.0;
        for (Eigen::Index v = 0; v < c.vocab_size; ++v) {
            z += std::exp(static_cast<double>(logits(v, col)) - m);
        }
        loss.add(m + std::log(z) - static_cast<double>(logits(target, col)));
        ++count;
        S ms = logits.col(col).maxCoeff();
        VecT<S> probs = (logits.col(col).array() - ms).exp();
        probs /= probs.sum();
        dlogits.col(col) += probs;
        dlogits(target, col) -= S(1);
    }
    if (count == 0) throw DataError("lm: no scored target positions in sequence");

    grads.head.noalias() += dlogits * cache.final_out.transpose();
    MatT<S> d_final_out;
    d_final_out.noalias() = p.head.transpose() * dlogits;
    MatT<S> dx = MatT<S>::Zero(d, L);
    detail::rmsnorm_backward(cache.final_in, p.final_norm, cache.final_inv, d_final_out, dx,
                             grads.final_norm);

    for (std::size_t li = p.layers.size(); li-- > 0;) {
        const LayerParamsT<S>& lay = p.layers[li];
        LayerParamsT<S>& g = grads.layers[li];
        detail::LayerCache<S>& lc = cache.layers[li];

        // MLP branch: dx is the gradient at the layer output.
        MatT<S> d_act;
        d_act.noalias() = lay.w_down.transpose() * dx;
        g.w_down.noalias() += dx * lc.act.transpose();
        MatT<S> silu_gate = lc.gate.unaryExpr([](S v) { return detail::silu(v); });
        MatT<S> d_gate =
            d_act.cwiseProduct(lc.up).cwiseProduct(
                lc.gate.unaryExpr([](S v) { return detail::silu_grad(v); }));
        MatT<S> d_up = d_act.cwiseProduct(silu_gate);
        g.w_gate.noalias() += d_gate * lc.mlp_in.transpose();
        g.w_up.noalias() += d_up * lc.mlp_in.transpose();
        MatT<S> d_mlp_in;
        d_mlp_in.noalias() = lay.w_gate.transpose() * d_gate;
        d_mlp_in.noalias() += lay.w_up.transpose() * d_up;
        // dx becomes the gradient at `mid` (residual + norm path)
        detail::rmsnorm_backward(lc.mid, lay.mlp_norm, lc.mlp_inv, d_mlp_in, dx, g.mlp_norm);

        // Attention branch.
        MatT<S> d_ctx;
        d_ctx.noalias() = lay.wo.transpose() * dx;
        g.wo.noalias() += dx * lc.ctx.transpose();
        MatT<S> dq = MatT<S>::Zero(d, L);
        MatT<S> dk = MatT<S>::Zero(d, L);
        MatT<S> dv = MatT<S>::Zero(d, L);
        for (int h = 0; h < c.n_heads; ++h) {
            auto qh = lc.q.middleRows(h * hd, hd);
            auto kh = lc.k.middleRows(h * hd, hd);
            auto vh = lc.v.middleRows(h * hd, hd);
            auto d_ctx_h = d_ctx.middleRows(h * hd, hd);
            const MatT<S>& probs = lc.probs[static_cast<std::size_t>(h)];
            MatT<S> d_probs;
            d_probs.noalias() = vh.transpose() * d_ctx_h;
            dv.middleRows(h * hd, hd).noalias() = d_ctx_h * probs.transpose();
            MatT<S> d_scores(L, L);
            for (Eigen::Index j = 0; j < L; ++j) {
                const S dot = probs.col(j).dot(d_probs.col(j));
                d_scores.col(j) = probs.col(j).cwiseProduct((d_probs.col(j).array() - dot).matrix());
            }
            dq.middleRows(h * hd, hd).noalias() = kh * d_scores * scale;
            dk.middleRows(h * hd, hd).noalias() = qh * d_scores.transpose() * scale;
        }
        detail::apply_rotary(dq, c.n_heads, S(c.rope_base), 0, true);
        detail::apply_rotary(dk, c.n_heads, S(c.rope_base), 0, true);
        g.wq.noalias() += dq * lc.attn_in.transpose();
        g.wk.noalias() += dk * lc.attn_in.transpose();
        g.wv.noalias() += dv * lc.attn_in.transpose();
        MatT<S> d_attn_in;
        d_attn_in.noalias() = lay.wq.transpose() * dq;
        d_attn_in.noalias() += lay.wk.transpose() * dk;
        d_attn_in.noalias() += lay.wv.transpose() * dv;
        MatT<S> d_layer_in = dx;  // residual passthrough
        detail::rmsnorm_backward(lc.x, lay.attn_norm, lc.attn_inv, d_attn_in, d_layer_in,
                                 g.attn_norm);
        dx = std::move(d_layer_in);
    }
    for (Eigen::Index t = 0; t < L; ++t) {
        grads.tok_emb.col(ids[t]) += dx.col(t);
    }
    return {loss.value(), count};
}

template <typename S>
struct LossGrads {
    double loss = 0.0;  // mean over included targets
    std::int64_t n_targets = 0;
    LmParamsT<S> grads;  // gradient of the mean loss
};

/// Convenience single-sequence mean loss + gradients.
template <typename S>
LossGrads<S> loss_and_grads(const LmParamsT<S>& p, const tokens::UnifiedVocab& vocab,
                            std::span<const tokens::TokenId> ids, const ScoreMask& mask) {
    LossGrads<S> out;
    out.grads = zero_model<S>(p.config);
    const std::vector<std::uint8_t> include = resolve_mask(mask, vocab, ids);
    auto [loss_sum, count] = accumulate_loss_grads(p, ids, include, out.grads);
    out.loss = loss_sum / static_cast<double>(count);
    out.n_targets = count;
    const S inv = S(1.0 / static_cast<double>(count));
    out.grads.for_each_tensor([inv](const std::string&, S* data, Eigen::Index size) {
        for (Eigen::Index i = 0; i < size; ++i) data[i] *= inv;
    });
    return out;
}

struct ScoreResult {
    std::vector<double> token_log_probs;  // [0] is NaN; entry j = log p(ids[j] | prefix)
    double total = 0.0;                   // compensated sum over included targets
    std::int64_t n_included = 0;

    double mean() const { return total / static_cast<double>(n_included); }
    double perplexity() const { return std::exp(-mean()); }
};

/// Teacher-forced scoring. Per-token log-probs are computed for every
/// position in double precision; the mask only controls which of them are
/// folded into `total`.
template <typename S>
ScoreResult score(const LmParamsT<S>& p, const tokens::UnifiedVocab& vocab,
                  std::span<const tokens::TokenId> ids, const ScoreMask& mask) {
    const std::vector<std::uint8_t> include = resolve_mask(mask, vocab, ids);
    MatT<S> logits = forward(p, ids);
    const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
    ScoreResult r;
    r.token_log_probs.assign(static_cast<std::size_t>(L),
                             std::numeric_limits<double>::quiet_NaN());
    KahanSum total;
    for (Eigen::Index j = 1; j < L; ++j) {
        const Eigen::Index col = j - 1;
        double m = static_cast<double>(logits(0, col));
        for (Eigen::Index v = 1; v < p.config.vocab_size; ++v) {
            m = std::max(m, static_cast<double>(logits(v, col)));
        }
        double z = 0.0;
        for (Eigen::Index v = 0; v < p.config.vocab_size; ++v) {
            z += std::exp(static_cast<double>(logits(v, col)) - m);
        }
        const double lp =
            static_cast<double>(logits(ids[static_cast<std::size_t>(j)], col)) - m - std::log(z);
        r.token_log_probs[static_cast<std::size_t>(j)] = lp;
        if (include[static_cast<std::size_t>(j)]) {
            total.add(lp);
            ++r.n_included;
        }
    }
    r.total = total.value();
    return r;
}

/// Grows a text model's vocabulary to the unified layout. Embedding columns
/// and head rows of text tokens are copied verbatim; new audio/delimiter
/// entries start at the text mean plus small seeded noise.
LmParams extend_vocab(const LmParams& text_params, const tokens::UnifiedVocab& vocab,
                      std::uint64_t seed, double noise_scale = 0.02);

/// Incremental decoder with a KV cache; logits from step() match the
/// full-sequence forward at that position.
class Decoder {
  public:
    explicit Decoder(const LmParams& params);

    Eigen::VectorXf step(tokens::TokenId id);
    Eigen::Index position() const { return pos_; }
    void reset();

  private:
    const LmParams* params_;
    std::vector<Eigen::MatrixXf> k_cache_, v_cache_;  // d x max_seq_len
    Eigen::Index pos_ = 0;
};

/// Digest over the config and every tensor's bytes in canonical order;
/// stable across runs for identical weights.
std::string params_digest(const LmParams& params);

/// Named f32 slots carried alongside the weights in a checkpoint
/// (optimizer moments plus the step counter).
struct OptimizerState {
    std::int64_t step = 0;
    std::vector<std::pair<std::string, Eigen::VectorXf>> slots;
};

void save_checkpoint(const std::string& path, const LmParams& params,
                     const OptimizerState* opt = nullptr);

struct Checkpoint {
    LmParams params;
    std::optional<OptimizerState> opt;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace slm::lm
