#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "klaad/common.hpp"
#include "klaad/corpus.hpp"
#include "klaad/tensor.hpp"

namespace klaad {

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 32;
    int d_ff = 64;
    int vocab_size = 64;
    int max_seq_len = 64;
    uint64_t seed = 0;
    double init_std = 0.08;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 ||
            max_seq_len < 1)
            throw ConfigError("ModelConfig: all dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
        if (!(init_std > 0.0)) throw ConfigError("ModelConfig: init_std must be positive");
    }
};

// Final-layer view of a forward pass. Attention entries at future key
// positions are exactly zero; rows at pad positions are all zero; every
// valid row sums to one.
struct ModelOutput {
    Mat<double> logits;                        // T x vocab
    std::vector<Mat<double>> final_attention;  // one T x T matrix per head
    Mat<double> final_hidden;                  // T x d_model
    std::vector<bool> pad_mask;                // true at pad positions
};

struct GenStrategy {
    enum class Kind { greedy, sample };
    Kind kind = Kind::greedy;
    uint64_t seed = 0;
    double temperature = 1.0;

    static GenStrategy greedy() { return GenStrategy{}; }
    static GenStrategy sample(uint64_t seed, double temperature = 1.0) {
        return GenStrategy{Kind::sample, seed, temperature};
    }
};

// Contract shared by the trainable toy model and any external-checkpoint
// adapter: evaluation and analysis code only sees this surface.
class LanguageModel {
  public:
    virtual ~LanguageModel() = default;
    virtual ModelOutput forward(const TokenSequence& tokens) const = 0;
    virtual double sequence_log_prob(const TokenSequence& tokens) const = 0;
    virtual TokenSequence generate(const TokenSequence& prompt, int max_new,
                                   const GenStrategy& strategy) const = 0;
    virtual int vocab_size() const = 0;
    virtual int max_seq_len() const = 0;
};

template <typename S>
struct LayerParams {
    Mat<S> ln1_g, ln1_b;
    Mat<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Mat<S> ln2_g, ln2_b;
    Mat<S> w1, b1, w2, b2;
};

template <typename S>
struct ModelParams {
    Mat<S> tok_emb;  // vocab x d_model (tied with the output projection)
    Mat<S> pos_emb;  // max_seq_len x d_model
    std::vector<LayerParams<S>> layers;
    Mat<S> lnf_g, lnf_b;
};

// Applies fn(name, mat) to every parameter tensor in a fixed order. The
// order defines checkpoint layout and the init RNG stream.
template <typename S, typename F>
void visit_params(ModelParams<S>& p, F&& fn) {
    fn("tok_emb", p.tok_emb);
    fn("pos_emb", p.pos_emb);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        auto& lp = p.layers[l];
        const std::string prefix = "layer" + std::to_string(l) + ".";
        fn(prefix + "ln1_g", lp.ln1_g);
        fn(prefix + "ln1_b", lp.ln1_b);
        fn(prefix + "wq", lp.wq);
        fn(prefix + "bq", lp.bq);
        fn(prefix + "wk", lp.wk);
        fn(prefix + "bk", lp.bk);
        fn(prefix + "wv", lp.wv);
        fn(prefix + "bv", lp.bv);
        fn(prefix + "wo", lp.wo);
        fn(prefix + "bo", lp.bo);
        fn(prefix + "ln2_g", lp.ln2_g);
        fn(prefix + "ln2_b", lp.ln2_b);
        fn(prefix + "w1", lp.w1);
        fn(prefix + "b1", lp.b1);
        fn(prefix + "w2", lp.w2);
        fn(prefix + "b2", lp.b2);
    }
    fn("lnf_g", p.lnf_g);
    fn("lnf_b", p.lnf_b);
}

template <typename S, typename F>
void visit_params(const ModelParams<S>& p, F&& fn) {
    visit_params(const_cast<ModelParams<S>&>(p),
                 [&](const std::string& name, Mat<S>& m) { fn(name, const_cast<const Mat<S>&>(m)); });
}

// Gradients accumulated into three inlets besides the parameters:
// logits, final-layer attention, and final hidden states.
template <typename S>
struct OutputGrads {
    Mat<S> d_logits;                        // T x vocab, or empty
    std::vector<Mat<S>> d_final_attention;  // per head T x T, or empty
    Mat<S> d_final_hidden;                  // T x d_model, or empty
};

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename S>
S gelu(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S a = S(0.044715);
    const S u = c * (x + a * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
}

template <typename S>
S gelu_grad(S x) {
    const S c = S(0.7978845608028654);
    const S a = S(0.044715);
    const S u = c * (x + a * x * x * x);
    const S th = std::tanh(u);
    const S du = c * (S(1) + S(3) * a * x * x);
    return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * du;
}

// y = gamma * (x - mu) * rstd + beta, per row. Caches mu and rstd.
template <typename S>
void layer_norm_forward(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta, int n_rows,
                        Mat<S>& y, Mat<S>& mu, Mat<S>& rstd) {
    const int d = x.cols;
    y = Mat<S>(x.rows, d);
    mu = Mat<S>(x.rows, 1);
    rstd = Mat<S>(x.rows, 1);
    for (int i = 0; i < n_rows; ++i) {
        const S* xi = x.row(i);
        S m = 0;
        for (int j = 0; j < d; ++j) m += xi[j];
        m /= S(d);
        S v = 0;
        for (int j = 0; j < d; ++j) v += (xi[j] - m) * (xi[j] - m);
        v /= S(d);
        const S r = S(1) / std::sqrt(v + S(kLnEps));
        mu(i, 0) = m;
        rstd(i, 0) = r;
        S* yi = y.row(i);
        for (int j = 0; j < d; ++j) yi[j] = gamma(0, j) * (xi[j] - m) * r + beta(0, j);
    }
}

template <typename S>
void layer_norm_backward(const Mat<S>& dy, const Mat<S>& x, const Mat<S>& mu, const Mat<S>& rstd,
                         const Mat<S>& gamma, int n_rows, Mat<S>& dx, Mat<S>& dgamma, Mat<S>& dbeta) {
    const int d = x.cols;
    dx = Mat<S>(x.rows, d);
    for (int i = 0; i < n_rows; ++i) {
        const S* xi = x.row(i);
        const S* dyi = dy.row(i);
        const S m = mu(i, 0);
        const S r = rstd(i, 0);
        S mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (int j = 0; j < d; ++j) {
            const S xhat = (xi[j] - m) * r;
            const S dxhat = dyi[j] * gamma(0, j);
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
            dgamma(0, j) += dyi[j] * xhat;
            dbeta(0, j) += dyi[j];
        }
        mean_dxhat /= S(d);
        mean_dxhat_xhat /= S(d);
        S* dxi = dx.row(i);
        for (int j = 0; j < d; ++j) {
            const S xhat = (xi[j] - m) * r;
            const S dxhat = dyi[j] * gamma(0, j);
            dxi[j] = r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

// x [T x d_in] * w [d_in x d_out] + b [1 x d_out], rows below n_rows only.
template <typename S>
void linear_forward(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b, int n_rows, Mat<S>& y) {
    y = Mat<S>(x.rows, w.cols);
    for (int i = 0; i < n_rows; ++i) {
        S* yi = y.row(i);
        for (int j = 0; j < w.cols; ++j) yi[j] = b(0, j);
        const S* xi = x.row(i);
        for (int k = 0; k < x.cols; ++k) {
            const S xv = xi[k];
            if (xv == S(0)) continue;
            const S* wr = w.row(k);
            for (int j = 0; j < w.cols; ++j) yi[j] += xv * wr[j];
        }
    }
}

template <typename S>
void linear_backward(const Mat<S>& dy, const Mat<S>& x, const Mat<S>& w, int n_rows, Mat<S>& dx,
                     Mat<S>& dw, Mat<S>& db) {
    dx = Mat<S>(x.rows, x.cols);
    for (int i = 0; i < n_rows; ++i) {
        const S* dyi = dy.row(i);
        const S* xi = x.row(i);
        for (int j = 0; j < w.cols; ++j) db(0, j) += dyi[j];
        for (int k = 0; k < x.cols; ++k) {
            S* dwk = dw.row(k);
            const S xv = xi[k];
            S acc = 0;
            const S* wk = w.row(k);
            for (int j = 0; j < w.cols; ++j) {
                dwk[j] += xv * dyi[j];
                acc += wk[j] * dyi[j];
            }
            dx(i, k) = acc;
        }
    }
}

}  // namespace detail

template <typename S>
struct LayerCache {
    Mat<S> x_in;              // block input
    Mat<S> ln1_out, ln1_mu, ln1_rstd;
    Mat<S> q, k, v;           // T x d_model
    std::vector<Mat<S>> attn; // per head, T x T post-softmax
    Mat<S> att_concat;        // T x d_model, heads concatenated
    Mat<S> x_mid;             // after attention residual
    Mat<S> ln2_out, ln2_mu, ln2_rstd;
    Mat<S> ff_pre, ff_act;
};

template <typename S>
struct ForwardCache {
    std::vector<int> tokens;
    int length = 0;  // non-pad prefix
    Mat<S> x0;
    std::vector<LayerCache<S>> layers;
    Mat<S> x_final;  // input to the final layer norm
    Mat<S> lnf_out, lnf_mu, lnf_rstd;
    Mat<S> logits;
};

// Decoder-only transformer: pre-norm blocks, learned positions, tied
// output projection. Parameters live in Scalar precision end to end so a
// double instantiation gives exact material for finite-difference checks.
template <typename S>
class TransformerModel : public LanguageModel {
  public:
    explicit TransformerModel(const ModelConfig& config) : config_(config) {
        config_.validate();
        allocate(params_);
        init_parameters();
    }

    const ModelConfig& config() const { return config_; }
    ModelParams<S>& params() { return params_; }
    const ModelParams<S>& params() const { return params_; }

    int vocab_size() const override { return config_.vocab_size; }
    int max_seq_len() const override { return config_.max_seq_len; }

    ModelParams<S> zero_grads() const {
        ModelParams<S> g;
        allocate(g);
        return g;
    }

    void forward_cached(const TokenSequence& tokens, ForwardCache<S>& fc) const {
        const int n = static_cast<int>(tokens.ids.size());
        if (n < 1 || tokens.length < 1) throw InputError("forward: empty token sequence");
        if (n > config_.max_seq_len)
            throw LengthError("forward: sequence of " + std::to_string(n) +
                              " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
        for (int id : tokens.ids)
            if (id < 0 || id >= config_.vocab_size)
                throw InputError("forward: token id out of vocabulary range");

        const int L = tokens.length;
        const int d = config_.d_model;
        const int heads = config_.n_heads;
        const int dh = config_.head_dim();
        const S inv_sqrt_dh = S(1) / std::sqrt(S(dh));

        fc.tokens = tokens.ids;
        fc.length = L;
        fc.x0 = Mat<S>(n, d);
        for (int t = 0; t < n; ++t)
            for (int j = 0; j < d; ++j)
                fc.x0(t, j) = params_.tok_emb(tokens.ids[t], j) + params_.pos_emb(t, j);

        fc.layers.assign(static_cast<size_t>(config_.n_layers), LayerCache<S>{});
        Mat<S> x = fc.x0;
        for (int l = 0; l < config_.n_layers; ++l) {
            auto& lc = fc.layers[static_cast<size_t>(l)];
            const auto& lp = params_.layers[static_cast<size_t>(l)];
            lc.x_in = x;
            detail::layer_norm_forward(lc.x_in, lp.ln1_g, lp.ln1_b, L, lc.ln1_out, lc.ln1_mu,
                                       lc.ln1_rstd);
            detail::linear_forward(lc.ln1_out, lp.wq, lp.bq, L, lc.q);
            detail::linear_forward(lc.ln1_out, lp.wk, lp.bk, L, lc.k);
            detail::linear_forward(lc.ln1_out, lp.wv, lp.bv, L, lc.v);

            lc.attn.assign(static_cast<size_t>(heads), Mat<S>(n, n));
            lc.att_concat = Mat<S>(n, d);
            for (int h = 0; h < heads; ++h) {
                Mat<S>& a = lc.attn[static_cast<size_t>(h)];
                const int off = h * dh;
                for (int i = 0; i < L; ++i) {
                    // Causal scores over keys j <= i; pads sit past L so the
                    // mask never admits them for valid queries.
                    S m = -std::numeric_limits<S>::infinity();
                    std::vector<S> scores(static_cast<size_t>(i) + 1);
                    for (int j = 0; j <= i; ++j) {
                        S acc = 0;
                        for (int e = 0; e < dh; ++e)
                            acc += lc.q(i, off + e) * lc.k(j, off + e);
                        scores[static_cast<size_t>(j)] = acc * inv_sqrt_dh;
                        m = std::max(m, scores[static_cast<size_t>(j)]);
                    }
                    S denom = 0;
                    for (int j = 0; j <= i; ++j) {
                        const S e = std::exp(scores[static_cast<size_t>(j)] - m);
                        a(i, j) = e;
                        denom += e;
                    }
                    for (int j = 0; j <= i; ++j) a(i, j) /= denom;
                    for (int e = 0; e < dh; ++e) {
                        S acc = 0;
                        for (int j = 0; j <= i; ++j) acc += a(i, j) * lc.v(j, off + e);
                        lc.att_concat(i, off + e) = acc;
                    }
                }
            }

            Mat<S> att_out;
            detail::linear_forward(lc.att_concat, lp.wo, lp.bo, L, att_out);
            lc.x_mid = lc.x_in;
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < d; ++j) lc.x_mid(i, j) += att_out(i, j);

            detail::layer_norm_forward(lc.x_mid, lp.ln2_g, lp.ln2_b, L, lc.ln2_out, lc.ln2_mu,
                                       lc.ln2_rstd);
            detail::linear_forward(lc.ln2_out, lp.w1, lp.b1, L, lc.ff_pre);
            lc.ff_act = Mat<S>(n, config_.d_ff);
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < config_.d_ff; ++j)
                    lc.ff_act(i, j) = detail::gelu(lc.ff_pre(i, j));
            Mat<S> ff_out;
            detail::linear_forward(lc.ff_act, lp.w2, lp.b2, L, ff_out);
            x = lc.x_mid;
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < d; ++j) x(i, j) += ff_out(i, j);
        }

        fc.x_final = x;
        detail::layer_norm_forward(fc.x_final, params_.lnf_g, params_.lnf_b, L, fc.lnf_out,
                                   fc.lnf_mu, fc.lnf_rstd);
        fc.logits = Mat<S>(n, config_.vocab_size);
        for (int i = 0; i < L; ++i)
            for (int v = 0; v < config_.vocab_size; ++v) {
                S acc = 0;
                for (int j = 0; j < d; ++j) acc += fc.lnf_out(i, j) * params_.tok_emb(v, j);
                fc.logits(i, v) = acc;
            }
    }

    ModelOutput forward(const TokenSequence& tokens) const override {
        ForwardCache<S> fc;
        forward_cached(tokens, fc);
        return output_from_cache(fc);
    }

    ModelOutput output_from_cache(const ForwardCache<S>& fc) const {
        const int n = static_cast<int>(fc.tokens.size());
        ModelOutput out;
        out.logits = fc.logits.template cast<double>();
        out.final_hidden = fc.lnf_out.template cast<double>();
        out.final_attention.reserve(fc.layers.back().attn.size());
        for (const auto& a : fc.layers.back().attn)
            out.final_attention.push_back(a.template cast<double>());
        out.pad_mask.assign(static_cast<size_t>(n), false);
        for (int t = fc.length; t < n; ++t) out.pad_mask[static_cast<size_t>(t)] = true;
        return out;
    }

    // Accumulates parameter gradients for one sequence. grads must come
    // from zero_grads() or a previous accumulation with matching shapes.
    void backward(const ForwardCache<S>& fc, const OutputGrads<S>& out_grads,
                  ModelParams<S>& grads) const {
        const int n = static_cast<int>(fc.tokens.size());
        const int L = fc.length;
        const int d = config_.d_model;
        const int heads = config_.n_heads;
        const int dh = config_.head_dim();
        const S inv_sqrt_dh = S(1) / std::sqrt(S(dh));

        // d(final hidden) from the direct inlet plus the tied projection.
        Mat<S> d_lnf_out(n, d);
        if (out_grads.d_final_hidden.rows > 0)
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < d; ++j) d_lnf_out(i, j) = out_grads.d_final_hidden(i, j);
        if (out_grads.d_logits.rows > 0) {
            for (int i = 0; i < L; ++i) {
                const S* dl = out_grads.d_logits.row(i);
                for (int v = 0; v < config_.vocab_size; ++v) {
                    const S g = dl[v];
                    if (g == S(0)) continue;
                    S* demb = grads.tok_emb.row(v);
                    const S* h = fc.lnf_out.row(i);
                    S* dli = d_lnf_out.row(i);
                    for (int j = 0; j < d; ++j) {
                        demb[j] += g * h[j];
                        dli[j] += g * params_.tok_emb(v, j);
                    }
                }
            }
        }

        Mat<S> dx;
        detail::layer_norm_backward(d_lnf_out, fc.x_final, fc.lnf_mu, fc.lnf_rstd, params_.lnf_g,
                                    L, dx, grads.lnf_g, grads.lnf_b);

        for (int l = config_.n_layers - 1; l >= 0; --l) {
            const auto& lc = fc.layers[static_cast<size_t>(l)];
            const auto& lp = params_.layers[static_cast<size_t>(l)];
            auto& lg = grads.layers[static_cast<size_t>(l)];

            // Feed-forward branch; dx carries the residual gradient.
            Mat<S> d_ff_act;
            detail::linear_backward(dx, lc.ff_act, lp.w2, L, d_ff_act, lg.w2, lg.b2);
            Mat<S> d_ff_pre(n, config_.d_ff);
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < config_.d_ff; ++j)
                    d_ff_pre(i, j) = d_ff_act(i, j) * detail::gelu_grad(lc.ff_pre(i, j));
            Mat<S> d_ln2_out;
            detail::linear_backward(d_ff_pre, lc.ln2_out, lp.w1, L, d_ln2_out, lg.w1, lg.b1);
            Mat<S> d_x_mid;
            detail::layer_norm_backward(d_ln2_out, lc.x_mid, lc.ln2_mu, lc.ln2_rstd, lp.ln2_g, L,
                                        d_x_mid, lg.ln2_g, lg.ln2_b);
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < d; ++j) d_x_mid(i, j) += dx(i, j);

            // Attention branch.
            Mat<S> d_att_concat;
            detail::linear_backward(d_x_mid, lc.att_concat, lp.wo, L, d_att_concat, lg.wo, lg.bo);

            Mat<S> dq(n, d), dk(n, d), dv(n, d);
            const bool has_ext =
                l == config_.n_layers - 1 && !out_grads.d_final_attention.empty();
            for (int h = 0; h < heads; ++h) {
                const Mat<S>& a = lc.attn[static_cast<size_t>(h)];
                const int off = h * dh;
                for (int i = 0; i < L; ++i) {
                    // dA has two sources: value-weighted output and, on the
                    // last layer, the external attention-loss inlet.
                    std::vector<S> da(static_cast<size_t>(i) + 1, S(0));
                    for (int j = 0; j <= i; ++j) {
                        S acc = 0;
                        for (int e = 0; e < dh; ++e)
                            acc += d_att_concat(i, off + e) * lc.v(j, off + e);
                        da[static_cast<size_t>(j)] = acc;
                    }
                    if (has_ext) {
                        const Mat<S>& ext = out_grads.d_final_attention[static_cast<size_t>(h)];
                        for (int j = 0; j <= i; ++j) da[static_cast<size_t>(j)] += ext(i, j);
                    }
                    for (int j = 0; j <= i; ++j)
                        for (int e = 0; e < dh; ++e)
                            dv(j, off + e) += a(i, j) * d_att_concat(i, off + e);

                    S dot = 0;
                    for (int j = 0; j <= i; ++j) dot += da[static_cast<size_t>(j)] * a(i, j);
                    for (int j = 0; j <= i; ++j) {
                        const S ds = a(i, j) * (da[static_cast<size_t>(j)] - dot) * inv_sqrt_dh;
                        for (int e = 0; e < dh; ++e) {
                            dq(i, off + e) += ds * lc.k(j, off + e);
                            dk(j, off + e) += ds * lc.q(i, off + e);
                        }
                    }
                }
            }

            Mat<S> d_ln1_from_q, d_ln1_from_k, d_ln1_from_v;
            detail::linear_backward(dq, lc.ln1_out, lp.wq, L, d_ln1_from_q, lg.wq, lg.bq);
            detail::linear_backward(dk, lc.ln1_out, lp.wk, L, d_ln1_from_k, lg.wk, lg.bk);
            detail::linear_backward(dv, lc.ln1_out, lp.wv, L, d_ln1_from_v, lg.wv, lg.bv);
            Mat<S> d_ln1_out(n, d);
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < d; ++j)
                    d_ln1_out(i, j) =
                        d_ln1_from_q(i, j) + d_ln1_from_k(i, j) + d_ln1_from_v(i, j);

            Mat<S> d_x_in;
            detail::layer_norm_backward(d_ln1_out, lc.x_in, lc.ln1_mu, lc.ln1_rstd, lp.ln1_g, L,
                                        d_x_in, lg.ln1_g, lg.ln1_b);
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < d; ++j) d_x_in(i, j) += d_x_mid(i, j);
            dx = std::move(d_x_in);
        }

        for (int t = 0; t < L; ++t) {
            const S* dxi = dx.row(t);
            S* de = grads.tok_emb.row(fc.tokens[static_cast<size_t>(t)]);
            S* dp = grads.pos_emb.row(t);
            for (int j = 0; j < d; ++j) {
                de[j] += dxi[j];
                dp[j] += dxi[j];
            }
        }
    }

    double sequence_log_prob(const TokenSequence& tokens) const override {
        if (tokens.length < 2)
            throw InputError("sequence_log_prob: need at least two non-pad tokens");
        ForwardCache<S> fc;
        forward_cached(tokens, fc);
        double total = 0.0;
        for (int t = 1; t < tokens.length; ++t)
            total += log_softmax_at(fc.logits, t - 1, tokens.ids[static_cast<size_t>(t)]);
        return total;
    }

    TokenSequence generate(const TokenSequence& prompt, int max_new,
                           const GenStrategy& strategy) const override {
        if (prompt.length < 1) throw InputError("generate: empty prompt");
        if (prompt.length + max_new > config_.max_seq_len)
            throw LengthError("generate: prompt plus max_new exceeds max_seq_len");

        TokenSequence seq;
        seq.ids.assign(prompt.ids.begin(), prompt.ids.begin() + prompt.length);
        seq.length = prompt.length;
        seq.text = prompt.text;

        NormalSampler rng(strategy.seed);
        for (int step = 0; step < max_new; ++step) {
            ForwardCache<S> fc;
            forward_cached(seq, fc);
            const int last = seq.length - 1;
            int next;
            if (strategy.kind == GenStrategy::Kind::greedy) {
                next = argmax_skip_pad(fc.logits, last);
            } else {
                next = sample_from_row(fc.logits, last, strategy.temperature, rng);
            }
            seq.ids.push_back(next);
            seq.length += 1;
        }
        return seq;
    }

  private:
    void allocate(ModelParams<S>& p) const {
        const int d = config_.d_model;
        p.tok_emb = Mat<S>(config_.vocab_size, d);
        p.pos_emb = Mat<S>(config_.max_seq_len, d);
        p.layers.assign(static_cast<size_t>(config_.n_layers), LayerParams<S>{});
        for (auto& lp : p.layers) {
            lp.ln1_g = Mat<S>(1, d);
            lp.ln1_b = Mat<S>(1, d);
            lp.wq = Mat<S>(d, d);
            lp.bq = Mat<S>(1, d);
            lp.wk = Mat<S>(d, d);
            lp.bk = Mat<S>(1, d);
            lp.wv = Mat<S>(d, d);
            lp.bv = Mat<S>(1, d);
            lp.wo = Mat<S>(d, d);
            lp.bo = Mat<S>(1, d);
            lp.ln2_g = Mat<S>(1, d);
            lp.ln2_b = Mat<S>(1, d);
            lp.w1 = Mat<S>(d, config_.d_ff);
            lp.b1 = Mat<S>(1, config_.d_ff);
            lp.w2 = Mat<S>(config_.d_ff, d);
            lp.b2 = Mat<S>(1, d);
        }
        p.lnf_g = Mat<S>(1, d);
        p.lnf_b = Mat<S>(1, d);
    }

    void init_parameters() {
        NormalSampler sampler(config_.seed);
        const double std_base = config_.init_std;
        const double std_resid = std_base / std::sqrt(2.0 * config_.n_layers);
        visit_params(params_, [&](const std::string& name, Mat<S>& m) {
            const bool is_ln_gain = name.ends_with("ln1_g") || name.ends_with("ln2_g") ||
                                    name.ends_with("lnf_g");
            const bool is_bias_like = name.ends_with("_b") || name.find(".b") != std::string::npos;
            if (is_ln_gain) {
                m.fill(S(1));
                return;
            }
            if (is_bias_like) {
                m.fill(S(0));
                return;
            }
            const bool is_resid_proj = name.ends_with("wo") || name.ends_with("w2");
            const double std = is_resid_proj ? std_resid : std_base;
            for (auto& v : m.data) v = static_cast<S>(sampler.next() * std);
        });
    }

    double log_softmax_at(const Mat<S>& logits, int row, int target) const {
        const S* r = logits.row(row);
        double m = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < logits.cols; ++v) m = std::max(m, static_cast<double>(r[v]));
        double denom = 0.0;
        for (int v = 0; v < logits.cols; ++v) denom += std::exp(static_cast<double>(r[v]) - m);
        return static_cast<double>(r[target]) - m - std::log(denom);
    }

    int argmax_skip_pad(const Mat<S>& logits, int row) const {
        const S* r = logits.row(row);
        int best = -1;
        for (int v = 0; v < logits.cols; ++v) {
            if (v == Tokenizer::kPadId) continue;
            if (best < 0 || r[v] > r[best]) best = v;
        }
        return best;
    }

    int sample_from_row(const Mat<S>& logits, int row, double temperature,
                        NormalSampler& rng) const {
        if (!(temperature > 0.0)) throw ConfigError("generate: temperature must be positive");
        const S* r = logits.row(row);
        double m = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < logits.cols; ++v)
            if (v != Tokenizer::kPadId) m = std::max(m, static_cast<double>(r[v]));
        std::vector<double> p(static_cast<size_t>(logits.cols), 0.0);
        double denom = 0.0;
        for (int v = 0; v < logits.cols; ++v) {
            if (v == Tokenizer::kPadId) continue;
            p[static_cast<size_t>(v)] = std::exp((static_cast<double>(r[v]) - m) / temperature);
            denom += p[static_cast<size_t>(v)];
        }
        double u = rng.uniform() * denom;
        for (int v = 0; v < logits.cols; ++v) {
            u -= p[static_cast<size_t>(v)];
            if (u <= 0.0) return v;
        }
        return logits.cols - 1;
    }

    ModelConfig config_;
    ModelParams<S> params_;
};

using Model = TransformerModel<float>;

}  // namespace klaad
