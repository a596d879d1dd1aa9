#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "klaad/common.hpp"
#include "klaad/corpus.hpp"
#include "klaad/model.hpp"
#include "klaad/tensor.hpp"

namespace klaad {

struct LossWeights {
    double lambda1 = 0.7;
    double lambda2 = 0.15;
    double lambda3 = 0.15;
    double margin = 0.3;

    void validate() const {
        for (double v : {lambda1, lambda2, lambda3, margin})
            if (!(v >= 0.0) || !std::isfinite(v))
                throw ConfigError("LossWeights: weights and margin must be finite and >= 0");
    }
};

struct LossBreakdown {
    double ce = 0.0;
    double kl = 0.0;
    double triplet = 0.0;
    double total = 0.0;
};

// Axis over which the attention re-normalization softmax runs. The
// global (head-averaged) form is the default; the other two exist so the
// choice stays testable.
enum class KlMode { head_mean, per_head_mean, row_mean };

enum class PoolMethod { mean, last_token };

inline const char* to_string(KlMode m) {
    switch (m) {
        case KlMode::head_mean: return "head_mean";
        case KlMode::per_head_mean: return "per_head_mean";
        case KlMode::row_mean: return "row_mean";
    }
    return "?";
}

inline const char* to_string(PoolMethod m) {
    return m == PoolMethod::mean ? "mean" : "last_token";
}

inline KlMode kl_mode_from_string(const std::string& s) {
    if (s == "head_mean") return KlMode::head_mean;
    if (s == "per_head_mean") return KlMode::per_head_mean;
    if (s == "row_mean") return KlMode::row_mean;
    throw ConfigError("unknown kl_mode: " + s);
}

inline PoolMethod pool_method_from_string(const std::string& s) {
    if (s == "mean") return PoolMethod::mean;
    if (s == "last_token") return PoolMethod::last_token;
    throw ConfigError("unknown pool_method: " + s);
}

namespace detail {

// Mean next-token negative log-likelihood over the non-pad prefix.
// When d_logits is non-null, adds scale * dCE/dlogits into it.
template <typename S>
S ce_sequence(const Mat<S>& logits, const std::vector<int>& ids, int length, S scale,
              Mat<S>* d_logits) {
    if (length < 2) throw InputError("cross-entropy needs at least two non-pad tokens");
    const int n_pred = length - 1;
    const int vocab = logits.cols;
    S total = 0;
    std::vector<S> p(static_cast<size_t>(vocab));
    for (int t = 1; t < length; ++t) {
        const int row = t - 1;
        const int target = ids[static_cast<size_t>(t)];
        const S* r = logits.row(row);
        S m = r[0];
        for (int v = 1; v < vocab; ++v) m = std::max(m, r[v]);
        S denom = 0;
        for (int v = 0; v < vocab; ++v) {
            p[static_cast<size_t>(v)] = std::exp(r[v] - m);
            denom += p[static_cast<size_t>(v)];
        }
        total += -(r[target] - m - std::log(denom));
        if (d_logits) {
            const S g = scale / S(n_pred);
            S* dr = d_logits->row(row);
            for (int v = 0; v < vocab; ++v) {
                S grad = p[static_cast<size_t>(v)] / denom;
                if (v == target) grad -= S(1);
                dr[v] += g * grad;
            }
        }
    }
    return total / S(n_pred);
}

// KL between two discrete distributions given as flat softmax inputs.
// Returns KL(P||Q) where P = softmax(a_target), Q = softmax(a_model), and
// writes d/d(a_model) = Q - P and optionally d/d(a_target).
template <typename S>
S flat_softmax_kl(const std::vector<S>& a_target, const std::vector<S>& a_model,
                  std::vector<S>* d_model, std::vector<S>* d_target) {
    const size_t n = a_target.size();
    std::vector<S> logp(n), logq(n);
    auto log_softmax = [](const std::vector<S>& a, std::vector<S>& out) {
        S m = a[0];
        for (S v : a) m = std::max(m, v);
        S denom = 0;
        for (size_t i = 0; i < a.size(); ++i) denom += std::exp(a[i] - m);
        const S logz = m + std::log(denom);
        for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - logz;
    };
    log_softmax(a_target, logp);
    log_softmax(a_model, logq);
    S kl = 0;
    for (size_t i = 0; i < n; ++i) kl += std::exp(logp[i]) * (logp[i] - logq[i]);
    if (d_model) {
        d_model->assign(n, S(0));
        for (size_t i = 0; i < n; ++i) (*d_model)[i] = std::exp(logq[i]) - std::exp(logp[i]);
    }
    if (d_target) {
        d_target->assign(n, S(0));
        for (size_t i = 0; i < n; ++i)
            (*d_target)[i] = std::exp(logp[i]) * ((logp[i] - logq[i]) - kl);
    }
    return kl;
}

// Head-averaged attention zero-padded to size t_common.
template <typename S>
Mat<S> head_mean_padded(const std::vector<Mat<S>>& heads, int valid, int t_common) {
    Mat<S> out(t_common, t_common);
    const S inv_h = S(1) / S(heads.size());
    for (const auto& a : heads)
        for (int i = 0; i < valid; ++i)
            for (int j = 0; j < valid; ++j) out(i, j) += a(i, j) * inv_h;
    return out;
}

template <typename S>
std::vector<S> flatten_padded(const Mat<S>& a, int valid, int t_common) {
    std::vector<S> out(static_cast<size_t>(t_common) * t_common, S(0));
    for (int i = 0; i < valid; ++i)
        for (int j = 0; j < valid; ++j)
            out[static_cast<size_t>(i) * t_common + j] = a(i, j);
    return out;
}

}  // namespace detail

// D_KL(softmax(anti) || softmax(stereo)) over final-layer attention, with
// the anti side as the target distribution. Gradient matrices, when
// requested, match the head count and the full (unpadded) matrix shape of
// the corresponding input; only valid cells receive gradient.
template <typename S>
S attention_kl_core(const std::vector<Mat<S>>& anti_heads, int len_anti,
                    const std::vector<Mat<S>>& stereo_heads, int len_stereo, KlMode mode,
                    std::vector<Mat<S>>* d_stereo, std::vector<Mat<S>>* d_anti) {
    if (anti_heads.size() != stereo_heads.size())
        throw InputError("attention_kl: head count mismatch");
    const int heads = static_cast<int>(anti_heads.size());
    const int t = std::max(len_anti, len_stereo);
    const S inv_h = S(1) / S(heads);
    auto finite = [](S v) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError("attention_kl produced a non-finite value");
        return v;
    };

    if (d_stereo)
        d_stereo->assign(static_cast<size_t>(heads),
                         Mat<S>(stereo_heads[0].rows, stereo_heads[0].cols));
    if (d_anti)
        d_anti->assign(static_cast<size_t>(heads), Mat<S>(anti_heads[0].rows, anti_heads[0].cols));

    S kl = 0;
    if (mode == KlMode::per_head_mean) {
        for (int h = 0; h < heads; ++h) {
            auto pa = detail::flatten_padded(anti_heads[static_cast<size_t>(h)], len_anti, t);
            auto ps = detail::flatten_padded(stereo_heads[static_cast<size_t>(h)], len_stereo, t);
            std::vector<S> dm, dt;
            kl += detail::flat_softmax_kl(pa, ps, d_stereo ? &dm : nullptr,
                                          d_anti ? &dt : nullptr) *
                  inv_h;
            if (d_stereo)
                for (int i = 0; i < len_stereo; ++i)
                    for (int j = 0; j < len_stereo; ++j)
                        (*d_stereo)[static_cast<size_t>(h)](i, j) =
                            dm[static_cast<size_t>(i) * t + j] * inv_h;
            if (d_anti)
                for (int i = 0; i < len_anti; ++i)
                    for (int j = 0; j < len_anti; ++j)
                        (*d_anti)[static_cast<size_t>(h)](i, j) =
                            dt[static_cast<size_t>(i) * t + j] * inv_h;
        }
        return finite(kl);
    }

    const Mat<S> mean_anti = detail::head_mean_padded(anti_heads, len_anti, t);
    const Mat<S> mean_stereo = detail::head_mean_padded(stereo_heads, len_stereo, t);

    if (mode == KlMode::head_mean) {
        std::vector<S> flat_anti(mean_anti.data), flat_stereo(mean_stereo.data);
        std::vector<S> dm, dt;
        kl = detail::flat_softmax_kl(flat_anti, flat_stereo, d_stereo ? &dm : nullptr,
                                     d_anti ? &dt : nullptr);
        if (d_stereo)
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < len_stereo; ++i)
                    for (int j = 0; j < len_stereo; ++j)
                        (*d_stereo)[static_cast<size_t>(h)](i, j) =
                            dm[static_cast<size_t>(i) * t + j] * inv_h;
        if (d_anti)
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < len_anti; ++i)
                    for (int j = 0; j < len_anti; ++j)
                        (*d_anti)[static_cast<size_t>(h)](i, j) =
                            dt[static_cast<size_t>(i) * t + j] * inv_h;
        return finite(kl);
    }

    // row_mean: softmax each row of the head-averaged matrices, average
    // the per-row divergences.
    const S inv_t = S(1) / S(t);
    for (int i = 0; i < t; ++i) {
        std::vector<S> ra(static_cast<size_t>(t)), rs(static_cast<size_t>(t));
        for (int j = 0; j < t; ++j) {
            ra[static_cast<size_t>(j)] = mean_anti(i, j);
            rs[static_cast<size_t>(j)] = mean_stereo(i, j);
        }
        std::vector<S> dm, dt_;
        kl += detail::flat_softmax_kl(ra, rs, d_stereo ? &dm : nullptr, d_anti ? &dt_ : nullptr) *
              inv_t;
        if (d_stereo && i < len_stereo)
            for (int h = 0; h < heads; ++h)
                for (int j = 0; j < len_stereo; ++j)
                    (*d_stereo)[static_cast<size_t>(h)](i, j) =
                        dm[static_cast<size_t>(j)] * inv_h * inv_t;
        if (d_anti && i < len_anti)
            for (int h = 0; h < heads; ++h)
                for (int j = 0; j < len_anti; ++j)
                    (*d_anti)[static_cast<size_t>(h)](i, j) =
                        dt_[static_cast<size_t>(j)] * inv_h * inv_t;
    }
    return finite(kl);
}

// L2-normalized pooled hidden state. d_hidden backward lives in
// pool_hidden_backward so training can reuse the forward result.
template <typename S>
std::vector<S> pool_hidden_core(const Mat<S>& hidden, int length, PoolMethod method) {
    if (length < 1) throw InputError("pool_hidden: no non-pad positions");
    const int d = hidden.cols;
    std::vector<S> u(static_cast<size_t>(d), S(0));
    if (method == PoolMethod::mean) {
        for (int i = 0; i < length; ++i)
            for (int j = 0; j < d; ++j) u[static_cast<size_t>(j)] += hidden(i, j);
        for (auto& v : u) v /= S(length);
    } else {
        for (int j = 0; j < d; ++j) u[static_cast<size_t>(j)] = hidden(length - 1, j);
    }
    S norm_sq = 0;
    for (S v : u) norm_sq += v * v;
    const S norm = std::sqrt(norm_sq);
    if (!(norm > S(0))) throw NumericError("pool_hidden: zero vector before normalization");
    for (auto& v : u) v /= norm;
    return u;
}

// Adds scale * d(pooled)/d(hidden) applied to upstream gradient d_h.
template <typename S>
void pool_hidden_backward(const Mat<S>& hidden, int length, PoolMethod method,
                          const std::vector<S>& pooled, const std::vector<S>& d_h, S scale,
                          Mat<S>& d_hidden) {
    const int d = hidden.cols;
    // Recover ||u|| from the un-normalized pooled vector.
    std::vector<S> u(static_cast<size_t>(d), S(0));
    if (method == PoolMethod::mean) {
        for (int i = 0; i < length; ++i)
            for (int j = 0; j < d; ++j) u[static_cast<size_t>(j)] += hidden(i, j);
        for (auto& v : u) v /= S(length);
    } else {
        for (int j = 0; j < d; ++j) u[static_cast<size_t>(j)] = hidden(length - 1, j);
    }
    S norm_sq = 0;
    for (S v : u) norm_sq += v * v;
    const S norm = std::sqrt(norm_sq);

    // du = (I - h h^T) d_h / ||u||
    S dot = 0;
    for (int j = 0; j < d; ++j) dot += pooled[static_cast<size_t>(j)] * d_h[static_cast<size_t>(j)];
    std::vector<S> du(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        du[static_cast<size_t>(j)] =
            (d_h[static_cast<size_t>(j)] - pooled[static_cast<size_t>(j)] * dot) / norm;

    if (method == PoolMethod::mean) {
        const S row_scale = scale / S(length);
        for (int i = 0; i < length; ++i)
            for (int j = 0; j < d; ++j) d_hidden(i, j) += row_scale * du[static_cast<size_t>(j)];
    } else {
        for (int j = 0; j < d; ++j)
            d_hidden(length - 1, j) += scale * du[static_cast<size_t>(j)];
    }
}

// max(0, ||h_s - h_a||^2 - ||h_s - h_u||^2 + margin) on unit vectors.
template <typename S>
S triplet_loss_core(const std::vector<S>& hs, const std::vector<S>& ha, const std::vector<S>& hu,
                    S margin, std::vector<S>* d_hs, std::vector<S>* d_ha, std::vector<S>* d_hu) {
    const size_t d = hs.size();
    S dist_pos = 0, dist_neg = 0;
    for (size_t j = 0; j < d; ++j) {
        dist_pos += (hs[j] - ha[j]) * (hs[j] - ha[j]);
        dist_neg += (hs[j] - hu[j]) * (hs[j] - hu[j]);
    }
    const S v = dist_pos - dist_neg + margin;
    const bool active = v > S(0);
    if (d_hs) {
        d_hs->assign(d, S(0));
        d_ha->assign(d, S(0));
        d_hu->assign(d, S(0));
        if (active) {
            for (size_t j = 0; j < d; ++j) {
                (*d_hs)[j] = S(2) * (hu[j] - ha[j]);
                (*d_ha)[j] = S(2) * (ha[j] - hs[j]);
                (*d_hu)[j] = S(2) * (hs[j] - hu[j]);
            }
        }
    }
    return active ? v : S(0);
}

inline LossBreakdown composite(double ce, double kl, double triplet, const LossWeights& w) {
    w.validate();
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v))
            throw NumericError(std::string("composite: non-finite ") + name + " term");
    };
    check(ce, "ce");
    check(kl, "kl");
    check(triplet, "triplet");
    LossBreakdown b{ce, kl, triplet, 0.0};
    // Zero-weight terms are excluded from the sum entirely so ablations
    // are bitwise independent of the ablated tensor.
    if (w.lambda1 != 0.0) b.total += w.lambda1 * ce;
    if (w.lambda2 != 0.0) b.total += w.lambda2 * kl;
    if (w.lambda3 != 0.0) b.total += w.lambda3 * triplet;
    return b;
}

// ---- ModelOutput-level views of the loss terms ----

inline int valid_length(const ModelOutput& out) {
    int n = 0;
    while (n < static_cast<int>(out.pad_mask.size()) && !out.pad_mask[static_cast<size_t>(n)]) ++n;
    return n;
}

inline double ce_pair(const ModelOutput& stereo_out, const ModelOutput& anti_out,
                      const TokenSequence& stereo_targets, const TokenSequence& anti_targets) {
    const double ce_s = detail::ce_sequence<double>(stereo_out.logits, stereo_targets.ids,
                                                    stereo_targets.length, 0.0, nullptr);
    const double ce_a = detail::ce_sequence<double>(anti_out.logits, anti_targets.ids,
                                                    anti_targets.length, 0.0, nullptr);
    return 0.5 * (ce_s + ce_a);
}

inline double attention_kl(const ModelOutput& anti_out, const ModelOutput& stereo_out,
                           KlMode mode = KlMode::head_mean) {
    return attention_kl_core<double>(anti_out.final_attention, valid_length(anti_out),
                                     stereo_out.final_attention, valid_length(stereo_out), mode,
                                     nullptr, nullptr);
}

inline std::vector<double> pool_hidden(const ModelOutput& out, PoolMethod method = PoolMethod::mean) {
    return pool_hidden_core<double>(out.final_hidden, valid_length(out), method);
}

inline double triplet_loss(const std::vector<double>& h_stereo, const std::vector<double>& h_anti,
                           const std::vector<double>& h_unrelated, double margin) {
    return triplet_loss_core<double>(h_stereo, h_anti, h_unrelated, margin, nullptr, nullptr,
                                     nullptr);
}

// ---- Trainer-facing glue: composite loss and parameter gradients ----

struct ObjectiveOptions {
    KlMode kl_mode = KlMode::head_mean;
    PoolMethod pool_method = PoolMethod::mean;
    bool stop_grad_anti = true;  // anti attention is the KL target
};

// Computes the composite objective for one triplet and, when grads is
// non-null, accumulates d(total)/d(params) into it.
template <typename S>
LossBreakdown triplet_objective(const TransformerModel<S>& model, const Triplet& t,
                                const LossWeights& w, const ObjectiveOptions& opt,
                                ModelParams<S>* grads = nullptr) {
    w.validate();
    ForwardCache<S> fc_s, fc_a, fc_u;
    model.forward_cached(t.stereo, fc_s);
    model.forward_cached(t.anti, fc_a);
    model.forward_cached(t.unrelated, fc_u);

    const bool want_grads = grads != nullptr;
    OutputGrads<S> og_s, og_a, og_u;
    const int n_s = static_cast<int>(t.stereo.ids.size());
    const int n_a = static_cast<int>(t.anti.ids.size());
    const int n_u = static_cast<int>(t.unrelated.ids.size());

    // Cross-entropy over the two coherent sentences.
    const bool ce_grad = want_grads && w.lambda1 != 0.0;
    if (ce_grad) {
        og_s.d_logits = Mat<S>(n_s, model.config().vocab_size);
        og_a.d_logits = Mat<S>(n_a, model.config().vocab_size);
    }
    const S ce_scale = static_cast<S>(w.lambda1 * 0.5);
    const double ce_s = detail::ce_sequence<S>(fc_s.logits, t.stereo.ids, t.stereo.length,
                                               ce_scale, ce_grad ? &og_s.d_logits : nullptr);
    const double ce_a = detail::ce_sequence<S>(fc_a.logits, t.anti.ids, t.anti.length, ce_scale,
                                               ce_grad ? &og_a.d_logits : nullptr);
    const double ce = 0.5 * (ce_s + ce_a);

    // Attention alignment. The value is always computed for logging; the
    // gradient only when the term carries weight.
    const bool kl_grad = want_grads && w.lambda2 != 0.0;
    std::vector<Mat<S>> d_attn_stereo, d_attn_anti;
    const auto& attn_s = fc_s.layers.back().attn;
    const auto& attn_a = fc_a.layers.back().attn;
    const double kl = attention_kl_core<S>(
        attn_a, t.anti.length, attn_s, t.stereo.length, opt.kl_mode,
        kl_grad ? &d_attn_stereo : nullptr,
        (kl_grad && !opt.stop_grad_anti) ? &d_attn_anti : nullptr);
    if (kl_grad) {
        const S lam2 = static_cast<S>(w.lambda2);
        for (auto& m : d_attn_stereo)
            for (auto& v : m.data) v *= lam2;
        og_s.d_final_attention = std::move(d_attn_stereo);
        if (!opt.stop_grad_anti) {
            for (auto& m : d_attn_anti)
                for (auto& v : m.data) v *= lam2;
            og_a.d_final_attention = std::move(d_attn_anti);
        }
    }

    // Triplet hinge on pooled normalized hidden states.
    const bool trip_grad = want_grads && w.lambda3 != 0.0;
    const auto hs = pool_hidden_core<S>(fc_s.lnf_out, t.stereo.length, opt.pool_method);
    const auto ha = pool_hidden_core<S>(fc_a.lnf_out, t.anti.length, opt.pool_method);
    const auto hu = pool_hidden_core<S>(fc_u.lnf_out, t.unrelated.length, opt.pool_method);
    std::vector<S> d_hs, d_ha, d_hu;
    const double trip =
        triplet_loss_core<S>(hs, ha, hu, static_cast<S>(w.margin), trip_grad ? &d_hs : nullptr,
                             trip_grad ? &d_ha : nullptr, trip_grad ? &d_hu : nullptr);
    if (trip_grad) {
        const S lam3 = static_cast<S>(w.lambda3);
        og_s.d_final_hidden = Mat<S>(n_s, model.config().d_model);
        og_a.d_final_hidden = Mat<S>(n_a, model.config().d_model);
        og_u.d_final_hidden = Mat<S>(n_u, model.config().d_model);
        pool_hidden_backward<S>(fc_s.lnf_out, t.stereo.length, opt.pool_method, hs, d_hs, lam3,
                                og_s.d_final_hidden);
        pool_hidden_backward<S>(fc_a.lnf_out, t.anti.length, opt.pool_method, ha, d_ha, lam3,
                                og_a.d_final_hidden);
        pool_hidden_backward<S>(fc_u.lnf_out, t.unrelated.length, opt.pool_method, hu, d_hu, lam3,
                                og_u.d_final_hidden);
    }

    const LossBreakdown breakdown = composite(ce, kl, trip, w);

    if (want_grads) {
        model.backward(fc_s, og_s, *grads);
        model.backward(fc_a, og_a, *grads);
        model.backward(fc_u, og_u, *grads);
    }
    return breakdown;
}

}  // namespace klaad
