#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "moice/errors.hpp"
#include "moice/rng.hpp"
#include "moice/rope.hpp"
#include "moice/tensor.hpp"

namespace moice {

// Per-head gating MLP: logits = W3 (SiLU(W1 q) * (W2 q)).
struct RouterParams {
    TensorPtr w1; // [N x d]
    TensorPtr w2; // [N x d]
    TensorPtr w3; // [N x N]

    int n_experts() const { return w1->shape[0]; }
    int head_dim() const { return w1->shape[1]; }
};

// W1, W2 get small random rows; W3 starts at zero so the initial routing is
// exactly uniform and the first gradient step flows through W3.
inline RouterParams make_router_params(int n_experts, int head_dim, Rng& rng, bool trainable = true) {
    if (n_experts < 1) throw ConfigError("router needs at least one expert");
    RouterParams p;
    p.w1 = Tensor::zeros({n_experts, head_dim}, trainable);
    p.w2 = Tensor::zeros({n_experts, head_dim}, trainable);
    p.w3 = Tensor::zeros({n_experts, n_experts}, trainable);
    const double s = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (auto& v : p.w1->data) v = rng.normal(0.0, s);
    for (auto& v : p.w2->data) v = rng.normal(0.0, s);
    return p;
}

// Batched router forward over queries [T x d] -> logits [T x N].
// Differentiable w.r.t. the router weights (and the queries).
inline TensorPtr router_forward(Tape* tape, const RouterParams& params, const TensorPtr& queries) {
    if (queries->shape.size() != 2 || queries->shape[1] != params.head_dim())
        throw ShapeError("router input must be [T x head_dim]");
    auto h1 = matmul_nt(tape, queries, params.w1); // [T x N]
    auto h2 = matmul_nt(tape, queries, params.w2); // [T x N]
    auto gated = mul(tape, silu(tape, h1), h2);
    return matmul_nt(tape, gated, params.w3); // [T x N]
}

// Plain single-query variant.
inline std::vector<double> router_forward(const RouterParams& params, std::span<const double> q) {
    if (static_cast<int>(q.size()) != params.head_dim())
        throw ShapeError("router query length mismatch");
    auto qt = Tensor::from(std::vector<double>(q.begin(), q.end()), {1, params.head_dim()});
    auto out = router_forward(nullptr, params, qt);
    return out->data;
}

// Top-K selection: indices of the K largest logits ordered by descending
// logit (ties toward the lower expert id), probabilities renormalized with a
// softmax over the selected logits only.
struct RoutingDecision {
    std::vector<int> indices;
    std::vector<double> probs;
};

inline RoutingDecision select_topk(std::span<const double> logits, int k) {
    const int n = static_cast<int>(logits.size());
    if (k < 1 || k > n) throw ConfigError("top-K must satisfy 1 <= K <= N");
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits[a] > logits[b]; });
    RoutingDecision dec;
    dec.indices.assign(order.begin(), order.begin() + k);
    std::vector<double> sel(k);
    for (int r = 0; r < k; ++r) sel[r] = logits[dec.indices[r]];
    dec.probs.resize(k);
    detail::softmax_inplace(sel.data(), dec.probs.data(), k);
    return dec;
}

// ---------------------------------------------------------------------------
// Attention tape ops
// ---------------------------------------------------------------------------

// Precomputed cos/sin per (expert, position, plane) for batched rotation.
struct RopeTables {
    int head_dim = 0;
    int max_pos = 0;
    std::vector<std::vector<double>> cos_t; // [expert][pos * d/2]
    std::vector<std::vector<double>> sin_t;

    RopeTables() = default;
    RopeTables(const RopeAngleSet& set, int max_positions) : head_dim(set.head_dim), max_pos(max_positions) {
        const int half = head_dim / 2;
        cos_t.resize(set.num_experts());
        sin_t.resize(set.num_experts());
        for (int j = 0; j < set.num_experts(); ++j) {
            cos_t[j].resize(static_cast<std::size_t>(max_pos) * half);
            sin_t[j].resize(static_cast<std::size_t>(max_pos) * half);
            for (int p = 0; p < max_pos; ++p)
                for (int i = 0; i < half; ++i) {
                    const double a = static_cast<double>(p) * set.angles[j][i];
                    cos_t[j][static_cast<std::size_t>(p) * half + i] = std::cos(a);
                    sin_t[j][static_cast<std::size_t>(p) * half + i] = std::sin(a);
                }
        }
    }
};

// Rotates row r of x at absolute position pos_offset + r under expert j's
// angles. Linear with constant coefficients; backward applies the transpose
// (rotation by the negated angle).
inline TensorPtr rope_rows(Tape* tape, const TensorPtr& x, const std::shared_ptr<const RopeTables>& tables,
                           int expert, int pos_offset = 0) {
    detail::require_2d(x, "rope_rows input");
    const int T = x->shape[0], d = x->shape[1];
    if (d != tables->head_dim) throw ShapeError("rope_rows head_dim mismatch");
    if (pos_offset + T > tables->max_pos) throw ShapeError("rope_rows position beyond table");
    const int half = d / 2;
    const bool tracked = detail::track(tape, {&x});
    auto out = detail::make_out({T, d}, tracked);
    const auto& ct = tables->cos_t[expert];
    const auto& st = tables->sin_t[expert];
    for (int r = 0; r < T; ++r) {
        const double* xr = x->row(r);
        double* yr = out->row(r);
        const double* c = ct.data() + static_cast<std::size_t>(pos_offset + r) * half;
        const double* s = st.data() + static_cast<std::size_t>(pos_offset + r) * half;
        for (int i = 0; i < half; ++i) {
            yr[2 * i] = c[i] * xr[2 * i] - s[i] * xr[2 * i + 1];
            yr[2 * i + 1] = s[i] * xr[2 * i] + c[i] * xr[2 * i + 1];
        }
    }
    if (tracked) {
        tape->record([x, out, tables, expert, pos_offset, T, half] {
            const auto& ct = tables->cos_t[expert];
            const auto& st = tables->sin_t[expert];
            for (int r = 0; r < T; ++r) {
                double* dx = x->grow(r);
                const double* dy = out->grow(r);
                const double* c = ct.data() + static_cast<std::size_t>(pos_offset + r) * half;
                const double* s = st.data() + static_cast<std::size_t>(pos_offset + r) * half;
                for (int i = 0; i < half; ++i) {
                    dx[2 * i] += c[i] * dy[2 * i] + s[i] * dy[2 * i + 1];
                    dx[2 * i + 1] += -s[i] * dy[2 * i] + c[i] * dy[2 * i + 1];
                }
            }
        });
    }
    return out;
}

// Lower-triangular score matrix: out[n][m] = scale * dot(rq[n], rk[m]) for m <= n.
inline TensorPtr causal_scores(Tape* tape, const TensorPtr& rq, const TensorPtr& rk, double scale) {
    detail::require_2d(rq, "causal_scores q");
    detail::require_2d(rk, "causal_scores k");
    if (rq->shape != rk->shape) throw ShapeError("causal_scores q/k shape mismatch");
    const int T = rq->shape[0], d = rq->shape[1];
    const bool tracked = detail::track(tape, {&rq, &rk});
    auto out = detail::make_out({T, T}, tracked);
    for (int n = 0; n < T; ++n) {
        const double* qn = rq->row(n);
        double* on = out->row(n);
        int m = 0;
        for (; m + 4 <= n + 1; m += 4) {
            const double* k0 = rk->row(m);
            const double* k1 = k0 + d;
            const double* k2 = k1 + d;
            const double* k3 = k2 + d;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            for (int i = 0; i < d; ++i) {
                const double qv = qn[i];
                s0 += qv * k0[i];
                s1 += qv * k1[i];
                s2 += qv * k2[i];
                s3 += qv * k3[i];
            }
            on[m] = scale * s0;
            on[m + 1] = scale * s1;
            on[m + 2] = scale * s2;
            on[m + 3] = scale * s3;
        }
        for (; m <= n; ++m) {
            const double* km = rk->row(m);
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += qn[i] * km[i];
            on[m] = scale * s;
        }
    }
    if (tracked) {
        tape->record([rq, rk, out, scale, T, d] {
            for (int n = 0; n < T; ++n) {
                const double* dn = out->grow(n);
                const double* qn = rq->row(n);
                double* dqn = rq->requires_grad ? rq->grow(n) : nullptr;
                for (int m = 0; m <= n; ++m) {
                    const double g = scale * dn[m];
                    if (g == 0.0) continue;
                    const double* km = rk->row(m);
                    if (dqn)
                        for (int i = 0; i < d; ++i) dqn[i] += g * km[i];
                    if (rk->requires_grad) {
                        double* dkm = rk->grow(m);
                        for (int i = 0; i < d; ++i) dkm[i] += g * qn[i];
                    }
                }
            }
        });
    }
    return out;
}

// Row n becomes softmax over entries [0, n]; entries above the diagonal are 0.
inline TensorPtr causal_softmax(Tape* tape, const TensorPtr& scores) {
    detail::require_2d(scores, "causal_softmax input");
    const int T = scores->shape[0];
    if (scores->shape[1] != T) throw ShapeError("causal_softmax expects a square matrix");
    const bool tracked = detail::track(tape, {&scores});
    auto out = detail::make_out({T, T}, tracked);
    for (int n = 0; n < T; ++n)
        detail::softmax_inplace(scores->row(n), out->row(n), n + 1);
    if (tracked) {
        tape->record([scores, out, T] {
            for (int n = 0; n < T; ++n)
                detail::softmax_backward_row(out->row(n), out->grow(n), scores->grow(n), n + 1);
        });
    }
    return out;
}

// Selected logits per position: out[t][r] = logits[t][idx[t][r]].
inline TensorPtr gather_cols_per_row(Tape* tape, const TensorPtr& logits,
                                     const std::shared_ptr<const std::vector<int>>& idx, int k) {
    detail::require_2d(logits, "gather input");
    const int T = logits->shape[0], N = logits->shape[1];
    if (static_cast<int>(idx->size()) != T * k) throw ShapeError("gather index size mismatch");
    const bool tracked = detail::track(tape, {&logits});
    auto out = detail::make_out({T, k}, tracked);
    for (int t = 0; t < T; ++t)
        for (int r = 0; r < k; ++r) {
            const int j = (*idx)[static_cast<std::size_t>(t) * k + r];
            if (j < 0 || j >= N) throw IndexError("gather expert id out of range");
            out->at(t, r) = logits->at(t, j);
        }
    if (tracked) {
        tape->record([logits, out, idx, k, T] {
            for (int t = 0; t < T; ++t)
                for (int r = 0; r < k; ++r)
                    logits->grow(t)[(*idx)[static_cast<std::size_t>(t) * k + r]] += out->grow(t)[r];
        });
    }
    return out;
}

// Convex mixture of per-expert attention rows:
//   out[n][m] = sum_r probs[n][r] * attn[idx[n][r]][n][m],  m <= n.
// Unselected experts may be null in `attn`.
inline TensorPtr mix_rows(Tape* tape, const std::vector<TensorPtr>& attn, const TensorPtr& probs,
                          const std::shared_ptr<const std::vector<int>>& idx) {
    detail::require_2d(probs, "mixture probs");
    const int T = probs->shape[0], k = probs->shape[1];
    bool any_attn_grad = false;
    int Tcheck = -1;
    for (const auto& a : attn)
        if (a) {
            if (Tcheck < 0) Tcheck = a->shape[0];
            if (a->shape[0] != T || a->shape[1] != T) throw ShapeError("mixture attn must be [T x T]");
            any_attn_grad = any_attn_grad || a->requires_grad;
        }
    if (Tcheck < 0) throw ShapeError("mixture needs at least one expert attention matrix");
    const bool tracked = tape && (probs->requires_grad || any_attn_grad);
    auto out = detail::make_out({T, T}, tracked);
    for (int n = 0; n < T; ++n) {
        double* on = out->row(n);
        for (int r = 0; r < k; ++r) {
            const double p = probs->at(n, r);
            const double* an = attn[(*idx)[static_cast<std::size_t>(n) * k + r]]->row(n);
            for (int m = 0; m <= n; ++m) on[m] += p * an[m];
        }
    }
    if (tracked) {
        auto held = std::make_shared<std::vector<TensorPtr>>(attn);
        tape->record([held, probs, idx, out, T, k] {
            for (int n = 0; n < T; ++n) {
                const double* dn = out->grow(n);
                for (int r = 0; r < k; ++r) {
                    const auto& a = (*held)[(*idx)[static_cast<std::size_t>(n) * k + r]];
                    const double* an = a->row(n);
                    if (probs->requires_grad) {
                        double s = 0.0;
                        for (int m = 0; m <= n; ++m) s += dn[m] * an[m];
                        probs->grow(n)[r] += s;
                    }
                    if (a->requires_grad) {
                        const double p = probs->at(n, r);
                        double* dan = a->grow(n);
                        for (int m = 0; m <= n; ++m) dan[m] += p * dn[m];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pure single-head paths (reference semantics; the model uses the tape ops)
// ---------------------------------------------------------------------------

struct MixtureRow {
    std::vector<double> attn;    // length n+1, sums to 1
    std::vector<double> context; // length d
};

// One causal mixture-attention row: per selected expert, softmax over the
// rotary scores of positions 0..n, then the probability-weighted combination.
inline MixtureRow mixture_attention_row(std::span<const double> q,
                                        std::span<const std::vector<double>> keys,
                                        std::span<const std::vector<double>> values,
                                        std::int64_t n, const RoutingDecision& decision,
                                        const RopeAngleSet& angles) {
    if (keys.empty()) throw ShapeError("mixture_attention_row: no keys");
    if (static_cast<std::int64_t>(keys.size()) < n + 1)
        throw ShapeError("mixture_attention_row: need keys for positions 0..n");
    if (values.size() < keys.size()) throw ShapeError("mixture_attention_row: values shorter than keys");
    const int d = angles.head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const std::size_t len = static_cast<std::size_t>(n) + 1;

    MixtureRow out;
    out.attn.assign(len, 0.0);
    std::vector<double> scores(len), row(len);
    for (std::size_t r = 0; r < decision.indices.size(); ++r) {
        const auto& theta = angles.angles[decision.indices[r]];
        const auto rq = rotate(q, n, theta);
        for (std::size_t m = 0; m < len; ++m) {
            const auto rk = rotate(keys[m], static_cast<std::int64_t>(m), theta);
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += rq[i] * rk[i];
            scores[m] = s * inv_sqrt_d;
        }
        detail::softmax_inplace(scores.data(), row.data(), static_cast<int>(len));
        for (std::size_t m = 0; m < len; ++m) out.attn[m] += decision.probs[r] * row[m];
    }
    out.context.assign(d, 0.0);
    for (std::size_t m = 0; m < len; ++m)
        for (int i = 0; i < d; ++i) out.context[i] += out.attn[m] * values[m][i];
    return out;
}

struct HeadTraceEntry {
    std::int64_t position = 0;
    RoutingDecision decision;
};

struct HeadForwardResult {
    std::vector<std::vector<double>> contexts;
    std::vector<HeadTraceEntry> trace;
};

// Causal single-head forward over positions 0..T-1. The router sees the
// pre-rotation query at each position.
inline HeadForwardResult moice_head_forward(const RouterParams& params,
                                            std::span<const std::vector<double>> queries,
                                            std::span<const std::vector<double>> keys,
                                            std::span<const std::vector<double>> values, int k,
                                            const RopeAngleSet& angles) {
    if (queries.size() != keys.size() || keys.size() != values.size())
        throw ShapeError("moice_head_forward: q/k/v counts differ");
    HeadForwardResult res;
    res.contexts.reserve(queries.size());
    for (std::size_t n = 0; n < queries.size(); ++n) {
        const auto logits = router_forward(params, queries[n]);
        auto dec = select_topk(logits, k);
        auto mixed = mixture_attention_row(queries[n], keys, values, static_cast<std::int64_t>(n),
                                           dec, angles);
        res.contexts.push_back(std::move(mixed.context));
        res.trace.push_back({static_cast<std::int64_t>(n), std::move(dec)});
    }
    return res;
}

// Incremental-decoding key cache: raw keys plus one rotated copy per expert,
// each rotated at its absolute position.
class PerBaseKeyCache {
public:
    explicit PerBaseKeyCache(std::shared_ptr<const RopeAngleSet> angles)
        : angles_(std::move(angles)), rotated_(angles_->num_experts()) {}

    void append(std::span<const double> k_new, std::int64_t position) {
        if (position != static_cast<std::int64_t>(raw_.size()))
            throw StateError("cache append at position " + std::to_string(position) + ", expected " +
                             std::to_string(raw_.size()));
        if (static_cast<int>(k_new.size()) != angles_->head_dim)
            throw ShapeError("cache key length mismatch");
        raw_.emplace_back(k_new.begin(), k_new.end());
        for (int j = 0; j < angles_->num_experts(); ++j)
            rotated_[j].push_back(rotate(k_new, position, angles_->angles[j]));
    }

    std::int64_t size() const { return static_cast<std::int64_t>(raw_.size()); }
    const std::vector<std::vector<double>>& raw() const { return raw_; }
    const std::vector<std::vector<double>>& rotated(int expert) const { return rotated_[expert]; }
    const RopeAngleSet& angles() const { return *angles_; }

    // Mixture attention row against the cached keys for a query at `position`
    // (== size()-1 after the current key has been appended).
    MixtureRow attend(std::span<const double> q, std::int64_t position,
                      std::span<const std::vector<double>> values, const RoutingDecision& decision) const {
        if (position + 1 > size()) throw StateError("attend beyond cache size");
        const int d = angles_->head_dim;
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        const std::size_t len = static_cast<std::size_t>(position) + 1;
        MixtureRow out;
        out.attn.assign(len, 0.0);
        std::vector<double> scores(len), row(len);
        for (std::size_t r = 0; r < decision.indices.size(); ++r) {
            const int j = decision.indices[r];
            const auto rq = rotate(q, position, angles_->angles[j]);
            const auto& rk = rotated_[j];
            for (std::size_t m = 0; m < len; ++m) {
                double s = 0.0;
                for (int i = 0; i < d; ++i) s += rq[i] * rk[m][i];
                scores[m] = s * inv_sqrt_d;
            }
            detail::softmax_inplace(scores.data(), row.data(), static_cast<int>(len));
            for (std::size_t m = 0; m < len; ++m) out.attn[m] += decision.probs[r] * row[m];
        }
        out.context.assign(d, 0.0);
        for (std::size_t m = 0; m < len; ++m)
            for (int i = 0; i < d; ++i) out.context[i] += out.attn[m] * values[m][i];
        return out;
    }

private:
    std::shared_ptr<const RopeAngleSet> angles_;
    std::vector<std::vector<std::vector<double>>> rotated_; // [expert][pos][d]
    std::vector<std::vector<double>> raw_;
};

} // namespace moice
