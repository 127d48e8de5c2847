#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moice/errors.hpp"
#include "moice/moice.hpp"
#include "moice/rng.hpp"
#include "moice/rope.hpp"
#include "moice/tensor.hpp"

namespace moice {

struct ToyTransformerConfig {
    int n_layers = 2;
    int n_heads = 4;
    int head_dim = 32;
    int vocab_size = 64;
    int ff_mult = 4;
    int max_seq_len = 512;
    int n_experts = 7;
    int k_selected = 7;
    std::vector<double> base_set = shipped_base_set(7);
    std::uint64_t seed = 0;

    int model_dim() const { return n_heads * head_dim; }
    int ff_dim() const { return ff_mult * model_dim(); }

    void validate() const {
        if (n_layers < 1 || n_heads < 1) throw ConfigError("need at least one layer and head");
        if (head_dim < 2 || head_dim % 2 != 0) throw ConfigError("head_dim must be even and >= 2");
        if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
        if (ff_mult < 1) throw ConfigError("ff_mult must be >= 1");
        if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
        if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
        if (k_selected < 1 || k_selected > n_experts) throw ConfigError("need 1 <= K <= N");
        if (static_cast<int>(base_set.size()) != n_experts)
            throw ConfigError("base_set length must equal n_experts");
    }

    // The vanilla host: one expert at the standard base, routing degenerate.
    ToyTransformerConfig vanilla() const {
        ToyTransformerConfig c = *this;
        c.n_experts = 1;
        c.k_selected = 1;
        c.base_set = {10000.0};
        return c;
    }
};

enum class RoutingMode { Learned, EqualWeights, RandomWeights, StaticPerHead };

struct RoutingOptions {
    RoutingMode mode = RoutingMode::Learned;
    std::uint64_t random_weights_seed = 0; // only used by RandomWeights
};

struct TransformerLayer {
    TensorPtr attn_gain, wq, wk, wv, wo;
    TensorPtr ffn_gain, w_in, w_out;
    std::vector<RouterParams> routers; // one per head
};

struct Model {
    ToyTransformerConfig config;
    TensorPtr embed;   // [V x D]
    TensorPtr unembed; // [D x V]
    TensorPtr final_gain;
    std::vector<TransformerLayer> layers;
    std::shared_ptr<const RopeAngleSet> angles;
    std::shared_ptr<const RopeTables> tables;
};

struct ParamEntry {
    std::string name;
    TensorPtr tensor;
    bool router = false; // routers are the trainable partition; the rest is frozen
};

inline std::vector<ParamEntry> named_params(const Model& m) {
    std::vector<ParamEntry> out;
    out.push_back({"embed", m.embed, false});
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& ly = m.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        out.push_back({p + "attn_gain", ly.attn_gain, false});
        out.push_back({p + "wq", ly.wq, false});
        out.push_back({p + "wk", ly.wk, false});
        out.push_back({p + "wv", ly.wv, false});
        out.push_back({p + "wo", ly.wo, false});
        out.push_back({p + "ffn_gain", ly.ffn_gain, false});
        out.push_back({p + "w_in", ly.w_in, false});
        out.push_back({p + "w_out", ly.w_out, false});
        for (std::size_t h = 0; h < ly.routers.size(); ++h) {
            const std::string rp = p + "head" + std::to_string(h) + ".router.";
            out.push_back({rp + "w1", ly.routers[h].w1, true});
            out.push_back({rp + "w2", ly.routers[h].w2, true});
            out.push_back({rp + "w3", ly.routers[h].w3, true});
        }
    }
    out.push_back({"final_gain", m.final_gain, false});
    out.push_back({"unembed", m.unembed, false});
    return out;
}

enum class TrainablePartition { None, Routers, BaseWeights };

inline void set_requires_grad(const TensorPtr& t, bool on) {
    t->requires_grad = on;
    if (on)
        t->grad.assign(t->data.size(), 0.0);
    else
        t->grad.clear();
}

inline void set_trainable(Model& m, TrainablePartition part) {
    for (auto& e : named_params(m)) {
        const bool on = (part == TrainablePartition::Routers && e.router) ||
                        (part == TrainablePartition::BaseWeights && !e.router);
        set_requires_grad(e.tensor, on);
    }
}

inline TensorPtr init_matrix(int rows, int cols, double stddev, Rng& rng) {
    auto t = Tensor::zeros({rows, cols});
    for (auto& v : t->data) v = rng.normal(0.0, stddev);
    return t;
}

inline Model build_model(const ToyTransformerConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    m.angles = std::make_shared<const RopeAngleSet>(config.base_set, config.head_dim);
    m.tables = std::make_shared<const RopeTables>(*m.angles, config.max_seq_len);

    Rng rng(config.seed);
    const int D = config.model_dim(), V = config.vocab_size, F = config.ff_dim();
    const double sd = 1.0 / std::sqrt(static_cast<double>(D));
    const double sf = 1.0 / std::sqrt(static_cast<double>(F));

    m.embed = init_matrix(V, D, 0.02, rng);
    m.layers.resize(config.n_layers);
    for (auto& ly : m.layers) {
        ly.attn_gain = Tensor::from(std::vector<double>(D, 1.0), {D});
        ly.wq = init_matrix(D, D, sd, rng);
        ly.wk = init_matrix(D, D, sd, rng);
        ly.wv = init_matrix(D, D, sd, rng);
        ly.wo = init_matrix(D, D, sd, rng);
        ly.ffn_gain = Tensor::from(std::vector<double>(D, 1.0), {D});
        ly.w_in = init_matrix(D, F, sd, rng);
        ly.w_out = init_matrix(F, D, sf, rng);
        for (int h = 0; h < config.n_heads; ++h)
            ly.routers.push_back(make_router_params(config.n_experts, config.head_dim, rng, false));
    }
    m.final_gain = Tensor::from(std::vector<double>(D, 1.0), {D});
    m.unembed = init_matrix(D, V, sd, rng);
    return m;
}

// Fresh MoICE host around an existing vanilla base: frozen weights are copied
// from `base`, routers are re-initialized for the new expert set.
inline Model attach_routers(const Model& base, const ToyTransformerConfig& moice_config,
                            std::uint64_t router_seed) {
    ToyTransformerConfig cfg = moice_config;
    cfg.seed = base.config.seed;
    Model m = build_model(cfg);
    auto src = named_params(base);
    auto dst = named_params(m);
    std::map<std::string, TensorPtr> by_name;
    for (auto& e : src) by_name[e.name] = e.tensor;
    Rng rrng(router_seed);
    for (auto& e : dst) {
        if (e.router) continue;
        auto it = by_name.find(e.name);
        if (it == by_name.end() || it->second->shape != e.tensor->shape)
            throw ConfigError("base model incompatible at parameter " + e.name);
        e.tensor->data = it->second->data;
    }
    for (auto& ly : m.layers)
        for (auto& r : ly.routers) r = make_router_params(cfg.n_experts, cfg.head_dim, rrng, false);
    return m;
}

// ---------------------------------------------------------------------------
// Forward pass (tensor path)
// ---------------------------------------------------------------------------

struct HeadRouting {
    std::shared_ptr<std::vector<int>> idx; // [T*K] selected expert ids
    TensorPtr probs;                       // [T x K]
    std::vector<RoutingDecision> decisions;
};

struct ForwardResult {
    TensorPtr logits;                              // [T x V]
    std::vector<std::vector<HeadRouting>> routing; // [layer][head]
};

namespace detail {

// Random-weight routing draws one simplex point per token, shared by every
// head and layer of that forward pass.
inline std::shared_ptr<const std::vector<double>> token_random_weights(int t_count, int n_experts,
                                                                       std::uint64_t seed) {
    Rng rng(seed);
    auto w = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t_count) * n_experts);
    for (int t = 0; t < t_count; ++t) {
        double sum = 0.0;
        double* row = w->data() + static_cast<std::size_t>(t) * n_experts;
        for (int j = 0; j < n_experts; ++j) {
            double u = rng.uniform();
            while (u <= 0.0) u = rng.uniform();
            row[j] = -std::log(u);
            sum += row[j];
        }
        for (int j = 0; j < n_experts; ++j) row[j] /= sum;
    }
    return w;
}

inline HeadRouting routing_for_head(Tape* tape, const RouterParams& params, const TensorPtr& queries,
                                    int k, int head, const RoutingOptions& opts,
                                    const std::vector<double>* token_weights) {
    const int T = queries->shape[0];
    const int N = params.n_experts();
    HeadRouting hr;
    if (opts.mode == RoutingMode::Learned) {
        auto logits = router_forward(tape, params, queries); // [T x N]
        hr.idx = std::make_shared<std::vector<int>>();
        hr.idx->reserve(static_cast<std::size_t>(T) * k);
        hr.decisions.reserve(T);
        for (int t = 0; t < T; ++t) {
            auto dec = select_topk(std::span<const double>(logits->row(t), N), k);
            hr.idx->insert(hr.idx->end(), dec.indices.begin(), dec.indices.end());
            hr.decisions.push_back(std::move(dec));
        }
        auto idx = std::static_pointer_cast<const std::vector<int>>(hr.idx);
        auto sel = gather_cols_per_row(tape, logits, idx, k);
        hr.probs = softmax_rows(tape, sel);
        return hr;
    }

    // Forced modes: constant probabilities, no tape involvement.
    std::vector<int> ids;
    std::vector<double> base_probs;
    switch (opts.mode) {
        case RoutingMode::EqualWeights:
            ids.resize(N);
            std::iota(ids.begin(), ids.end(), 0);
            base_probs.assign(N, 1.0 / N);
            break;
        case RoutingMode::StaticPerHead:
            ids = {head % N};
            base_probs = {1.0};
            break;
        case RoutingMode::RandomWeights:
            ids.resize(N);
            std::iota(ids.begin(), ids.end(), 0);
            break;
        default:
            throw StateError("unreachable routing mode");
    }
    const int kk = static_cast<int>(ids.size());
    hr.idx = std::make_shared<std::vector<int>>();
    hr.idx->reserve(static_cast<std::size_t>(T) * kk);
    hr.probs = Tensor::zeros({T, kk});
    for (int t = 0; t < T; ++t) {
        hr.idx->insert(hr.idx->end(), ids.begin(), ids.end());
        std::vector<double> p = base_probs;
        if (opts.mode == RoutingMode::RandomWeights)
            p.assign(token_weights->data() + static_cast<std::size_t>(t) * N,
                     token_weights->data() + static_cast<std::size_t>(t + 1) * N);
        std::copy(p.begin(), p.end(), hr.probs->row(t));
        hr.decisions.push_back({ids, p});
    }
    return hr;
}

} // namespace detail

inline ForwardResult forward(const Model& m, Tape* tape, std::span<const int> tokens,
                             const RoutingOptions& opts = {}) {
    const auto& cfg = m.config;
    const int T = static_cast<int>(tokens.size());
    if (T < 1) throw InputError("forward needs at least one token");
    if (T > cfg.max_seq_len)
        throw InputError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw InputError("token " + std::to_string(t) + " outside vocab");

    const int d = cfg.head_dim;
    const int N = cfg.n_experts;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::shared_ptr<const std::vector<double>> token_weights;
    if (opts.mode == RoutingMode::RandomWeights)
        token_weights = detail::token_random_weights(T, N, opts.random_weights_seed);

    ForwardResult res;
    res.routing.resize(cfg.n_layers);

    auto x = embedding_rows(tape, m.embed, std::vector<int>(tokens.begin(), tokens.end()));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& ly = m.layers[l];
        auto h = rmsnorm_rows(tape, x, ly.attn_gain);
        auto q = matmul(tape, h, ly.wq);
        auto kk = matmul(tape, h, ly.wk);
        auto v = matmul(tape, h, ly.wv);
        std::vector<TensorPtr> head_ctx(cfg.n_heads);
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            auto qh = col_slice(tape, q, hd * d, d);
            auto kh = col_slice(tape, kk, hd * d, d);
            auto vh = col_slice(tape, v, hd * d, d);
            auto hr = detail::routing_for_head(tape, ly.routers[hd], qh, cfg.k_selected, hd, opts,
                                               token_weights.get());

            std::vector<bool> used(N, false);
            for (int id : *hr.idx) used[id] = true;
            std::vector<TensorPtr> attn(N);
            for (int j = 0; j < N; ++j) {
                if (!used[j]) continue;
                auto rq = rope_rows(tape, qh, m.tables, j);
                auto rk = rope_rows(tape, kh, m.tables, j);
                attn[j] = causal_softmax(tape, causal_scores(tape, rq, rk, scale));
            }
            auto idx = std::static_pointer_cast<const std::vector<int>>(hr.idx);
            auto mixed = mix_rows(tape, attn, hr.probs, idx);
            head_ctx[hd] = matmul(tape, mixed, vh);
            res.routing[l].push_back(std::move(hr));
        }
        auto ctx = col_concat(tape, std::span<const TensorPtr>(head_ctx));
        x = add(tape, x, matmul(tape, ctx, ly.wo));
        auto h2 = rmsnorm_rows(tape, x, ly.ffn_gain);
        auto f = matmul(tape, silu(tape, matmul(tape, h2, ly.w_in)), ly.w_out);
        x = add(tape, x, f);
    }
    auto hf = rmsnorm_rows(tape, x, m.final_gain);
    res.logits = matmul(tape, hf, m.unembed);
    return res;
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

class DecodeSession {
public:
    explicit DecodeSession(const Model& m, RoutingMode mode = RoutingMode::Learned) : m_(m), mode_(mode) {
        if (mode == RoutingMode::RandomWeights)
            throw ConfigError("incremental decoding does not support random-weight routing");
        caches_.resize(m.config.n_layers);
        values_.resize(m.config.n_layers);
        for (int l = 0; l < m.config.n_layers; ++l)
            for (int h = 0; h < m.config.n_heads; ++h) {
                caches_[l].emplace_back(m.angles);
                values_[l].emplace_back();
            }
    }

    std::int64_t position() const { return pos_; }

    // Feeds one token, returns the next-token logits row.
    std::vector<double> feed(int token) {
        const auto& cfg = m_.config;
        if (pos_ >= cfg.max_seq_len) throw InputError("decode beyond max_seq_len");
        if (token < 0 || token >= cfg.vocab_size) throw InputError("token outside vocab");
        const int d = cfg.head_dim;

        auto x = embedding_rows(nullptr, m_.embed, {token});
        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto& ly = m_.layers[l];
            auto h = rmsnorm_rows(nullptr, x, ly.attn_gain);
            auto q = matmul(nullptr, h, ly.wq);
            auto kk = matmul(nullptr, h, ly.wk);
            auto v = matmul(nullptr, h, ly.wv);
            std::vector<TensorPtr> head_ctx(cfg.n_heads);
            for (int hd = 0; hd < cfg.n_heads; ++hd) {
                std::span<const double> qh(q->data.data() + hd * d, d);
                std::span<const double> kh(kk->data.data() + hd * d, d);
                std::span<const double> vh(v->data.data() + hd * d, d);
                caches_[l][hd].append(kh, pos_);
                values_[l][hd].emplace_back(vh.begin(), vh.end());
                const auto dec = decide(ly.routers[hd], qh, hd);
                auto mixed = caches_[l][hd].attend(qh, pos_, values_[l][hd], dec);
                head_ctx[hd] = Tensor::from(std::move(mixed.context), {1, d});
            }
            auto ctx = col_concat(nullptr, std::span<const TensorPtr>(head_ctx));
            x = add(nullptr, x, matmul(nullptr, ctx, ly.wo));
            auto h2 = rmsnorm_rows(nullptr, x, ly.ffn_gain);
            auto f = matmul(nullptr, silu(nullptr, matmul(nullptr, h2, ly.w_in)), ly.w_out);
            x = add(nullptr, x, f);
        }
        ++pos_;
        auto hf = rmsnorm_rows(nullptr, x, m_.final_gain);
        auto logits = matmul(nullptr, hf, m_.unembed);
        return logits->data;
    }

private:
    RoutingDecision decide(const RouterParams& params, std::span<const double> qh, int head) const {
        const int N = m_.config.n_experts;
        switch (mode_) {
            case RoutingMode::Learned: {
                const auto logits = router_forward(params, qh);
                return select_topk(logits, m_.config.k_selected);
            }
            case RoutingMode::EqualWeights: {
                RoutingDecision dec;
                dec.indices.resize(N);
                std::iota(dec.indices.begin(), dec.indices.end(), 0);
                dec.probs.assign(N, 1.0 / N);
                return dec;
            }
            case RoutingMode::StaticPerHead:
                return {{head % N}, {1.0}};
            default:
                throw StateError("unsupported routing mode in decode");
        }
    }

    const Model& m_;
    RoutingMode mode_;
    std::int64_t pos_ = 0;
    std::vector<std::vector<PerBaseKeyCache>> caches_;               // [layer][head]
    std::vector<std::vector<std::vector<std::vector<double>>>> values_; // [layer][head][pos][d]
};

inline int argmax_token(std::span<const double> logits) {
    int best = 0;
    for (int v = 1; v < static_cast<int>(logits.size()); ++v)
        if (logits[v] > logits[best]) best = v;
    return best;
}

// Greedy continuation via the incremental cache path.
inline std::vector<int> generate(const Model& m, std::span<const int> prompt, int steps,
                                 RoutingMode mode = RoutingMode::Learned) {
    if (prompt.empty()) throw InputError("generate needs a non-empty prompt");
    if (static_cast<int>(prompt.size()) + steps > m.config.max_seq_len)
        throw InputError("prompt plus continuation exceeds max_seq_len");
    DecodeSession session(m, mode);
    std::vector<int> out(prompt.begin(), prompt.end());
    std::vector<double> logits;
    for (int t : prompt) logits = session.feed(t);
    for (int s = 0; s < steps; ++s) {
        const int next = argmax_token(logits);
        out.push_back(next);
        if (s + 1 < steps) logits = session.feed(next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Routing trace
// ---------------------------------------------------------------------------

struct TraceRecord {
    int layer = 0;
    int head = 0;
    int position = 0;
    int token_id = 0;
    std::vector<int> indices;
    std::vector<double> probs;
};

inline std::vector<TraceRecord> routing_trace(const Model& m, std::span<const int> tokens,
                                              const RoutingOptions& opts = {}) {
    auto res = forward(m, nullptr, tokens, opts);
    std::vector<TraceRecord> out;
    out.reserve(static_cast<std::size_t>(m.config.n_layers) * m.config.n_heads * tokens.size());
    for (int l = 0; l < m.config.n_layers; ++l)
        for (int h = 0; h < m.config.n_heads; ++h) {
            const auto& hr = res.routing[l][h];
            for (std::size_t t = 0; t < tokens.size(); ++t)
                out.push_back({l, h, static_cast<int>(t), tokens[t], hr.decisions[t].indices,
                               hr.decisions[t].probs});
        }
    return out;
}

} // namespace moice
