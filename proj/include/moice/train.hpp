#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "moice/errors.hpp"
#include "moice/model.hpp"
#include "moice/rng.hpp"
#include "moice/tensor.hpp"

namespace moice {

struct TrainConfig {
    double alpha = 0.3;
    double lr_max = 1e-4;
    double warmup_frac = 0.2;
    int batch_size = 128;
    int epochs = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
        if (warmup_frac < 0.0 || warmup_frac > 1.0) throw ConfigError("warmup_frac must be in [0,1]");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (lr_max < 0.0) throw ConfigError("lr_max must be >= 0");
    }
};

// Selection frequency F and routed probability mass P per expert, averaged
// over T x H routing units. sum(F) == K, sum(P) == 1.
struct RoutingStats {
    std::vector<double> F;
    std::vector<double> P;
    std::int64_t t_count = 0;
    std::int64_t h_count = 0;
};

inline RoutingStats accumulate_stats(std::span<const RoutingDecision> decisions, int n_experts,
                                     std::int64_t t_count, std::int64_t h_count) {
    if (decisions.empty()) throw StateError("accumulate_stats on an empty batch");
    if (t_count * h_count != static_cast<std::int64_t>(decisions.size()))
        throw StateError("decision count does not factor as T x H");
    RoutingStats s;
    s.F.assign(n_experts, 0.0);
    s.P.assign(n_experts, 0.0);
    s.t_count = t_count;
    s.h_count = h_count;
    for (const auto& d : decisions)
        for (std::size_t r = 0; r < d.indices.size(); ++r) {
            s.F[d.indices[r]] += 1.0;
            s.P[d.indices[r]] += d.probs[r];
        }
    const double inv = 1.0 / static_cast<double>(decisions.size());
    for (auto& v : s.F) v *= inv;
    for (auto& v : s.P) v *= inv;
    return s;
}

// alpha * N * sum_j F_j P_j (Switch-style load balancing; F is a constant
// during differentiation).
inline double aux_loss(const RoutingStats& stats, double alpha, int n_experts) {
    if (static_cast<int>(stats.F.size()) != n_experts) throw ShapeError("stats size vs N mismatch");
    double dot = 0.0;
    for (int j = 0; j < n_experts; ++j) dot += stats.F[j] * stats.P[j];
    return alpha * n_experts * dot;
}

inline double total_loss(const TensorPtr& logits, const std::vector<int>& targets,
                         const RoutingStats& stats, double alpha, int n_experts) {
    auto nll = cross_entropy(nullptr, logits, targets);
    return nll->data[0] + aux_loss(stats, alpha, n_experts);
}

// On-tape routed probability mass: P_j = (1/units) sum over all routing units
// of the probability assigned to expert j. Units span every (position, head)
// pair across all layers of the forward pass.
inline TensorPtr routed_probability_mass(Tape* tape, const std::vector<std::vector<HeadRouting>>& routing,
                                         int n_experts) {
    std::int64_t units = 0;
    bool tracked = false;
    for (const auto& layer : routing)
        for (const auto& hr : layer) {
            units += hr.probs->shape[0];
            tracked = tracked || (tape && hr.probs->requires_grad);
        }
    if (units == 0) throw StateError("no routing units recorded");
    auto out = Tensor::zeros({n_experts}, tracked);
    const double inv = 1.0 / static_cast<double>(units);
    for (const auto& layer : routing)
        for (const auto& hr : layer) {
            const int T = hr.probs->shape[0], k = hr.probs->shape[1];
            for (int t = 0; t < T; ++t)
                for (int r = 0; r < k; ++r)
                    out->data[(*hr.idx)[static_cast<std::size_t>(t) * k + r]] += inv * hr.probs->at(t, r);
        }
    if (tracked) {
        auto held = std::make_shared<std::vector<std::vector<HeadRouting>>>(routing);
        tape->record([held, out, inv] {
            for (const auto& layer : *held)
                for (const auto& hr : layer) {
                    if (!hr.probs->requires_grad) continue;
                    const int T = hr.probs->shape[0], k = hr.probs->shape[1];
                    for (int t = 0; t < T; ++t)
                        for (int r = 0; r < k; ++r)
                            hr.probs->grow(t)[r] +=
                                inv * out->grad[(*hr.idx)[static_cast<std::size_t>(t) * k + r]];
                }
        });
    }
    return out;
}

// Flattens the per-position decisions of a forward pass.
inline std::vector<RoutingDecision> collect_decisions(const std::vector<std::vector<HeadRouting>>& routing) {
    std::vector<RoutingDecision> out;
    for (const auto& layer : routing)
        for (const auto& hr : layer)
            out.insert(out.end(), hr.decisions.begin(), hr.decisions.end());
    return out;
}

// Linear warmup to lr_max over warmup_frac of the run, then cosine decay that
// reaches zero on the final step.
inline double lr_schedule(int step, int total_steps, const TrainConfig& cfg) {
    if (step < 0 || step >= total_steps) throw InputError("lr_schedule step outside [0, total_steps)");
    const int warmup = static_cast<int>(std::llround(cfg.warmup_frac * total_steps));
    if (step < warmup) return cfg.lr_max * static_cast<double>(step) / warmup;
    const int tail = total_steps - 1 - warmup;
    if (tail <= 0) return cfg.lr_max;
    const double frac = static_cast<double>(step - warmup) / tail;
    return cfg.lr_max * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<TensorPtr> params, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            if (!p->requires_grad) throw StateError("optimizer given a frozen parameter");
            slots_.push_back({std::vector<double>(p->data.size(), 0.0),
                              std::vector<double>(p->data.size(), 0.0)});
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            auto& s = slots_[i];
            for (std::size_t j = 0; j < p.data.size(); ++j) {
                const double g = p.grad[j];
                s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * g;
                s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * g * g;
                p.data[j] -= lr * (s.m[j] / bc1) / (std::sqrt(s.v[j] / bc2) + eps_);
            }
        }
    }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<TensorPtr> params_;
    std::vector<Slot> slots_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

struct StepRecord {
    int step = 0;
    double lr = 0.0;
    double nll = 0.0;
    double aux = 0.0;
    double f_entropy = 0.0;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    double heldout_nll_before = 0.0;
    double heldout_nll_after = 0.0;
    std::vector<std::string> notes;
};

// Mean per-sequence NLL over a held-out set (pure forward, learned routing).
inline double heldout_nll(const Model& m, std::span<const std::vector<int>> sequences) {
    if (sequences.empty()) throw StateError("held-out set is empty");
    double total = 0.0;
    for (const auto& seq : sequences) {
        const int T = static_cast<int>(seq.size());
        if (T < 2) throw InputError("sequence too short for next-token loss");
        auto res = forward(m, nullptr, seq);
        auto pred = row_slice(nullptr, res.logits, 0, T - 1);
        total += cross_entropy(nullptr, pred, std::vector<int>(seq.begin() + 1, seq.end()))->data[0];
    }
    return total / static_cast<double>(sequences.size());
}

namespace detail {

inline double f_entropy(const RoutingStats& stats) {
    double sum = std::accumulate(stats.F.begin(), stats.F.end(), 0.0);
    if (sum <= 0.0) return 0.0;
    double h = 0.0;
    for (double f : stats.F) {
        if (f <= 0.0) continue;
        const double p = f / sum;
        h -= p * std::log(p);
    }
    return h;
}

} // namespace detail

// Shared optimization loop. Only the selected partition receives gradients
// and updates; everything else is untouched by construction.
inline TrainReport run_training(Model& m, std::span<const std::vector<int>> train_seqs,
                                std::span<const std::vector<int>> heldout_seqs, const TrainConfig& cfg,
                                TrainablePartition part) {
    cfg.validate();
    if (train_seqs.empty()) throw StateError("empty training set");
    const int N = m.config.n_experts;
    const int K = m.config.k_selected;

    set_trainable(m, part);
    std::vector<TensorPtr> trainable;
    for (auto& e : named_params(m))
        if (e.tensor->requires_grad) trainable.push_back(e.tensor);
    if (trainable.empty()) throw StateError("selected partition has no parameters");

    TrainReport report;
    if (cfg.alpha > 0.0 && K == N)
        report.notes.push_back("K == N saturates expert selection: the load-balancing term is the constant "
                               "alpha*N and contributes no gradient; the training signal is the NLL alone.");
    if (!heldout_seqs.empty()) report.heldout_nll_before = heldout_nll(m, heldout_seqs);

    const int n = static_cast<int>(train_seqs.size());
    const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = cfg.epochs * steps_per_epoch;

    AdamOptimizer opt(trainable);
    Rng shuffle_rng(cfg.seed);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
        for (int b = 0; b < steps_per_epoch; ++b, ++step) {
            const int lo = b * cfg.batch_size;
            const int hi = std::min(n, lo + cfg.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(hi - lo);
            opt.zero_grad();

            double nll_sum = 0.0, aux_sum = 0.0;
            std::vector<RoutingDecision> batch_decisions;
            std::int64_t batch_tokens = 0;
            for (int s = lo; s < hi; ++s) {
                const auto& seq = train_seqs[order[s]];
                const int T = static_cast<int>(seq.size());
                if (T < 2) throw InputError("sequence too short for next-token loss");
                Tape tape;
                auto res = forward(m, &tape, seq);
                auto pred = row_slice(&tape, res.logits, 0, T - 1);
                auto nll = cross_entropy(&tape, pred, std::vector<int>(seq.begin() + 1, seq.end()));

                auto decisions = collect_decisions(res.routing);
                auto stats = accumulate_stats(decisions, N, T,
                                              static_cast<std::int64_t>(decisions.size()) / T);
                double f_sum = std::accumulate(stats.F.begin(), stats.F.end(), 0.0);
                double p_sum = std::accumulate(stats.P.begin(), stats.P.end(), 0.0);
                if (std::abs(f_sum - K) > 1e-9 || std::abs(p_sum - 1.0) > 1e-9)
                    throw StateError("routing stats violate sum(F)=K / sum(P)=1 at step " +
                                     std::to_string(step));

                auto P = routed_probability_mass(&tape, res.routing, N);
                std::vector<double> fw(stats.F);
                for (auto& v : fw) v *= cfg.alpha * N;
                auto aux = weighted_sum(&tape, P, fw);
                auto loss = scale(&tape, add(&tape, nll, aux), inv_batch);
                if (!std::isfinite(nll->data[0]) || !std::isfinite(aux->data[0]))
                    throw StateError("non-finite loss at step " + std::to_string(step) + " (nll=" +
                                     std::to_string(nll->data[0]) + ", aux=" +
                                     std::to_string(aux->data[0]) + ")");
                nll_sum += nll->data[0];
                aux_sum += aux->data[0];
                batch_decisions.insert(batch_decisions.end(), decisions.begin(), decisions.end());
                batch_tokens += T;
                tape.backward(loss);
            }

            const auto batch_stats = accumulate_stats(batch_decisions, N, batch_tokens,
                                                      static_cast<std::int64_t>(batch_decisions.size()) /
                                                          batch_tokens);
            const double lr = lr_schedule(step, total_steps, cfg);
            opt.step(lr);
            report.steps.push_back({step, lr, nll_sum * inv_batch, aux_sum * inv_batch,
                                    detail::f_entropy(batch_stats)});
        }
    }

    if (!heldout_seqs.empty()) report.heldout_nll_after = heldout_nll(m, heldout_seqs);
    return report;
}

inline TrainReport train_routers(Model& m, std::span<const std::vector<int>> train_seqs,
                                 std::span<const std::vector<int>> heldout_seqs, const TrainConfig& cfg) {
    return run_training(m, train_seqs, heldout_seqs, cfg, TrainablePartition::Routers);
}

inline TrainReport pretrain_base(Model& m, std::span<const std::vector<int>> train_seqs,
                                 std::span<const std::vector<int>> heldout_seqs, const TrainConfig& cfg) {
    return run_training(m, train_seqs, heldout_seqs, cfg, TrainablePartition::BaseWeights);
}

} // namespace moice
