#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "moice/errors.hpp"
#include "moice/model.hpp"
#include "moice/rng.hpp"
#include "moice/train.hpp"

namespace moice {

// Token-space layout for synthetic retrieval: one marker token, a small
// answer vocabulary, and a disjoint filler vocabulary.
struct NeedleVocab {
    int marker = 1;
    int answer_lo = 2, answer_hi = 18; // [lo, hi)
    int filler_lo = 18, filler_hi = 64;

    int answer_count() const { return answer_hi - answer_lo; }
    int filler_count() const { return filler_hi - filler_lo; }

    static NeedleVocab for_vocab_size(int v) {
        if (v < 8) throw ConfigError("needle tasks need vocab_size >= 8");
        NeedleVocab nv;
        nv.marker = 1;
        const int answers = std::clamp((v - 2) / 3, 2, 16);
        nv.answer_lo = 2;
        nv.answer_hi = 2 + answers;
        nv.filler_lo = nv.answer_hi;
        nv.filler_hi = v;
        return nv;
    }
};

// [filler..., MARKER, answer, filler..., MARKER]; the trailing marker is the
// query and the answer token appears nowhere else.
struct NeedleTask {
    std::vector<int> context;
    int needle_pos = 0;
    int query_token = 0;
    int answer_token = 0;

    // Next-token training sequence: the context with the answer appended.
    std::vector<int> train_sequence() const {
        std::vector<int> seq = context;
        seq.push_back(answer_token);
        return seq;
    }
};

struct NeedleCorpus {
    std::vector<NeedleTask> train;
    std::vector<NeedleTask> eval;
    NeedleVocab vocab;
    int seq_len = 0;
    std::vector<int> positions;
};

namespace detail {

inline NeedleTask make_needle_task(int seq_len, int pos, const NeedleVocab& nv, Rng& rng) {
    NeedleTask task;
    task.needle_pos = pos;
    task.query_token = nv.marker;
    task.answer_token = nv.answer_lo + static_cast<int>(rng.next_below(nv.answer_count()));
    task.context.resize(seq_len);
    for (int i = 0; i < seq_len; ++i)
        task.context[i] = nv.filler_lo + static_cast<int>(rng.next_below(nv.filler_count()));
    task.context[pos] = nv.marker;
    task.context[pos + 1] = task.answer_token;
    task.context[seq_len - 1] = nv.marker;
    return task;
}

} // namespace detail

// Deterministic corpus. Training needles sit at positions drawn uniformly
// from `positions`; the eval set is stratified round-robin across them.
inline NeedleCorpus gen_needle_corpus(std::uint64_t seed, int seq_len, int n_train, int n_eval,
                                      std::span<const int> positions, int vocab_size) {
    if (seq_len < 4) throw ConfigError("needle context needs seq_len >= 4");
    if (positions.empty()) throw ConfigError("needle positions list is empty");
    for (int p : positions) {
        if (p < 0 || p > seq_len - 2)
            throw ConfigError("needle position " + std::to_string(p) + " outside [0, L-2]");
        if (p == seq_len - 2)
            throw ConfigError("needle position L-2 would place the answer on the trailing query slot");
    }
    NeedleCorpus corpus;
    corpus.vocab = NeedleVocab::for_vocab_size(vocab_size);
    corpus.seq_len = seq_len;
    corpus.positions.assign(positions.begin(), positions.end());
    Rng rng(seed);
    corpus.train.reserve(n_train);
    for (int i = 0; i < n_train; ++i) {
        const int pos = positions[rng.next_below(positions.size())];
        corpus.train.push_back(detail::make_needle_task(seq_len, pos, corpus.vocab, rng));
    }
    corpus.eval.reserve(n_eval);
    for (int i = 0; i < n_eval; ++i) {
        const int pos = positions[i % positions.size()];
        corpus.eval.push_back(detail::make_needle_task(seq_len, pos, corpus.vocab, rng));
    }
    return corpus;
}

struct SweepReport {
    std::map<int, double> accuracy; // needle position -> fraction correct
    double gap = 0.0;               // max - min accuracy
    double average = 0.0;           // unweighted mean over positions
};

inline int eval_thread_count(std::size_t n_tasks) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("MOICE_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap >= 1) hw = std::min<unsigned>(hw, static_cast<unsigned>(cap));
    }
    return static_cast<int>(std::min<std::size_t>(hw, std::max<std::size_t>(n_tasks, 1)));
}

// Harness-level sweep driver: accuracy of an arbitrary predictor, grouped by
// needle position. Parallel over tasks; merged by task id so the thread count
// never changes the result.
inline SweepReport evaluate_sweep(const std::function<int(const NeedleTask&, std::size_t)>& predict,
                                  std::span<const NeedleTask> tasks) {
    if (tasks.empty()) throw ConfigError("evaluate_sweep on an empty task set");
    std::vector<char> correct(tasks.size(), 0);
    const int n_threads = eval_thread_count(tasks.size());
    if (n_threads <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i)
            correct[i] = predict(tasks[i], i) == tasks[i].answer_token ? 1 : 0;
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= tasks.size()) return;
                correct[i] = predict(tasks[i], i) == tasks[i].answer_token ? 1 : 0;
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    std::map<int, std::pair<std::int64_t, std::int64_t>> counts; // pos -> (correct, total)
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        auto& c = counts[tasks[i].needle_pos];
        c.first += correct[i];
        c.second += 1;
    }
    SweepReport rep;
    double lo = 1.0, hi = 0.0, sum = 0.0;
    for (const auto& [pos, c] : counts) {
        const double acc = static_cast<double>(c.first) / static_cast<double>(c.second);
        rep.accuracy[pos] = acc;
        lo = std::min(lo, acc);
        hi = std::max(hi, acc);
        sum += acc;
    }
    rep.gap = hi - lo;
    rep.average = sum / static_cast<double>(counts.size());
    return rep;
}

// Model-backed sweep: greedy next token after the trailing query.
inline SweepReport evaluate_sweep(const Model& m, std::span<const NeedleTask> tasks,
                                  const RoutingOptions& opts = {}) {
    for (const auto& t : tasks)
        for (int tok : t.context)
            if (tok < 0 || tok >= m.config.vocab_size)
                throw ConfigError("task vocabulary exceeds model vocab_size");
    auto predict = [&m, &opts](const NeedleTask& task, std::size_t task_id) {
        RoutingOptions o = opts;
        o.random_weights_seed = opts.random_weights_seed ^ (0x51f15eedULL + task_id * 0x9e3779b97f4a7c15ULL);
        auto res = forward(m, nullptr, task.context, o);
        const int T = static_cast<int>(task.context.size());
        return argmax_token(std::span<const double>(res.logits->row(T - 1), m.config.vocab_size));
    };
    return evaluate_sweep(predict, tasks);
}

// ---------------------------------------------------------------------------
// Method comparison and ablations
// ---------------------------------------------------------------------------

struct MethodReport {
    std::string method;
    SweepReport report;
};

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> methods = {"vanilla", "static_per_head", "equal_weights",
                                                     "random_weights", "moice"};
    return methods;
}

// All rows share the frozen base weights; `moice_model` carries the trained
// routers and is reused (with forced routing) for the weight-ablation rows.
inline std::vector<MethodReport> compare_methods(const Model& base_model, const Model& moice_model,
                                                 std::span<const NeedleTask> tasks,
                                                 std::span<const std::string> methods,
                                                 std::uint64_t random_weights_seed = 0) {
    std::vector<MethodReport> out;
    for (const auto& method : methods) {
        RoutingOptions opts;
        const Model* m = &moice_model;
        if (method == "vanilla") {
            m = &base_model;
        } else if (method == "static_per_head") {
            opts.mode = RoutingMode::StaticPerHead;
        } else if (method == "equal_weights") {
            opts.mode = RoutingMode::EqualWeights;
        } else if (method == "random_weights") {
            opts.mode = RoutingMode::RandomWeights;
            opts.random_weights_seed = random_weights_seed;
        } else if (method != "moice") {
            throw ConfigError("unknown method '" + method + "'");
        }
        out.push_back({method, evaluate_sweep(*m, tasks, opts)});
    }
    return out;
}

// Shared by the router-training command and the ablation driver so that equal
// seeds reproduce identical models.
inline Model train_moice_from_base(const Model& base, const ToyTransformerConfig& moice_cfg,
                                   const NeedleCorpus& corpus, const TrainConfig& train_cfg,
                                   TrainReport* report_out = nullptr) {
    Model m = attach_routers(base, moice_cfg, train_cfg.seed ^ 0x517ab1e5ULL);
    std::vector<std::vector<int>> train_seqs;
    train_seqs.reserve(corpus.train.size());
    for (const auto& t : corpus.train) train_seqs.push_back(t.train_sequence());
    std::vector<std::vector<int>> heldout;
    const std::size_t n_heldout = std::min<std::size_t>(corpus.eval.size(), 64);
    for (std::size_t i = 0; i < n_heldout; ++i) heldout.push_back(corpus.eval[i].train_sequence());
    auto report = train_routers(m, train_seqs, heldout, train_cfg);
    if (report_out) *report_out = std::move(report);
    return m;
}

struct AblationRow {
    std::string axis;
    int value = 0;
    SweepReport report;
};

// One training + sweep run per setting, common seeds across rows.
inline std::vector<AblationRow> ablate(const Model& base, const NeedleCorpus& corpus,
                                       const TrainConfig& train_cfg, const std::string& axis,
                                       std::span<const int> values) {
    std::vector<AblationRow> rows;
    for (int v : values) {
        ToyTransformerConfig cfg = base.config;
        if (axis == "N") {
            cfg.n_experts = v;
            cfg.k_selected = v;
            cfg.base_set = (v == 1) ? std::vector<double>{10000.0} : shipped_base_set(v);
        } else if (axis == "K") {
            cfg.n_experts = 7;
            cfg.base_set = shipped_base_set(7);
            cfg.k_selected = v;
        } else {
            throw ConfigError("ablation axis must be 'N' or 'K'");
        }
        cfg.validate();
        Model m = train_moice_from_base(base, cfg, corpus, train_cfg);
        rows.push_back({axis, v, evaluate_sweep(m, corpus.eval)});
    }
    return rows;
}

} // namespace moice
