#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moice/bench.hpp"
#include "moice/checkpoint.hpp"
#include "moice/errors.hpp"
#include "moice/model.hpp"
#include "moice/rope.hpp"
#include "moice/train.hpp"

namespace moice {

struct BenchRunConfig {
    std::uint64_t seed = 7;
    int seq_len = 256;
    int n_train = 1024;
    int n_eval = 600;
    std::vector<int> positions = {16, 64, 128, 192, 240};
};

struct RunConfig {
    ToyTransformerConfig model;   // the MoICE host (pretraining uses model.vanilla())
    TrainConfig pretrain;         // base-model training from scratch
    TrainConfig train;            // router-only phase
    BenchRunConfig bench;
    std::string output_dir = "out";

    RunConfig() {
        pretrain.alpha = 0.0;
        pretrain.lr_max = 3e-3;
        pretrain.warmup_frac = 0.1;
        pretrain.batch_size = 16;
        pretrain.epochs = 3;
    }
};

inline TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults,
                                          const std::string& where) {
    static constexpr const char* keys[] = {"alpha", "lr_max", "warmup_frac", "batch_size", "epochs", "seed"};
    reject_unknown_keys(j, keys, where);
    TrainConfig c = defaults;
    try {
        if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
        if (j.contains("lr_max")) c.lr_max = j.at("lr_max").get<double>();
        if (j.contains("warmup_frac")) c.warmup_frac = j.at("warmup_frac").get<double>();
        if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
        if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return c;
}

inline BenchRunConfig bench_config_from_json(const nlohmann::json& j, const BenchRunConfig& defaults) {
    static constexpr const char* keys[] = {"seed", "seq_len", "n_train", "n_eval", "positions"};
    reject_unknown_keys(j, keys, "bench config");
    BenchRunConfig c = defaults;
    try {
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("seq_len")) c.seq_len = j.at("seq_len").get<int>();
        if (j.contains("n_train")) c.n_train = j.at("n_train").get<int>();
        if (j.contains("n_eval")) c.n_eval = j.at("n_eval").get<int>();
        if (j.contains("positions")) c.positions = j.at("positions").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bench config: ") + e.what());
    }
    return c;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    static constexpr const char* keys[] = {"model", "pretrain", "train", "bench", "output_dir"};
    reject_unknown_keys(j, keys, "run config");
    RunConfig c;
    if (j.contains("model")) c.model = config_from_json(j.at("model"));
    if (j.contains("pretrain")) c.pretrain = train_config_from_json(j.at("pretrain"), c.pretrain, "pretrain config");
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train, "train config");
    if (j.contains("bench")) c.bench = bench_config_from_json(j.at("bench"), c.bench);
    if (j.contains("output_dir")) {
        if (!j.at("output_dir").is_string()) throw ConfigError("output_dir must be a string");
        c.output_dir = j.at("output_dir").get<std::string>();
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse failure: " + std::string(e.what()));
    }
    return run_config_from_json(j);
}

namespace paths {
inline std::string base_checkpoint(const RunConfig& c) { return c.output_dir + "/base_checkpoint.json"; }
inline std::string moice_checkpoint(const RunConfig& c) { return c.output_dir + "/moice_checkpoint.json"; }
inline std::string pretrain_report(const RunConfig& c) { return c.output_dir + "/pretrain_report.jsonl"; }
inline std::string train_report(const RunConfig& c) { return c.output_dir + "/train_report.jsonl"; }
inline std::string sweep_csv(const RunConfig& c) { return c.output_dir + "/sweep.csv"; }
inline std::string summary_json(const RunConfig& c) { return c.output_dir + "/summary.json"; }
inline std::string trace_jsonl(const RunConfig& c) { return c.output_dir + "/trace.jsonl"; }
inline std::string ablation_csv(const RunConfig& c, const std::string& axis) {
    return c.output_dir + "/ablate_" + axis + ".csv";
}
} // namespace paths

namespace detail {

inline void ensure_output_dir(const RunConfig& c) {
    std::error_code ec;
    std::filesystem::create_directories(c.output_dir, ec);
    if (ec) throw ConfigError("cannot create output_dir " + c.output_dir + ": " + ec.message());
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot open " + path + " for writing");
    return out;
}

inline void write_train_report(const TrainReport& rep, const std::string& path) {
    auto out = open_out(path);
    for (const auto& note : rep.notes) out << nlohmann::json{{"note", note}}.dump() << "\n";
    out << nlohmann::json{{"heldout_nll_before", rep.heldout_nll_before}}.dump() << "\n";
    for (const auto& s : rep.steps)
        out << nlohmann::json{{"step", s.step},
                              {"lr", s.lr},
                              {"nll", s.nll},
                              {"aux", s.aux},
                              {"F_entropy", s.f_entropy}}
                   .dump()
            << "\n";
    out << nlohmann::json{{"heldout_nll_after", rep.heldout_nll_after}}.dump() << "\n";
}

inline std::string format_acc(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline NeedleCorpus corpus_for(const RunConfig& c) {
    return gen_needle_corpus(c.bench.seed, c.bench.seq_len, c.bench.n_train, c.bench.n_eval,
                             c.bench.positions, c.model.vocab_size);
}

} // namespace detail

// waveform: CSV of bound values, columns (base, x, bound)
inline void cmd_waveform(std::span<const double> bases, int dim, std::int64_t x_max, std::int64_t stride,
                         const std::string& out_path) {
    auto out = detail::open_out(out_path);
    out << "base,x,bound\n";
    char buf[64];
    for (double b : bases) {
        auto profile = waveform_profile(b, dim, x_max, stride);
        for (const auto& s : profile.samples) {
            std::snprintf(buf, sizeof(buf), "%.17g,%lld,%.17g", b, static_cast<long long>(s.x), s.bound);
            out << buf << "\n";
        }
    }
}

// Pretraining recipe for the vanilla base: a large fresh short-context corpus
// first (the retrieval circuit forms reliably there), then one adaptation
// epoch at the target context length. cfg.pretrain governs the first stage;
// the second runs at a third of its peak rate. Both corpora derive from
// bench.seed.
inline Model pretrain_vanilla_base(const RunConfig& cfg, TrainReport* report_out = nullptr) {
    cfg.model.validate();
    cfg.pretrain.validate();
    auto corpus = detail::corpus_for(cfg);
    Model base = build_model(cfg.model.vanilla());

    const int warm_len = std::min(64, cfg.bench.seq_len);
    std::vector<int> warm_positions;
    for (int p : {warm_len / 16, warm_len / 4, warm_len / 2, warm_len - 16})
        warm_positions.push_back(std::clamp(p, 0, warm_len - 3));
    const int warm_count = std::max(256, 4 * cfg.bench.n_train);
    auto warm = gen_needle_corpus(cfg.bench.seed ^ 0x77a3c0deULL, warm_len, warm_count, 1,
                                  warm_positions, cfg.model.vocab_size);
    std::vector<std::vector<int>> warm_seqs;
    warm_seqs.reserve(warm.train.size());
    for (const auto& t : warm.train) warm_seqs.push_back(t.train_sequence());

    std::vector<std::vector<int>> train_seqs;
    train_seqs.reserve(corpus.train.size());
    for (const auto& t : corpus.train) train_seqs.push_back(t.train_sequence());
    std::vector<std::vector<int>> heldout;
    const std::size_t n_heldout = std::min<std::size_t>(corpus.eval.size(), 64);
    for (std::size_t i = 0; i < n_heldout; ++i) heldout.push_back(corpus.eval[i].train_sequence());

    auto warm_report = pretrain_base(base, warm_seqs, {}, cfg.pretrain);
    TrainConfig adapt = cfg.pretrain;
    adapt.lr_max = cfg.pretrain.lr_max / 9.0;
    adapt.epochs = 1;
    auto adapt_report = pretrain_base(base, train_seqs, heldout, adapt);
    set_trainable(base, TrainablePartition::None);

    if (report_out) {
        TrainReport merged = std::move(warm_report);
        const int offset = merged.steps.empty() ? 0 : merged.steps.back().step + 1;
        for (auto s : adapt_report.steps) {
            s.step += offset;
            merged.steps.push_back(s);
        }
        merged.heldout_nll_before = adapt_report.heldout_nll_before;
        merged.heldout_nll_after = adapt_report.heldout_nll_after;
        for (auto& n : adapt_report.notes) merged.notes.push_back(std::move(n));
        *report_out = std::move(merged);
    }
    return base;
}

// pretrain: train the vanilla base from scratch on the needle corpora, freeze it
inline void cmd_pretrain(const RunConfig& cfg) {
    detail::ensure_output_dir(cfg);
    TrainReport report;
    Model base = pretrain_vanilla_base(cfg, &report);
    save_checkpoint(base, paths::base_checkpoint(cfg));
    detail::write_train_report(report, paths::pretrain_report(cfg));
}

// train-routers: attach MoICE routers to the frozen base and optimize them only
inline void cmd_train_routers(const RunConfig& cfg) {
    cfg.model.validate();
    cfg.train.validate();
    detail::ensure_output_dir(cfg);
    auto corpus = detail::corpus_for(cfg);
    Model base = load_checkpoint(paths::base_checkpoint(cfg));
    TrainReport report;
    Model m = train_moice_from_base(base, cfg.model, corpus, cfg.train, &report);
    set_trainable(m, TrainablePartition::None);
    save_checkpoint(m, paths::moice_checkpoint(cfg));
    detail::write_train_report(report, paths::train_report(cfg));
}

// eval: position sweep for each requested method, persisted as CSV + summary JSON
inline void cmd_eval(const RunConfig& cfg, std::span<const std::string> methods) {
    detail::ensure_output_dir(cfg);
    auto corpus = detail::corpus_for(cfg);
    Model base = load_checkpoint(paths::base_checkpoint(cfg));
    Model m = load_checkpoint(paths::moice_checkpoint(cfg));
    auto rows = compare_methods(base, m, corpus.eval, methods, cfg.bench.seed);

    auto csv = detail::open_out(paths::sweep_csv(cfg));
    csv << "method,position,accuracy\n";
    for (const auto& r : rows)
        for (const auto& [pos, acc] : r.report.accuracy)
            csv << r.method << "," << pos << "," << detail::format_acc(acc) << "\n";

    nlohmann::json summary;
    for (const auto& r : rows)
        summary[r.method] = {{"avg", r.report.average}, {"gap", r.report.gap}};
    auto js = detail::open_out(paths::summary_json(cfg));
    js << summary.dump(2) << "\n";
}

// trace: routing decisions of the trained model over one eval context
inline void cmd_trace(const RunConfig& cfg) {
    detail::ensure_output_dir(cfg);
    auto corpus = detail::corpus_for(cfg);
    if (corpus.eval.empty()) throw ConfigError("trace needs a non-empty eval set");
    Model m = load_checkpoint(paths::moice_checkpoint(cfg));
    const auto& tokens = corpus.eval.front().context;
    auto records = routing_trace(m, tokens);
    auto out = detail::open_out(paths::trace_jsonl(cfg));
    for (const auto& r : records)
        out << nlohmann::json{{"layer", r.layer},       {"head", r.head},
                              {"position", r.position}, {"token_id", r.token_id},
                              {"indices", r.indices},   {"probs", r.probs}}
                   .dump()
            << "\n";
}

// ablate: one training + sweep run per axis value
inline void cmd_ablate(const RunConfig& cfg, const std::string& axis) {
    detail::ensure_output_dir(cfg);
    auto corpus = detail::corpus_for(cfg);
    Model base = load_checkpoint(paths::base_checkpoint(cfg));
    std::vector<int> values;
    if (axis == "N")
        values = {1, 3, 5, 7, 9};
    else if (axis == "K")
        values = {1, 3, 5, 7};
    else
        throw ConfigError("ablation axis must be 'N' or 'K'");
    auto rows = ablate(base, corpus, cfg.train, axis, values);
    auto out = detail::open_out(paths::ablation_csv(cfg, axis));
    out << "axis,value,position,accuracy,avg,gap\n";
    for (const auto& r : rows)
        for (const auto& [pos, acc] : r.report.accuracy)
            out << r.axis << "," << r.value << "," << pos << "," << detail::format_acc(acc) << ","
                << detail::format_acc(r.report.average) << "," << detail::format_acc(r.report.gap) << "\n";
}

} // namespace moice
