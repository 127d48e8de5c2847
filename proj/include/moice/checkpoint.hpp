#pragma once

#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moice/errors.hpp"
#include "moice/model.hpp"

namespace moice {

inline void reject_unknown_keys(const nlohmann::json& obj, std::span<const char* const> allowed,
                                const std::string& where) {
    std::string bad;
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed)
            if (it.key() == a) {
                ok = true;
                break;
            }
        if (!ok) bad += (bad.empty() ? "" : ", ") + it.key();
    }
    if (!bad.empty()) throw ConfigError("unknown key(s) in " + where + ": " + bad);
}

inline nlohmann::json config_to_json(const ToyTransformerConfig& c) {
    return {{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
            {"head_dim", c.head_dim},   {"vocab_size", c.vocab_size},
            {"ff_mult", c.ff_mult},     {"max_seq_len", c.max_seq_len},
            {"n_experts", c.n_experts}, {"k_selected", c.k_selected},
            {"base_set", c.base_set},   {"seed", c.seed}};
}

inline ToyTransformerConfig config_from_json(const nlohmann::json& j) {
    static constexpr const char* keys[] = {"n_layers",    "n_heads",   "head_dim",
                                           "vocab_size",  "ff_mult",   "max_seq_len",
                                           "n_experts",   "k_selected", "base_set",
                                           "seed"};
    reject_unknown_keys(j, keys, "model config");
    ToyTransformerConfig c;
    try {
        if (j.contains("n_layers")) c.n_layers = j.at("n_layers").get<int>();
        if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<int>();
        if (j.contains("head_dim")) c.head_dim = j.at("head_dim").get<int>();
        if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<int>();
        if (j.contains("ff_mult")) c.ff_mult = j.at("ff_mult").get<int>();
        if (j.contains("max_seq_len")) c.max_seq_len = j.at("max_seq_len").get<int>();
        if (j.contains("n_experts")) c.n_experts = j.at("n_experts").get<int>();
        if (j.contains("k_selected")) c.k_selected = j.at("k_selected").get<int>();
        if (j.contains("base_set")) c.base_set = j.at("base_set").get<std::vector<double>>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    return c;
}

inline nlohmann::json checkpoint_to_json(const Model& m) {
    nlohmann::json j;
    j["format"] = "moice-checkpoint-v1";
    j["config"] = config_to_json(m.config);
    nlohmann::json params = nlohmann::json::array();
    for (const auto& e : named_params(m)) {
        params.push_back({{"name", e.name},
                          {"shape", e.tensor->shape},
                          {"frozen", !e.router},
                          {"data", e.tensor->data}});
    }
    j["params"] = std::move(params);
    return j;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot open checkpoint for writing: " + path);
    out << checkpoint_to_json(m).dump() << "\n";
}

inline Model checkpoint_from_json(const nlohmann::json& j) {
    if (!j.contains("format") || j.at("format") != "moice-checkpoint-v1")
        throw ConfigError("unrecognized checkpoint format");
    Model m = build_model(config_from_json(j.at("config")));
    std::map<std::string, TensorPtr> by_name;
    for (auto& e : named_params(m)) by_name[e.name] = e.tensor;
    std::size_t filled = 0;
    for (const auto& p : j.at("params")) {
        const std::string name = p.at("name").get<std::string>();
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ConfigError("checkpoint has unexpected parameter " + name);
        auto shape = p.at("shape").get<std::vector<int>>();
        if (shape != it->second->shape) throw ConfigError("checkpoint shape mismatch at " + name);
        auto data = p.at("data").get<std::vector<double>>();
        if (data.size() != it->second->data.size())
            throw ConfigError("checkpoint data length mismatch at " + name);
        it->second->data = std::move(data);
        ++filled;
    }
    if (filled != by_name.size()) throw ConfigError("checkpoint is missing parameters");
    return m;
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint parse failure: " + std::string(e.what()));
    }
    return checkpoint_from_json(j);
}

// Serialized bytes of the frozen partition only; the router-only training
// guarantee is checked by comparing these before/after.
inline std::string frozen_bytes(const Model& m) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : named_params(m))
        if (!e.router) arr.push_back({{"name", e.name}, {"data", e.tensor->data}});
    return arr.dump();
}

} // namespace moice
