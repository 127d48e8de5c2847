#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moice/cli.hpp"
#include "moice/rope.hpp"

namespace {

moice::RunConfig resolve_config(const std::string& config_path, const std::string& output_dir) {
    moice::RunConfig cfg;
    if (!config_path.empty()) cfg = moice::load_run_config(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MoICE: per-head routing over multiple RoPE angle sets"};
    app.require_subcommand(1);

    std::string config_path;
    std::string output_dir;
    app.add_option("--config", config_path, "JSON run configuration (strict schema)");
    app.add_option("--output-dir", output_dir, "override output directory");

    auto* wave = app.add_subcommand("waveform", "emit attention-waveform bounds as CSV");
    std::vector<double> bases = moice::shipped_base_set(7);
    int dim = 128;
    std::int64_t xmax = 4096, stride = 1;
    std::string wave_out = "waveform.csv";
    wave->add_option("--bases", bases, "rotary bases");
    wave->add_option("--dim", dim, "head dimension (even)");
    wave->add_option("--xmax", xmax, "maximum relative distance");
    wave->add_option("--stride", stride, "sampling stride");
    wave->add_option("--out", wave_out, "output CSV path");

    auto* pre = app.add_subcommand("pretrain", "train the vanilla base model from scratch");
    auto* tr = app.add_subcommand("train-routers", "router-only training on the frozen base");
    auto* ev = app.add_subcommand("eval", "position sweep over methods");
    std::vector<std::string> methods = moice::known_methods();
    ev->add_option("--methods", methods, "subset of vanilla/static_per_head/equal_weights/random_weights/moice");
    auto* ab = app.add_subcommand("ablate", "N or K ablation (train + sweep per value)");
    std::string axis = "N";
    ab->add_option("--axis", axis, "ablation axis: N or K");
    auto* trc = app.add_subcommand("trace", "routing trace of the trained model as JSONL");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (wave->parsed()) {
            moice::cmd_waveform(bases, dim, xmax, stride, wave_out);
        } else {
            const moice::RunConfig cfg = resolve_config(config_path, output_dir);
            if (pre->parsed()) moice::cmd_pretrain(cfg);
            if (tr->parsed()) moice::cmd_train_routers(cfg);
            if (ev->parsed()) moice::cmd_eval(cfg, methods);
            if (ab->parsed()) moice::cmd_ablate(cfg, axis);
            if (trc->parsed()) moice::cmd_trace(cfg);
        }
    } catch (const moice::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
