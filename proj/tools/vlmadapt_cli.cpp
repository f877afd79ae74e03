// Command-line front end: each pipeline stage is exposed as a subcommand,
// `run` executes the full experiment with stage caching.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "vlmadapt/experiment.hpp"
#include "vlmadapt/kernels.hpp"

using namespace vlmadapt;

int main(int argc, char** argv) {
    CLI::App app{"vlmadapt: retrieval-driven adaptation of a toy dual encoder"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::string stage;
    long long seed = -1;
    bool force = false;
    bool serial = false;

    app.add_option("--config", config_path, "experiment config (JSON)");
    app.add_option("--out", out_dir, "output directory override");
    app.add_option("--seed", seed, "experiment seed override");
    app.add_flag("--force", force, "ignore cached stage artifacts");
    app.add_flag("--serial", serial, "disable OpenMP kernels");

    CLI::App* run_cmd = app.add_subcommand("run", "execute the full stage pipeline");
    run_cmd->add_option("--stage", stage, "run a single stage only");
    run_cmd->fallthrough();
    for (const std::string& name : all_stage_names())
        app.add_subcommand(name, "run the '" + name + "' stage")->fallthrough();

    CLI11_PARSE(app, argc, argv);

    if (serial) kernels::set_mode(kernels::Mode::serial);

    try {
        ExperimentConfig cfg = config_path.empty()
                                   ? ExperimentConfig::defaults()
                                   : ExperimentConfig::from_json_file(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (seed >= 0) {
            cfg.seed = static_cast<std::uint64_t>(seed);
            cfg.synth.seed = cfg.seed;
            cfg.model.init_seed = cfg.seed;
            cfg.pretrain.seed = cfg.seed;
        }

        std::string selected = stage;
        for (const std::string& name : all_stage_names())
            if (app.get_subcommand(name)->parsed()) selected = name;

        RunReport report = run_experiment(cfg, force, selected);
        if (selected.empty() || selected == "report") {
            std::printf("config %016llx: %zu zero-shot rows, %zu coop rows\n",
                        static_cast<unsigned long long>(report.config_hash),
                        report.zeroshot_rows.size(), report.coop_rows.size());
            for (const auto& [tag, truncated] : report.truncated)
                if (truncated)
                    std::printf("note: %s trained on fewer pairs than requested\n", tag.c_str());
        }
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
