// Command-line front end: run <config>, report <dir>, selftest.
// Exit codes: 0 success, 2 validation error, 3 numerical divergence,
// 4 verification verdict FAIL.

#include "CLI11.hpp"

#include "config.hpp"
#include "experiments.hpp"
#include "mfl/common.hpp"
#include "report.hpp"

#include <cstdint>
#include <iostream>
#include <string>

int main(int argc, char** argv) {
    CLI::App app{"particle-flow laboratory for factored shallow models"};
    app.require_subcommand(1);

    std::string config_path, out_override, run_dir;
    std::uint64_t seed_override = 0;
    int threads_override = -1;

    CLI::App* run = app.add_subcommand("run", "execute an experiment from a config file");
    run->add_option("config", config_path, "path to the JSON config")->required();
    CLI::Option* seed_opt = run->add_option("--seed", seed_override, "override the config seed");
    run->add_option("--threads", threads_override, "cap worker threads (0 = hardware count)");
    run->add_option("--output", out_override, "override the output directory");

    CLI::App* rep = app.add_subcommand("report", "summarize a finished run directory");
    rep->add_option("dir", run_dir, "run directory containing manifest.json")->required();

    CLI::App* self = app.add_subcommand("selftest", "run the transport-distance oracle suite");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            mflab::ExperimentConfig cfg = mflab::load_config(config_path);
            if (seed_opt->count() > 0) cfg.seed = seed_override;
            if (threads_override >= 0) cfg.threads = threads_override;
            if (!out_override.empty()) cfg.output = out_override;
            return mflab::run_experiment(cfg);
        }
        if (rep->parsed()) return mflab::report_run(run_dir);
        if (self->parsed()) return mflab::run_w2_selftest("");
    } catch (const mfl::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << std::endl;
        return 3;
    } catch (const mfl::ValidationError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 0;
}
