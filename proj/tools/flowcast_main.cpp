#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "flowcast/config.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/pipeline.hpp"

namespace {

struct StageArgs {
    std::string config_path;
    std::string out_dir;
    int jobs = 0;
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowcast: voter-transition estimation from polling-station "
                 "aggregates"};
    app.require_subcommand(1);

    const std::pair<const char*, const char*> subs[] = {
        {"validate", "load and validate the configured inputs"},
        {"estimate", "fit per-zone transition estimates, flows and volatility"},
        {"covariates", "build the standardized design matrix"},
        {"model", "fit the anchor transition models and diagnostics"},
        {"report", "render tables and SVG charts from earlier stages"},
        {"simulate", "generate a synthetic two-election dataset"},
        {"pipeline", "run every configured stage in order"},
    };
    std::map<std::string, StageArgs> args;
    for (const auto& [name, desc] : subs) {
        CLI::App* sc = app.add_subcommand(name, desc);
        StageArgs& a = args[name];
        sc->add_option("--config", a.config_path, "path to the run config JSON")
            ->required();
        sc->add_option("--jobs", a.jobs,
                       "worker threads (FLOWCAST_JOBS, then the config value, "
                       "then hardware concurrency when omitted)");
        sc->add_option("--out", a.out_dir, "override the configured output directory");
    }

    CLI11_PARSE(app, argc, argv);
    std::string sub = app.get_subcommands().front()->get_name();
    const StageArgs& a = args[sub];

    try {
        flowcast::RunConfig cfg = flowcast::load_config(a.config_path);
        if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
        int jobs = flowcast::resolve_jobs(a.jobs, cfg);
        return flowcast::run_subcommand(sub, cfg, jobs, std::cout);
    } catch (const flowcast::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const flowcast::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}
