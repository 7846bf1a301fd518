#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "rbsde/rbsde.hpp"

using namespace rbsde;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::optional<std::string> out_dir;
};

int run_pipeline(const std::string& path, const Globals& g, std::optional<std::vector<Stage>> pipeline)
{
    ExperimentConfig cfg;
    try {
        cfg = load_config(path, g.seed, g.threads);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return exit_config_error;
    }
    if (g.out_dir) cfg.output_dir = *g.out_dir;
    if (pipeline) cfg.pipeline = *pipeline;
    const auto res = run_experiment(cfg);
    for (const auto& [name, node] : res.report["stages"].items()) {
        std::cout << name << ": " << node.value("status", "?");
        if (node.contains("error")) std::cout << " (" << node["error"].get<std::string>() << ')';
        std::cout << '\n';
    }
    if (res.report["stages"].contains("solve-bsde") && res.report["stages"]["solve-bsde"].contains("Y0")) {
        const auto& y = res.report["stages"]["solve-bsde"]["Y0"];
        std::printf("Y0 = %.6f +- %.6f (certificate)\n", y["value"].get<double>(), y["error_bound"].get<double>());
    }
    std::cout << "report: " << (std::filesystem::path(cfg.output_dir) / "report.json").string() << '\n';
    return res.exit_code;
}

int zoo_listing()
{
    for (const auto& z : zoo_list()) {
        std::cout << z.name << "\n  " << z.description << "\n  oracle: " << to_string(z.known.provenance);
        if (z.known.value) std::cout << " (" << *z.known.value << ')';
        std::cout << "; bsde-stage: " << z.bsde_stage << '\n';
        if (!z.caveat.empty()) std::cout << "  caveat: " << z.caveat << '\n';
    }
    return exit_pass;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"randomized-control BSDE solver and HJB oracle"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "master seed (overrides the config)");
    app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--out-dir", g.out_dir, "output directory (overrides the config)");

    std::string config;
    struct Sub {
        const char* name;
        const char* help;
        std::optional<std::vector<Stage>> stages;
    };
    const std::vector<Sub> subs{
        {"validate", "check the standing assumptions", std::vector{Stage::validate}},
        {"simulate", "simulate the randomized forward system", std::vector{Stage::validate, Stage::simulate}},
        {"solve-bsde", "solve the penalized BSDE along the schedule", std::vector{Stage::validate, Stage::solve_bsde}},
        {"solve-hjb", "solve the HJB equation by finite differences", std::vector{Stage::validate, Stage::solve_hjb}},
        {"compare", "BSDE value against the HJB oracle",
         std::vector{Stage::validate, Stage::solve_bsde, Stage::solve_hjb, Stage::compare}},
        {"run", "run the pipeline of the config", std::nullopt},
    };
    std::vector<CLI::App*> handles;
    for (const auto& s : subs) {
        auto* sc = app.add_subcommand(s.name, s.help);
        sc->add_option("config", config, "JSON config file")->required();
        handles.push_back(sc);
    }
    auto* zoo = app.add_subcommand("zoo", "problem zoo");
    zoo->require_subcommand(1);
    auto* zoo_ls = zoo->add_subcommand("list", "list zoo problems");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : exit_config_error;
    }
    if (*zoo_ls) return zoo_listing();
    for (std::size_t i = 0; i < subs.size(); ++i)
        if (*handles[i]) return run_pipeline(config, g, subs[i].stages);
    return exit_config_error;
}
