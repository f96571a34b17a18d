#include "bregbayes/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <utility>

using namespace bregbayes;

namespace {

void print_summary(const ExperimentResult& result) {
    for (const auto& r : result.checks) std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << '\n';
    std::cout << (result.passed ? "all checks passed" : "some checks failed") << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MAP and CM estimation with Bregman-cost verification"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    const std::pair<const char*, const char*> commands[] = {
        {"map", "solve for the MAP estimate and report the optimality residual"},
        {"cm", "sample the posterior and report the CM estimate with diagnostics"},
        {"oracle", "quadrature mean and its node-doubling check (n <= 3)"},
        {"verify", "run the configured estimator checks"},
        {"compare", "compare the Bregman risk of the CM and MAP estimates"},
    };
    for (const auto& [name, description] : commands) {
        CLI::App* sub = app.add_subcommand(name, description);
        sub->add_option("--config", config_path, "experiment configuration (JSON)")->required();
        sub->add_option("--out", out_dir, "output directory (overrides output.dir)");
        sub->add_option("--seed", seed, "master seed (overrides seed)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitPass : kExitConfig;
    }

    const CLI::App* sub = app.get_subcommands().front();
    try {
        const Command command = command_from_string(sub->get_name());
        ExperimentConfig cfg = load_config(config_path);
        if (sub->count("--out")) cfg.output_dir = out_dir;
        if (sub->count("--seed")) cfg.seed = seed;
        const ExperimentResult result = run_experiment(command, cfg);
        print_summary(result);
        return result.passed ? kExitPass : kExitCheckFailed;
    } catch (const ConfigError& e) {
        std::cerr << "invalid configuration:\n";
        for (const auto& v : e.violations()) std::cerr << "  " << v << '\n';
        return kExitConfig;
    } catch (const UnsupportedError& e) {
        std::cerr << "unsupported: " << e.what() << '\n';
        return kExitConfig;
    } catch (const InputError& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}
