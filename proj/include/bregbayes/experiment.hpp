#pragma once

#include "bregbayes/verify.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bregbayes {

inline constexpr int kSchemaVersion = 1;

/// One entry of verify.checks. Options that do not apply to the named check
/// are rejected during parsing.
struct CheckSpec {
    std::string name;
    // map_centred_form
    double tolerance = 1e-8;
    int points = 50;
    double centre_offset = 0.0;
    // map_centred_form (pair box) and map_bayes_optimality (perturbation box)
    double radius = 0.0;
    // map_bayes_optimality
    int perturbations = 400;
    std::string cost = "map";
    // cm_bayes_optimality
    std::vector<std::string> costs = {"c1", "c2", "c3"};
    double init_offset = 0.3;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;

    std::string operator_kind = "identity";
    Index dim = 0;
    Matrix matrix;
    Vector kernel;

    NoiseModel fidelity = NoiseModel::Gaussian;
    std::optional<Vector> data;
    std::optional<Vector> truth;
    double noise_level = 1.0;
    double poisson_floor = kDefaultPoissonFloor;

    PriorKind prior = PriorKind::Tikhonov;
    double prior_scale = 1.0;
    double huber_delta = kDefaultHuberDelta;
    double alpha = 1.0;

    SolverSettings solver;
    SamplerSettings sampler;
    bool allow_unconverged = false;
    QuadratureSettings quadrature;
    double doubling_tolerance = 1e-8;

    /// auto | quadrature | mcmc
    std::string source = "auto";
    std::vector<CheckSpec> checks;
    bool checks_given = false;

    std::string output_dir = "out";
    bool write_chains = false;
};

/// Validates a configuration document. Throws ConfigError listing every
/// violation found.
ExperimentConfig parse_config(const nlohmann::json& doc);
/// Reads and parses a file; unreadable files and JSON syntax errors are
/// reported as ConfigError.
ExperimentConfig load_config(const std::string& path);
/// The configuration with every default filled in.
nlohmann::json resolved_config(const ExperimentConfig& cfg);

ForwardOperator build_operator(const ExperimentConfig& cfg);
/// f = K u* + noise drawn from the fidelity's noise model (sigma, Poisson,
/// Laplace scale). Deterministic given the seed.
Vector synthesize_data(const ExperimentConfig& cfg, std::uint64_t seed);
/// Uses cfg.data when present, synthetic data otherwise.
Posterior build_posterior(const ExperimentConfig& cfg, std::uint64_t seed);

enum class Command { Map, Cm, Oracle, Verify, Compare };

Command command_from_string(std::string_view name);
std::string_view to_string(Command command);

struct ExperimentResult {
    nlohmann::json report;
    std::vector<VerificationReport> checks;
    bool passed = false;
};

/// Runs a subcommand and writes report.json, summary.csv and optional
/// chain_<k>.csv into the output directory.
ExperimentResult run_experiment(Command command, const ExperimentConfig& cfg);

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitPass = 0, kExitCheckFailed = 1, kExitConfig = 2, kExitRuntime = 3 };

}  // namespace bregbayes
