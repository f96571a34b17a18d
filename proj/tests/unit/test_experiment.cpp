#include "bregbayes/experiment.hpp"

#include "unit/helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace bregbayes;
using bregbayes::testing::vec;
using nlohmann::json;

namespace {

json minimal() {
    return json::parse(R"({
        "schema_version": 1,
        "model": {
            "operator": {"kind": "identity", "dim": 1},
            "fidelity": "gaussian",
            "data": [3.0],
            "prior": {"kind": "tikhonov"}
        }
    })");
}

std::vector<std::string> violations(const json& doc) {
    try {
        parse_config(doc);
    } catch (const ConfigError& e) {
        return e.violations();
    }
    return {};
}

bool mentions(const std::vector<std::string>& v, const std::string& text) {
    for (const auto& s : v)
        if (s.find(text) != std::string::npos) return true;
    return false;
}

std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("bregbayes_test_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("minimal config parses with defaults") {
    const ExperimentConfig cfg = parse_config(minimal());
    CHECK(cfg.dim == 1);
    CHECK(cfg.alpha == 1.0);
    CHECK(cfg.fidelity == NoiseModel::Gaussian);
    CHECK(cfg.prior == PriorKind::Tikhonov);
    CHECK(cfg.seed == 0);
    CHECK_FALSE(cfg.checks_given);
    REQUIRE(cfg.data);
    CHECK((*cfg.data)[0] == 3.0);
}

TEST_CASE("resolved config round-trips") {
    json doc = minimal();
    doc["seed"] = 99;
    doc["verify"] = {{"checks", {"compare_estimates", {{"name", "map_centred_form"}, {"points", 10}}}}};
    const json resolved = resolved_config(parse_config(doc));
    CHECK(resolved["sampler"]["iterations"] == 50000);
    CHECK(resolved["verify"]["checks"][1]["points"] == 10);
    CHECK(resolved_config(parse_config(resolved)) == resolved);
}

TEST_CASE("invalid configs are rejected with every violation") {
    json neg = minimal();
    neg["model"]["alpha"] = -1.0;
    CHECK(mentions(violations(neg), "model.alpha"));

    json len = minimal();
    len["model"]["data"] = {1.0, 2.0};
    CHECK(mentions(violations(len), "model.data"));

    json unknown = minimal();
    unknown["model"]["prior"]["sclae"] = 2.0;
    unknown["extra"] = true;
    unknown["sampler"] = {{"iterations", 10}, {"burn_in", 20}};
    unknown["model"]["alpha"] = 0.0;
    const auto v = violations(unknown);
    CHECK(mentions(v, "model.prior.sclae: unknown key"));
    CHECK(mentions(v, "extra: unknown key"));
    CHECK(mentions(v, "model.alpha"));
    CHECK(mentions(v, "burn_in"));

    json version = minimal();
    version["schema_version"] = 2;
    CHECK(mentions(violations(version), "schema_version"));
    version.erase("schema_version");
    CHECK(mentions(violations(version), "schema_version: required"));

    json both = minimal();
    both["model"]["synthetic"] = {{"truth", {1.0}}};
    CHECK(mentions(violations(both), "not both"));

    json mala = minimal();
    mala["model"]["fidelity"] = "laplace";
    mala["sampler"] = {{"method", "mala"}};
    CHECK(mentions(violations(mala), "sampler.method"));

    json check = minimal();
    check["verify"] = {{"checks", {{{"name", "map_centred_form"}, {"cost", "c1"}}, "no_such_check"}}};
    const auto cv = violations(check);
    CHECK(mentions(cv, "verify.checks[0].cost: unknown key"));
    CHECK(mentions(cv, "unknown check 'no_such_check'"));

    json counts = minimal();
    counts["model"]["fidelity"] = "poisson";
    counts["model"]["data"] = {-1.0};
    CHECK(mentions(violations(counts), "model.data"));

    json negative_intensity = minimal();
    negative_intensity["model"]["fidelity"] = "poisson";
    negative_intensity["model"].erase("data");
    negative_intensity["model"]["synthetic"] = {{"truth", {-1.0}}};
    CHECK(mentions(violations(negative_intensity), "model.synthetic.truth"));

    CHECK_THROWS_AS(parse_config(json::array()), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("synthetic data") {
    ExperimentConfig cfg;
    cfg.operator_kind = "convolution";
    cfg.dim = 4;
    cfg.kernel = vec({0.25, 0.5, 0.25});
    cfg.truth = vec({1.0, 2.0, 0.0, 1.0});
    const Vector clean = bregbayes::testing::circulant(cfg.kernel, 4) * *cfg.truth;

    cfg.noise_level = 0.0;
    cfg.fidelity = NoiseModel::Gaussian;
    CHECK((synthesize_data(cfg, 5) - clean).norm() == 0.0);

    cfg.noise_level = 1.0;
    CHECK((synthesize_data(cfg, 5) - synthesize_data(cfg, 5)).norm() == 0.0);
    CHECK((synthesize_data(cfg, 5) - synthesize_data(cfg, 6)).norm() > 0.0);

    ExperimentConfig pois;
    pois.dim = 3;
    pois.fidelity = NoiseModel::Poisson;
    pois.truth = vec({0.0, 4.0, 0.0});
    const Vector f = synthesize_data(pois, 1);
    CHECK(f[0] == 0.0);
    CHECK(f[2] == 0.0);
    CHECK(f[1] == std::floor(f[1]));
    pois.truth = vec({-1.0, 1.0, 1.0});
    CHECK_THROWS_AS(synthesize_data(pois, 1), InputError);
}

TEST_CASE("synthetic noise has mean zero") {
    const Index n = 100000;
    for (NoiseModel model : {NoiseModel::Gaussian, NoiseModel::Laplace}) {
        CAPTURE(to_string(model));
        ExperimentConfig cfg;
        cfg.dim = n;
        cfg.fidelity = model;
        cfg.truth = Vector::Zero(n);
        cfg.noise_level = 0.7;
        const Vector f = synthesize_data(cfg, 17);
        // Laplace(0, b) has standard deviation b sqrt(2).
        const double sd = model == NoiseModel::Gaussian ? 0.7 : 0.7 * std::sqrt(2.0);
        CHECK(std::abs(f.mean()) <= 3.0 * sd / std::sqrt(static_cast<double>(n)));
        const double var = (f.array() - f.mean()).square().sum() / static_cast<double>(n - 1);
        CHECK(std::sqrt(var) == doctest::Approx(sd).epsilon(0.02));
    }
}

TEST_CASE("verify on the scalar gaussian posterior") {
    json doc = minimal();
    doc["seed"] = 3;
    const auto dir = temp_dir("verify");
    doc["output"] = {{"dir", dir.string()}, {"write_chains", true}};
    const ExperimentConfig cfg = parse_config(doc);
    const ExperimentResult result = run_experiment(Command::Verify, cfg);
    CHECK(result.passed);
    const json& rep = result.report;
    CHECK(rep["config"] == resolved_config(cfg));
    CHECK(rep["derived_seeds"].contains("chains"));
    CHECK(rep["results"]["map_estimate"][0].get<double>() == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(rep["results"]["cm_estimate"][0].get<double>() == doctest::Approx(2.0).epsilon(1e-9));
    std::vector<std::string> names;
    for (const auto& c : result.checks) names.push_back(c.name);
    for (const char* name : {"map_solver", "map_centred_form", "map_bayes_optimality", "cm_average_optimality",
                             "cm_bayes_optimality_c1", "compare_estimates", "sampler_agreement"})
        CHECK(std::find(names.begin(), names.end(), name) != names.end());
    CHECK(std::filesystem::exists(dir / "report.json"));
    CHECK(std::filesystem::exists(dir / "summary.csv"));
    std::ifstream is(dir / "report.json");
    CHECK(json::parse(is)["passed"] == true);
    std::filesystem::remove_all(dir);
}

TEST_CASE("subcommands") {
    json doc = minimal();
    const auto dir = temp_dir("subcommands");
    doc["output"] = {{"dir", dir.string()}, {"write_chains", true}};
    doc["sampler"] = {{"iterations", 6000}, {"burn_in", 1000}};
    const ExperimentConfig cfg = parse_config(doc);

    const auto map = run_experiment(Command::Map, cfg);
    CHECK(map.passed);
    CHECK(map.checks.size() == 1);

    const auto cm = run_experiment(Command::Cm, cfg);
    CHECK(cm.passed);
    CHECK(std::filesystem::exists(dir / "chain_0.csv"));
    CHECK(std::filesystem::exists(dir / "chain_3.csv"));

    const auto oracle = run_experiment(Command::Oracle, cfg);
    CHECK(oracle.passed);
    CHECK(oracle.checks.back().name == "quadrature_convergence");

    const auto cmp = run_experiment(Command::Compare, cfg);
    CHECK(cmp.passed);
    CHECK(cmp.checks.back().name == "compare_estimates");

    json big = minimal();
    big["model"]["operator"]["dim"] = 4;
    big["model"]["data"] = {1.0, 2.0, 3.0, 4.0};
    big["output"] = {{"dir", dir.string()}};
    CHECK_THROWS_AS(run_experiment(Command::Oracle, parse_config(big)), UnsupportedError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("command names") {
    for (Command c : {Command::Map, Command::Cm, Command::Oracle, Command::Verify, Command::Compare})
        CHECK(command_from_string(to_string(c)) == c);
    CHECK_THROWS_AS(command_from_string("plot"), ConfigError);
}
