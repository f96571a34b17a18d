#pragma once

#include "bregbayes/bayes_cost.hpp"
#include "bregbayes/map_solver.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bregbayes {

struct VerificationReport {
    std::string name;
    bool passed = false;
    std::map<std::string, double> measured;
    std::map<std::string, std::vector<double>> measured_vectors;
    std::map<std::string, double> tolerances;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> notes;
};

/// Slack added to every comparison made on a quadrature measure, where the
/// standard error is zero.
inline constexpr double kQuadratureSlack = 1e-9;
/// Statistical thresholds are this many standard errors.
inline constexpr double kStderrMultiple = 3.0;

/// Compares differences of the MAP-centred log posterior with differences of
/// the log posterior on random in-domain pairs drawn from u_map +- radius.
VerificationReport verify_map_centred_form(const Posterior& post, const VectorRef& u_map, int num_points,
                                           double tol, std::uint64_t seed, double radius = 2.0);

struct PerturbationSettings {
    int count = 400;
    double radius = 0.5;
    /// Cost whose Bayes cost is compared; defaults to the MAP cost of the posterior.
    std::optional<CostFunctional> cost;
};

/// Bayes cost at u_map against grid and random perturbations within the
/// radius (infinity norm).
VerificationReport verify_map_bayes_optimality(const Posterior& post, const VectorRef& u_map,
                                               const SampleSet& samples, const PerturbationSettings& cfg,
                                               std::uint64_t seed);

/// Residual K^T grad G(K u_cm) + alpha E[p] with u_cm the sample mean.
/// Throws UnsupportedError for a laplace fidelity.
VerificationReport verify_cm_average_optimality(const Posterior& post, const SampleSet& samples);

/// Distance between the empirical Bayes cost minimizer (started at init) and
/// the sample mean.
VerificationReport verify_cm_bayes_optimality(const CostFunctional& cost, const std::string& cost_name,
                                              const SampleSet& samples, const VectorRef& init,
                                              const MinimizeSettings& cfg = {});

/// Bregman risk E[D_R(u, u_hat)] of the CM and MAP estimates.
VerificationReport compare_estimates(const Posterior& post, const VectorRef& u_map, const VectorRef& u_cm,
                                     const SampleSet& samples);

void to_json(nlohmann::json& j, const VerificationReport& r);

/// Header plus one row per report: name, passed, measured, tolerances, seeds.
void write_summary_csv(const std::vector<VerificationReport>& reports, const std::string& path);

}  // namespace bregbayes
