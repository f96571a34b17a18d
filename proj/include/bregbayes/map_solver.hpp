#pragma once

#include "bregbayes/model.hpp"

#include <optional>
#include <string>

namespace bregbayes {

struct SolverSettings {
    double tolerance = 1e-8;
    long max_iterations = 100000;
    /// Defaults to K^T f moved into the domain.
    std::optional<Vector> initial;
    /// Keep the objective value of every accepted iterate in MapResult.
    bool record_history = false;
};

/// An element of the subdifferential at a point, chosen to make the
/// composed optimality vector K^T g + alpha p as small as possible.
struct OptimalityCertificate {
    Vector data_subgradient;   ///< g, in data space
    Vector prior_subgradient;  ///< p, includes the prior scale
    double residual = kInf;    ///< ||K^T g + alpha p||_inf
};

struct MapResult {
    Vector estimate;
    double objective = kInf;
    double residual = kInf;
    long iterations = 0;
    bool converged = false;
    std::string method;
    OptimalityCertificate certificate;
    std::vector<double> history;
};

MapResult solve_map(const Posterior& post, const SolverSettings& settings = {});

/// Distance from zero to the composed subdifferential K^T dG(Ku) + alpha dR(u),
/// in the infinity norm. Coordinates on a kink (laplace residual, l1 zero,
/// Poisson floor) contribute their whole subdifferential interval.
double optimality_residual(const Posterior& post, const VectorRef& u);

OptimalityCertificate optimality_certificate(const Posterior& post, const VectorRef& u);

/// -D_E(u, u_map) - alpha D_R(u, u_map), subgradients at u_map taken from the
/// optimality certificate; -inf outside the domain.
double map_centred_logpost(const Posterior& post, const VectorRef& u_map, const VectorRef& u);

/// Same, with a certificate computed once by the caller.
double map_centred_logpost(const Posterior& post, const VectorRef& u_map,
                           const OptimalityCertificate& cert, const VectorRef& u);

/// Default starting point: K^T f, shifted so that Ku clears the Poisson floor.
Vector default_initial_point(const Posterior& post);

}  // namespace bregbayes
