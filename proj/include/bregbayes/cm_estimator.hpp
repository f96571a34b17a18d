#pragma once

#include "bregbayes/model.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace bregbayes {

enum class SamplerKind { Rwm, Mala };

std::string_view to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(std::string_view name);

struct SamplerSettings {
    SamplerKind kind = SamplerKind::Rwm;
    int chains = 4;
    /// Total iterations per chain, burn-in included.
    long iterations = 50000;
    long burn_in = 10000;
    long thin = 5;
    /// Initial proposal scale (RWM standard deviation, MALA step size).
    double initial_scale = 0.5;
    /// Acceptance window the burn-in adaptation aims for; the target is its midpoint.
    double acceptance_low = 0.2;
    double acceptance_high = 0.4;
    /// Spread of the chain starting points around the MAP estimate.
    double start_jitter = 0.5;

    /// Throws ConfigError listing every violation.
    void validate() const;
};

struct Chain {
    /// n x S, one retained sample per column.
    Matrix samples;
    std::uint64_t seed = 0;
    long accepted = 0;
    long proposed = 0;
    /// Post burn-in acceptance rate, accepted / proposed.
    double acceptance_rate = 0.0;
    double proposal_scale = 0.0;
    long burn_in = 0;
    long thin = 1;
    Vector start;
    /// Acceptance outside [0.05, 0.8] after adaptation.
    bool acceptance_warning = false;
};

Chain sample_posterior_rwm(const Posterior& post, const SamplerSettings& cfg, std::uint64_t seed,
                           const VectorRef& start);
Chain sample_posterior_mala(const Posterior& post, const SamplerSettings& cfg, std::uint64_t seed,
                            const VectorRef& start);

/// Runs cfg.chains chains with seeds derive_seed(master, k), each started at
/// centre plus Gaussian jitter (pulled back towards centre until it is in
/// the domain).
std::vector<Chain> run_chains(const Posterior& post, const SamplerSettings& cfg, std::uint64_t master_seed,
                              const VectorRef& centre);

inline constexpr double kRhatThreshold = 1.05;

struct Diagnostics {
    Vector ess;
    /// NaN where unavailable (one chain) or degenerate (zero within-chain variance).
    Vector rhat;
    bool rhat_available = false;
    /// Some coordinate has R-hat above the threshold or is degenerate.
    bool flagged = false;
    std::vector<bool> degenerate;
    long total_samples = 0;
};

/// Split R-hat and multi-chain effective sample size per coordinate. Chains
/// must have equal length.
Diagnostics chain_diagnostics(const std::vector<Chain>& chains);

/// Multi-chain ESS of one scalar series laid out chain after chain, using
/// Geyer's initial monotone sequence estimator.
double effective_sample_size(const VectorRef& values, const std::vector<long>& chain_lengths);

struct CmEstimate {
    Vector mean;
    Vector standard_error;
    Diagnostics diagnostics;
};

/// Pooled sample mean with standard error sd / sqrt(ESS). Throws
/// NumericalError when the diagnostics are flagged unless overridden.
CmEstimate cm_estimate(const std::vector<Chain>& chains, bool allow_unconverged = false);

/// One row per sample: index followed by the coordinates.
void write_chain_csv(const Chain& chain, const std::string& path);

struct QuadratureSettings {
    /// Gauss-Legendre nodes per dimension and panel; 0 picks default_quadrature_nodes(n).
    int nodes = 0;
    /// Box half-width in posterior standard deviations.
    double width = 8.0;
};

struct QuadratureMeasure {
    /// n x N
    Matrix nodes;
    /// Normalized to sum to one; zero outside the domain.
    Vector weights;
    /// Nodes are origin + transform * z for z in the box [box_lower, box_upper].
    Vector origin;
    Matrix transform;
    Vector box_lower;
    Vector box_upper;
    int nodes_per_panel = 0;
    Index dim() const { return nodes.rows(); }
};

/// 257 for n = 1, 65 for n = 2 and 3.
int default_quadrature_nodes(Index n);

/// Gauss-Legendre representation of the posterior on a box around centre
/// (normally the MAP estimate), split into panels at the known kinks. In 2-D
/// the grid is iterated in whitened coordinates and follows kink lines of any
/// orientation; in 1-D and
/// 3-D it is a tensor grid in coordinates where the kinks are axis-aligned.
/// Throws UnsupportedError for n > 3.
QuadratureMeasure quadrature_posterior(const Posterior& post, const VectorRef& centre,
                                       const QuadratureSettings& cfg = {});

struct QuadratureExpectation {
    Vector value;
    /// Weight of the nodes where g was not finite.
    double excluded_weight = 0.0;
    bool coverage_warning = false;
};

/// sum w_i g(x_i), dropping nodes where g is not finite and renormalizing.
/// Throws NumericalError when every node is dropped.
QuadratureExpectation quadrature_expectation(const QuadratureMeasure& measure,
                                             const std::function<Vector(const Vector&)>& g);

}  // namespace bregbayes
