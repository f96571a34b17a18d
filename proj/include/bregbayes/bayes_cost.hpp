#pragma once

#include "bregbayes/bregman.hpp"
#include "bregbayes/cm_estimator.hpp"

#include <functional>
#include <vector>

namespace bregbayes {

/// Weighted points standing in for the posterior: pooled MCMC chains or a
/// quadrature measure.
struct SampleSet {
    /// n x N
    Matrix points;
    /// Sums to one.
    Vector weights;
    /// Lengths of the consecutive chains making up `points`; empty for a
    /// quadrature measure, whose expectations carry no sampling error.
    std::vector<long> chain_lengths;

    static SampleSet from_chains(const std::vector<Chain>& chains);
    static SampleSet from_quadrature(const QuadratureMeasure& measure);
    /// Equally weighted points treated as one chain.
    static SampleSet from_points(Matrix points);

    Index dim() const { return points.rows(); }
    Index size() const { return points.cols(); }
    bool is_quadrature() const { return chain_lengths.empty(); }
};

struct WeightedMean {
    double value = 0.0;
    double standard_error = 0.0;
    long count = 0;
    long excluded = 0;
};

/// Weighted mean of per-sample values, skipping non-finite entries (weights
/// renormalized). Standard error is sd / sqrt(ESS) along the chains, zero for
/// quadrature.
WeightedMean weighted_mean(const SampleSet& samples, const VectorRef& values);

struct CostEstimate {
    double value = 0.0;
    double standard_error = 0.0;
    long sample_count = 0;
    /// Samples with infinite cost, dropped from the average.
    long excluded_count = 0;
    /// More than 1% of the samples were excluded.
    bool exclusion_warning = false;
};

/// Precomputes per-sample quantities of a cost so that the Bayes cost and its
/// gradient in u_hat are cheap to evaluate repeatedly.
class BayesCostEvaluator {
public:
    BayesCostEvaluator(CostFunctional cost, const SampleSet& samples);

    /// Empirical Bayes cost; +inf when u_hat is outside the cost's domain.
    double value(const VectorRef& u_hat) const;
    /// A subgradient of value() at u_hat (exact gradient where the terms are
    /// twice differentiable).
    Vector gradient(const VectorRef& u_hat) const;
    /// Per-sample costs (+inf for excluded samples).
    Vector per_sample(const VectorRef& u_hat) const;
    CostEstimate estimate(const VectorRef& u_hat) const;

    const CostFunctional& cost() const { return cost_; }
    const SampleSet& samples() const { return samples_; }

private:
    struct TermCache {
        // MapForm: per-sample subgradient q_j and offset F(u_j) - <q_j, u_j>,
        // with their weighted means. CmForm: per-sample F(u_j).
        Matrix q;
        Vector offset;
        Vector q_mean;
        double offset_mean = 0.0;
        Vector f;
        double f_mean = 0.0;
    };

    CostFunctional cost_;
    SampleSet samples_;
    std::vector<TermCache> cache_;
    /// Samples finite for every term, with weights renormalized.
    std::vector<bool> included_;
    Vector weights_;
    Vector mean_;
    long excluded_ = 0;
};

/// Throws NumericalError when every sample has infinite cost.
CostEstimate estimate_bayes_cost(const CostFunctional& cost, const VectorRef& u_hat, const SampleSet& samples);

struct MinimizeSettings {
    long max_iterations = 20000;
    /// Stop once the step length falls below step_tolerance * (1 + ||u||_inf).
    double step_tolerance = 1e-12;
    double initial_step = 0.1;
};

struct MinimizeResult {
    Vector minimizer;
    double value = kInf;
    long iterations = 0;
};

/// Normalized subgradient descent with a step that halves after an increase
/// and grows by 1.2 after a decrease; returns the best iterate. Throws
/// NumericalError after 100 consecutive increases.
MinimizeResult minimize_bayes_cost(const CostFunctional& cost, const SampleSet& samples, const VectorRef& init,
                                   const MinimizeSettings& cfg = {});
MinimizeResult minimize_bayes_cost(const BayesCostEvaluator& evaluator, const VectorRef& init,
                                   const MinimizeSettings& cfg = {});

struct SampleAverage {
    Vector value;
    Vector standard_error;
    long excluded = 0;
};

/// Sample average of a vector-valued function (typically a subgradient
/// selection), per coordinate with standard errors.
SampleAverage average_subgradient(const std::function<Vector(const Vector&)>& g, const SampleSet& samples);
SampleAverage average_subgradient(const Functional& f, const SampleSet& samples);

}  // namespace bregbayes
