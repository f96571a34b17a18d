#pragma once

// Test-only oracles and generators. Nothing here calls into the code paths
// it is used to check.

#include "bregbayes/model.hpp"

#include <cmath>
#include <functional>
#include <random>

namespace bregbayes::testing {

inline Vector random_vector(std::mt19937_64& rng, Index n, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = dist(rng);
    return v;
}

inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x,
                                 double h = 1e-5) {
    Vector g(x.size());
    for (Index i = 0; i < x.size(); ++i) {
        Vector xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(xp) - f(xm)) / (2.0 * h);
    }
    return g;
}

/// Dense periodic convolution matrix built from the definition
/// (Ku)_i = sum_j k_j u_{(i + j - c) mod n}, c = (L - 1) / 2.
inline Matrix circulant(const Vector& kernel, Index n) {
    Matrix k = Matrix::Zero(n, n);
    const Index c = (kernel.size() - 1) / 2;
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < kernel.size(); ++j) k(i, ((i + j - c) % n + n) % n) += kernel[j];
    return k;
}

inline Posterior scalar_posterior(NoiseModel model, double f, PriorKind prior = PriorKind::Tikhonov,
                                  double alpha = 1.0) {
    return Posterior(Fidelity(model, ForwardOperator::identity(1), Vector::Constant(1, f)),
                     Prior(prior), alpha);
}

inline Vector vec(std::initializer_list<double> values) {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (double x : values) v[i++] = x;
    return v;
}

/// Mean and covariance of exp(-||Ku - f||^2 - alpha/2 ||u||^2): precision
/// 2 K^T K + alpha I, mean P^{-1} 2 K^T f.
struct GaussianMoments {
    Vector mean;
    Matrix covariance;
};

inline GaussianMoments gaussian_tikhonov_moments(const Matrix& k, const Vector& f, double alpha) {
    const Matrix precision = 2.0 * k.transpose() * k + alpha * Matrix::Identity(k.cols(), k.cols());
    const Matrix cov = precision.inverse();
    return {cov * (2.0 * k.transpose() * f), cov};
}

/// Composite Simpson rule with `intervals` (even) subintervals.
inline double simpson(const std::function<double(double)>& g, double a, double b, int intervals = 200000) {
    const double h = (b - a) / intervals;
    double acc = g(a) + g(b);
    for (int i = 1; i < intervals; ++i) acc += (i % 2 ? 4.0 : 2.0) * g(a + i * h);
    return acc * h / 3.0;
}

/// Posterior expectation of g for a scalar posterior with unnormalized log
/// density `logp`, by Simpson's rule on [a, b] split at `kink`.
inline double scalar_expectation(const std::function<double(double)>& logp, const std::function<double(double)>& g,
                                 double a, double b, double shift, std::vector<double> kinks = {}) {
    kinks.insert(kinks.begin(), a);
    kinks.push_back(b);
    double num = 0.0, den = 0.0;
    for (std::size_t p = 0; p + 1 < kinks.size(); ++p) {
        num += simpson([&](double u) { return g(u) * std::exp(logp(u) - shift); }, kinks[p], kinks[p + 1]);
        den += simpson([&](double u) { return std::exp(logp(u) - shift); }, kinks[p], kinks[p + 1]);
    }
    return num / den;
}

}  // namespace bregbayes::testing
