#pragma once

// Forward operators, fidelity terms, priors and the posterior they induce.
//
// The posterior density is p(u|f) ∝ exp(-E(u; K, f) - alpha R(u)). All model
// objects are immutable after construction.

#include "bregbayes/common.hpp"

#include <string_view>

namespace bregbayes {

class ForwardOperator {
public:
    enum class Kind { Identity, Dense, Convolution1d };

    static ForwardOperator identity(Index n);
    static ForwardOperator dense(Matrix matrix);
    /// Periodic 1-D convolution on vectors of length n. Taps must be
    /// nonnegative and sum to one. Tap j acts on offset j - (L-1)/2.
    static ForwardOperator convolution(Vector kernel, Index n);

    Kind kind() const { return kind_; }
    Index input_dim() const { return n_; }
    Index output_dim() const { return m_; }
    const Matrix& matrix() const { return matrix_; }
    const Vector& kernel() const { return kernel_; }

    Vector apply(const VectorRef& u) const;
    Vector adjoint(const VectorRef& v) const;
    Matrix to_dense() const;

    bool entrywise_nonnegative() const;
    /// True when every output coordinate depends on exactly one input
    /// coordinate with the same index (identity, diagonal dense).
    bool is_diagonal() const;
    /// Spectral norm.
    double norm() const;

private:
    ForwardOperator() = default;
    Kind kind_ = Kind::Identity;
    Index n_ = 0;
    Index m_ = 0;
    Matrix matrix_;
    Vector kernel_;
};

enum class NoiseModel { Gaussian, Poisson, Laplace };

std::string_view to_string(NoiseModel model);
NoiseModel noise_model_from_string(std::string_view name);

inline constexpr double kDefaultPoissonFloor = 1e-10;

/// Data fidelity E(u; K, f) = G(Ku; f).
///   gaussian: ||Ku - f||^2
///   poisson:  sum (Ku)_i - f_i log (Ku)_i + lgamma(f_i + 1), domain (Ku)_i >= floor
///   laplace:  ||Ku - f||_1
class Fidelity {
public:
    Fidelity(NoiseModel model, ForwardOperator op, Vector data,
             double poisson_floor = kDefaultPoissonFloor);

    NoiseModel model() const { return model_; }
    const ForwardOperator& op() const { return op_; }
    const Vector& data() const { return data_; }
    double poisson_floor() const { return floor_; }
    Index dim() const { return op_.input_dim(); }

    bool smooth() const { return model_ != NoiseModel::Laplace; }
    bool strictly_convex() const { return strictly_convex_; }

    /// +inf outside the Poisson domain. Throws InputError on NaN or size mismatch.
    double value(const VectorRef& u) const;
    /// K^T g with g in the data-space subdifferential (sign(0) = 0 for laplace).
    /// Throws DomainError outside the Poisson domain.
    Vector subgradient(const VectorRef& u) const;

    bool in_domain(const VectorRef& u) const;
    bool in_data_domain(const VectorRef& ku) const;
    double data_value(const VectorRef& ku) const;
    Vector data_subgradient(const VectorRef& ku) const;
    /// Second derivative of G at Ku (diagonal in data space); zero almost
    /// everywhere for laplace.
    Vector data_curvature(const VectorRef& ku) const;
    /// K^T diag(G''(Ku)) K v.
    Vector hessian_apply(const VectorRef& u, const VectorRef& v) const;

private:
    void check_input(const VectorRef& u) const;

    NoiseModel model_;
    ForwardOperator op_;
    Vector data_;
    double floor_;
    double log_factorial_sum_ = 0.0;
    bool strictly_convex_ = false;
};

enum class PriorKind { Tikhonov, HuberTv, L1 };

std::string_view to_string(PriorKind kind);
PriorKind prior_kind_from_string(std::string_view name);

inline constexpr double kDefaultHuberDelta = 1e-2;

/// Convex regularizer R with R(0) = 0, scaled by `scale`.
///   tikhonov: 1/2 ||u||^2
///   huber_tv: sum h_delta(u_{i+1} - u_i)
///   l1:       ||u||_1
class Prior {
public:
    explicit Prior(PriorKind kind, double scale = 1.0, double huber_delta = kDefaultHuberDelta);

    PriorKind kind() const { return kind_; }
    double scale() const { return scale_; }
    double huber_delta() const { return delta_; }

    bool smooth() const { return kind_ != PriorKind::L1; }
    bool strictly_convex() const { return kind_ == PriorKind::Tikhonov; }

    double value(const VectorRef& u) const;
    Vector subgradient(const VectorRef& u) const;
    /// Hessian-vector product where R is twice differentiable; zero almost
    /// everywhere for l1.
    Vector hessian_apply(const VectorRef& u, const VectorRef& v) const;

private:
    PriorKind kind_;
    double scale_;
    double delta_;
};

double huber(double x, double delta);
double huber_derivative(double x, double delta);

struct GradientEvaluation {
    Vector gradient;
    /// Set when a nonsmooth term sat exactly on a kink and the sign(0) = 0
    /// selection was used in place of a gradient.
    bool kink_selection = false;
};

class Posterior {
public:
    Posterior(Fidelity fidelity, Prior prior, double alpha);

    const Fidelity& fidelity() const { return fidelity_; }
    const Prior& prior() const { return prior_; }
    double alpha() const { return alpha_; }
    Index dim() const { return fidelity_.dim(); }
    bool smooth() const { return fidelity_.smooth() && prior_.smooth(); }

    bool in_domain(const VectorRef& u) const { return fidelity_.in_domain(u); }

    /// -E(u) - alpha R(u); -inf outside the domain.
    double log_density(const VectorRef& u) const;
    /// E(u) + alpha R(u); +inf outside the domain.
    double objective(const VectorRef& u) const;
    GradientEvaluation log_density_gradient(const VectorRef& u) const;

private:
    Fidelity fidelity_;
    Prior prior_;
    double alpha_;
};

}  // namespace bregbayes
