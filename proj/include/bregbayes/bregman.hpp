#pragma once

#include "bregbayes/model.hpp"

#include <string>
#include <variant>

namespace bregbayes {

/// A convex functional exposing a value and one subgradient per point.
/// Wraps a fidelity or a prior; the prior is taken as-is (alpha lives in the
/// cost weights, not here).
class Functional {
public:
    Functional(Fidelity fidelity) : impl_(std::move(fidelity)) {}  // NOLINT(implicit)
    Functional(Prior prior) : impl_(prior) {}                      // NOLINT(implicit)

    /// F(u) = ||u||^2, whose Bregman distance is the squared Euclidean error.
    static Functional squared_norm() { return Functional(Prior(PriorKind::Tikhonov, 2.0)); }

    double value(const VectorRef& u) const;
    Vector subgradient(const VectorRef& u) const;
    Vector hessian_apply(const VectorRef& u, const VectorRef& v) const;
    bool in_domain(const VectorRef& u) const;
    bool strictly_convex() const;
    std::string name() const;

    const Fidelity* fidelity() const { return std::get_if<Fidelity>(&impl_); }
    const Prior* prior() const { return std::get_if<Prior>(&impl_); }

private:
    std::variant<Fidelity, Prior> impl_;
};

/// F(a) - F(b) - <q, a - b> with q the subgradient selection at b, without
/// any clipping. +inf if a or b is outside the domain.
double bregman_distance_raw(const Functional& f, const VectorRef& a, const VectorRef& b);

/// Same with an explicit subgradient q at b.
double bregman_distance_raw(const Functional& f, const VectorRef& a, const VectorRef& b,
                            const VectorRef& q);

/// Bregman distance with small negative round-off clipped to zero.
double bregman_distance(const Functional& f, const VectorRef& a, const VectorRef& b);

/// Clip cancellation noise: values in [-1e-12 * (1 + scale), 0) become 0.
double clip_bregman(double value, double scale);

struct CostTerm {
    Functional functional;
    double weight;
};

/// A Bayes cost assembled from Bregman distances.
///
/// MapForm evaluates sum w_i D_{F_i}(u_hat, u) with subgradients at the
/// sample u; CmForm evaluates sum w_i D_{F_i}(u, u_hat) with subgradients at
/// the estimate u_hat.
class CostFunctional {
public:
    enum class Kind { MapForm, CmForm };

    CostFunctional(Kind kind, std::vector<CostTerm> terms);

    /// D_E(u_hat, u) + alpha D_R(u_hat, u)
    static CostFunctional map_cost(const Posterior& post);
    /// D_E(u, u_hat)
    static CostFunctional cm_c1(const Posterior& post);
    /// D_R(u, u_hat)
    static CostFunctional cm_c2(const Posterior& post);
    /// D_E(u, u_hat) + alpha D_R(u, u_hat)
    static CostFunctional cm_c3(const Posterior& post);
    /// ||u - u_hat||^2
    static CostFunctional mean_squared();

    Kind kind() const { return kind_; }
    const std::vector<CostTerm>& terms() const { return terms_; }
    /// Some positively weighted term is strictly convex.
    bool strictly_convex() const;

    /// C(u_hat, u); +inf if the point carrying the subgradient is outside a
    /// term's domain.
    double evaluate(const VectorRef& u_hat, const VectorRef& u) const;

private:
    Kind kind_;
    std::vector<CostTerm> terms_;
};

double map_cost(const Posterior& post, const VectorRef& u_hat, const VectorRef& u);
double cm_cost(const CostFunctional& cost, const VectorRef& u_hat, const VectorRef& u);

}  // namespace bregbayes
