#include "bregbayes/bregman.hpp"

#include <cmath>

namespace bregbayes {

double Functional::value(const VectorRef& u) const {
    return std::visit([&](const auto& f) { return f.value(u); }, impl_);
}

Vector Functional::subgradient(const VectorRef& u) const {
    return std::visit([&](const auto& f) { return f.subgradient(u); }, impl_);
}

Vector Functional::hessian_apply(const VectorRef& u, const VectorRef& v) const {
    return std::visit([&](const auto& f) { return f.hessian_apply(u, v); }, impl_);
}

bool Functional::in_domain(const VectorRef& u) const {
    if (const auto* f = fidelity()) return f->in_domain(u);
    return !u.hasNaN();
}

bool Functional::strictly_convex() const {
    return std::visit([](const auto& f) { return f.strictly_convex(); }, impl_);
}

std::string Functional::name() const {
    if (const auto* f = fidelity()) return "E[" + std::string(to_string(f->model())) + "]";
    return "R[" + std::string(to_string(prior()->kind())) + "]";
}

double clip_bregman(double value, double scale) {
    if (value < 0.0 && value >= -1e-12 * (1.0 + scale)) return 0.0;
    return value;
}

double bregman_distance_raw(const Functional& f, const VectorRef& a, const VectorRef& b,
                            const VectorRef& q) {
    const double fa = f.value(a);
    const double fb = f.value(b);
    if (!std::isfinite(fa) || !std::isfinite(fb)) return kInf;
    return fa - fb - q.dot(a - b);
}

double bregman_distance_raw(const Functional& f, const VectorRef& a, const VectorRef& b) {
    if (!f.in_domain(b)) return kInf;
    return bregman_distance_raw(f, a, b, f.subgradient(b));
}

double bregman_distance(const Functional& f, const VectorRef& a, const VectorRef& b) {
    if (!f.in_domain(a) || !f.in_domain(b)) return kInf;
    const Vector q = f.subgradient(b);
    const double fa = f.value(a);
    const double fb = f.value(b);
    const double lin = q.dot(a - b);
    const double d = fa - fb - lin;
    return clip_bregman(d, std::abs(fa) + std::abs(fb) + std::abs(lin));
}

// ---------------------------------------------------------------------------

CostFunctional::CostFunctional(Kind kind, std::vector<CostTerm> terms)
    : kind_(kind), terms_(std::move(terms)) {
    if (terms_.empty()) throw InputError("cost functional needs at least one term");
    for (const auto& t : terms_) {
        if (!(t.weight >= 0.0) || !std::isfinite(t.weight))
            throw InputError("cost functional weights must be finite and nonnegative");
    }
}

CostFunctional CostFunctional::map_cost(const Posterior& post) {
    return CostFunctional(Kind::MapForm,
                          {{post.fidelity(), 1.0}, {post.prior(), post.alpha()}});
}

CostFunctional CostFunctional::cm_c1(const Posterior& post) {
    return CostFunctional(Kind::CmForm, {{post.fidelity(), 1.0}});
}

CostFunctional CostFunctional::cm_c2(const Posterior& post) {
    return CostFunctional(Kind::CmForm, {{post.prior(), 1.0}});
}

CostFunctional CostFunctional::cm_c3(const Posterior& post) {
    return CostFunctional(Kind::CmForm, {{post.fidelity(), 1.0}, {post.prior(), post.alpha()}});
}

CostFunctional CostFunctional::mean_squared() {
    return CostFunctional(Kind::CmForm, {{Functional::squared_norm(), 1.0}});
}

bool CostFunctional::strictly_convex() const {
    for (const auto& t : terms_)
        if (t.weight > 0.0 && t.functional.strictly_convex()) return true;
    return false;
}

double CostFunctional::evaluate(const VectorRef& u_hat, const VectorRef& u) const {
    double total = 0.0;
    for (const auto& t : terms_) {
        if (t.weight == 0.0) continue;
        const double d = kind_ == Kind::MapForm ? bregman_distance(t.functional, u_hat, u)
                                                : bregman_distance(t.functional, u, u_hat);
        if (!std::isfinite(d)) return kInf;
        total += t.weight * d;
    }
    return total;
}

double map_cost(const Posterior& post, const VectorRef& u_hat, const VectorRef& u) {
    return CostFunctional::map_cost(post).evaluate(u_hat, u);
}

double cm_cost(const CostFunctional& cost, const VectorRef& u_hat, const VectorRef& u) {
    if (cost.kind() != CostFunctional::Kind::CmForm)
        throw InputError("cm_cost requires a CM-form cost functional");
    return cost.evaluate(u_hat, u);
}

}  // namespace bregbayes
