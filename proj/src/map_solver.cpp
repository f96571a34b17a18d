#include "bregbayes/map_solver.hpp"

#include "bregbayes/bregman.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace bregbayes {

namespace {

constexpr double kKinkTol = 1e-8;
constexpr double kPolishFactor = 1e-3;
constexpr int kPolishIterations = 200;

// argmin_x (x - y)^2 / (2t) + sum_k w_k |x - c_k|, then clamped to x >= lower.
// The objective is convex and piecewise quadratic, so the minimizer is either a
// breakpoint or the stationary point of one of the quadratic pieces.
double prox_abs_sum(double y, double t, const std::vector<std::pair<double, double>>& terms,
                    double lower) {
    std::vector<double> knots;
    knots.reserve(terms.size());
    for (const auto& [c, w] : terms)
        if (w > 0.0) knots.push_back(c);
    std::sort(knots.begin(), knots.end());

    auto objective = [&](double x) {
        double acc = (x - y) * (x - y) / (2.0 * t);
        for (const auto& [c, w] : terms) acc += w * std::abs(x - c);
        return acc;
    };
    auto slope_sum = [&](double x) {
        double s = 0.0;
        for (const auto& [c, w] : terms) s += w * sign0(x - c);
        return s;
    };

    std::vector<double> candidates = knots;
    // Pieces: (-inf, k0), (k0, k1), ..., (k_last, inf)
    for (std::size_t r = 0; r <= knots.size(); ++r) {
        const double lo = r == 0 ? -kInf : knots[r - 1];
        const double hi = r == knots.size() ? kInf : knots[r];
        double probe;
        if (std::isinf(lo) && std::isinf(hi)) probe = 0.0;
        else if (std::isinf(lo)) probe = hi - 1.0;
        else if (std::isinf(hi)) probe = lo + 1.0;
        else probe = 0.5 * (lo + hi);
        const double x = y - t * slope_sum(probe);
        if (x > lo && x < hi) candidates.push_back(x);
    }
    double best = y;
    double best_val = kInf;
    for (double x : candidates) {
        const double v = objective(x);
        if (v < best_val) {
            best_val = v;
            best = x;
        }
    }
    return std::max(best, lower);
}

// Composite problem  min S(u) + P(u)  with S smooth on its domain.
struct Composite {
    std::function<double(const Vector&)> smooth_value;
    std::function<Vector(const Vector&)> smooth_gradient;
    std::function<double(const Vector&)> prox_value;
    std::function<Vector(const Vector&, double)> prox;
};

struct FistaOutcome {
    Vector x;
    double objective = kInf;
    long iterations = 0;
    bool converged = false;
    double residual = kInf;
};

// Accelerated proximal gradient with backtracking; restarts from the last
// accepted point whenever the objective would increase, which keeps the
// accepted sequence monotone.
FistaOutcome fista(const Composite& prob, Vector x0, double tol, long max_iter,
                   const std::function<double(const Vector&)>& residual,
                   std::vector<double>* history) {
    FistaOutcome out;
    Vector x = std::move(x0);
    double fx = prob.smooth_value(x) + prob.prox_value(x);
    if (!std::isfinite(fx)) throw DomainError("solve_map: initial point outside the domain");
    if (history) history->push_back(fx);

    Vector y = x;
    double t = 1.0;
    double lip = 1.0;
    long it = 0;
    for (; it < max_iter; ++it) {
        double sy = prob.smooth_value(y);
        if (!std::isfinite(sy)) {
            y = x;
            t = 1.0;
            sy = prob.smooth_value(y);
        }
        const Vector gy = prob.smooth_gradient(y);
        Vector z;
        double sz = kInf;
        for (int bt = 0; bt < 200; ++bt) {
            z = prob.prox(y - gy / lip, 1.0 / lip);
            sz = prob.smooth_value(z);
            const Vector d = z - y;
            if (std::isfinite(sz) &&
                sz <= sy + gy.dot(d) + 0.5 * lip * d.squaredNorm() + 1e-12 * (1.0 + std::abs(sy)))
                break;
            lip *= 2.0;
        }
        const double fz = sz + prob.prox_value(z);
        if (!(fz <= fx + 1e-12 * (1.0 + std::abs(fx)))) {
            if (y == x) {
                // A plain proximal step from x failed to descend: we are at
                // the floating-point floor of the objective.
                const double r = residual(x);
                out.residual = r;
                if (r <= tol) {
                    out.converged = true;
                    break;
                }
                lip *= 2.0;
                if (lip > 1e300) break;
                continue;
            }
            y = x;
            t = 1.0;
            continue;
        }

        const double step = (z - x).lpNorm<Eigen::Infinity>();
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        y = z + ((t - 1.0) / t_next) * (z - x);
        x = std::move(z);
        fx = fz;
        t = t_next;
        if (history) history->push_back(fx);

        // Proximal-gradient mapping; equals the gradient when P = 0.
        const double mapping = lip * (y - x).lpNorm<Eigen::Infinity>();
        if (mapping <= tol || step * lip <= tol) {
            const double r = residual(x);
            out.residual = r;
            if (r <= tol) {
                out.converged = true;
                ++it;
                break;
            }
        }
        lip = std::max(lip * 0.9, 1e-12);
    }
    if (!out.converged) out.residual = residual(x);

    // Objective comparisons cannot resolve the minimizer below roughly
    // sqrt(machine epsilon), so finish with proximal steps accepted on the
    // residual alone.
    if (out.residual <= tol) {
        double plip = lip;
        for (int k = 0; k < kPolishIterations && out.residual > kPolishFactor * tol; ++k) {
            const Vector z = prob.prox(x - prob.smooth_gradient(x) / plip, 1.0 / plip);
            const double fz = prob.smooth_value(z) + prob.prox_value(z);
            const double rz = std::isfinite(fz) ? residual(z) : kInf;
            if (rz < out.residual) {
                x = z;
                fx = fz;
                out.residual = rz;
            } else {
                plip *= 2.0;
                if (plip > 1e300) break;
            }
        }
    }
    out.x = x;
    out.objective = fx;
    out.iterations = it;
    out.converged = out.residual <= tol;
    return out;
}

bool needs_primal_dual(const Posterior& post) {
    return post.fidelity().model() == NoiseModel::Laplace && !post.fidelity().op().is_diagonal();
}

bool poisson_needs_barrier(const Posterior& post) {
    const auto& fid = post.fidelity();
    return fid.model() == NoiseModel::Poisson && !fid.op().is_diagonal() &&
           (fid.data().array() == 0.0).any();
}

Composite build_composite(const Posterior& post, double barrier_weight) {
    const Fidelity& fid = post.fidelity();
    const Prior& prior = post.prior();
    const double alpha = post.alpha();
    const bool fid_smooth = fid.smooth();
    const bool prior_smooth = prior.smooth();
    const bool diagonal = fid.op().is_diagonal();
    const Vector diag = diagonal ? fid.op().to_dense().diagonal() : Vector();

    Composite c;
    c.smooth_value = [=, &fid, &prior](const Vector& u) {
        double s = 0.0;
        if (fid_smooth) {
            const Vector ku = fid.op().apply(u);
            s += fid.data_value(ku);
            if (!std::isfinite(s)) return kInf;
            if (barrier_weight > 0.0) {
                for (Index i = 0; i < ku.size(); ++i) {
                    if (fid.data()[i] != 0.0) continue;
                    const double gap = ku[i] - fid.poisson_floor();
                    if (gap <= 0.0) return kInf;
                    s -= barrier_weight * std::log(gap);
                }
            }
        }
        if (prior_smooth) s += alpha * prior.value(u);
        return s;
    };
    c.smooth_gradient = [=, &fid, &prior](const Vector& u) {
        Vector g = Vector::Zero(u.size());
        if (fid_smooth) {
            const Vector ku = fid.op().apply(u);
            Vector gd = fid.data_subgradient(ku);
            if (barrier_weight > 0.0) {
                for (Index i = 0; i < ku.size(); ++i)
                    if (fid.data()[i] == 0.0) gd[i] -= barrier_weight / (ku[i] - fid.poisson_floor());
            }
            g += fid.op().adjoint(gd);
        }
        if (prior_smooth) g += alpha * prior.subgradient(u);
        return g;
    };

    // Nonsmooth part: l1 prior, laplace fidelity (diagonal K only) and the
    // Poisson floor for diagonal K, all separable per coordinate.
    const bool l1 = !prior_smooth;
    const bool laplace = !fid_smooth;
    const bool floor = fid.model() == NoiseModel::Poisson && diagonal;
    c.prox_value = [=, &fid, &prior](const Vector& u) {
        double p = 0.0;
        if (l1) p += alpha * prior.value(u);
        if (laplace) p += fid.value(u);
        return p;
    };
    c.prox = [=, &fid, &prior](const Vector& y, double t) {
        if (!l1 && !laplace && !floor) return Vector(y);
        Vector x(y.size());
        for (Index j = 0; j < y.size(); ++j) {
            std::vector<std::pair<double, double>> terms;
            if (l1) terms.emplace_back(0.0, alpha * prior.scale());
            double lower = -kInf;
            if (laplace) {
                const double k = diag[j];
                // |k x - f| = |k| |x - f/k|
                if (k != 0.0) terms.emplace_back(fid.data()[j] / k, std::abs(k));
            }
            if (floor) {
                const double k = diag[j];
                if (k > 0.0) lower = fid.poisson_floor() / k;
            }
            x[j] = prox_abs_sum(y[j], t, terms, lower);
        }
        return x;
    };
    return c;
}

// Condat-Vu primal-dual splitting for  min alpha R(u) + ||Ku - f||_1  with a
// non-diagonal K: the smooth prior part enters through its gradient, the l1
// prior through its prox, the fidelity through the conjugate's prox.
FistaOutcome primal_dual_laplace(const Posterior& post, Vector u, double tol, long max_iter,
                                 std::vector<double>* history) {
    const Fidelity& fid = post.fidelity();
    const Prior& prior = post.prior();
    const ForwardOperator& op = fid.op();
    const double alpha = post.alpha();

    double lip = 0.0;
    if (prior.kind() == PriorKind::Tikhonov) lip = alpha * prior.scale();
    if (prior.kind() == PriorKind::HuberTv) lip = alpha * prior.scale() * 4.0 / prior.huber_delta();
    const double knorm = std::max(op.norm(), 1e-12);
    const double sigma = 1.0 / knorm;
    const double tau = 0.99 / (knorm + 0.5 * lip);

    Vector y = op.apply(u) - fid.data();
    y = y.unaryExpr([](double v) { return sign0(v); });

    FistaOutcome out;
    long polish_start = -1;
    long it = 0;
    for (; it < max_iter; ++it) {
        Vector grad = op.adjoint(y);
        if (prior.smooth()) grad += alpha * prior.subgradient(u);
        Vector u_next = u - tau * grad;
        if (!prior.smooth()) {
            const double thr = tau * alpha * prior.scale();
            u_next = u_next.unaryExpr(
                [thr](double v) { return sign0(v) * std::max(std::abs(v) - thr, 0.0); });
        }
        Vector y_next = y + sigma * (op.apply(2.0 * u_next - u) - fid.data());
        y_next = y_next.cwiseMax(-1.0).cwiseMin(1.0);
        u = std::move(u_next);
        y = std::move(y_next);
        if (history) history->push_back(post.objective(u));
        if ((it + 1) % 50 == 0) {
            out.residual = optimality_residual(post, u);
            if (out.residual <= tol && polish_start < 0) polish_start = it;
            if (out.residual <= kPolishFactor * tol ||
                (polish_start >= 0 && it - polish_start >= kPolishIterations)) {
                out.converged = out.residual <= tol;
                ++it;
                break;
            }
        }
    }
    out.x = u;
    out.objective = post.objective(u);
    out.iterations = it;
    if (!out.converged) {
        out.residual = optimality_residual(post, u);
        out.converged = out.residual <= tol;
    }
    return out;
}

}  // namespace

Vector default_initial_point(const Posterior& post) {
    const Fidelity& fid = post.fidelity();
    const ForwardOperator& op = fid.op();
    Vector x = op.adjoint(fid.data());
    if (fid.model() != NoiseModel::Poisson) return x;

    const double target = std::max(1e-3 * std::max(fid.data().mean(), 1e-3), 10.0 * fid.poisson_floor());
    if (op.is_diagonal()) {
        const Vector d = op.to_dense().diagonal();
        for (Index j = 0; j < x.size(); ++j) {
            if (d[j] <= 0.0) throw DomainError("poisson fidelity: operator has a non-positive diagonal entry");
            x[j] = std::max(x[j], target / d[j]);
        }
        return x;
    }
    // Shift along the all-ones direction until every (Ku)_i clears the target.
    const Vector kx = op.apply(x);
    const Vector k1 = op.apply(Vector::Ones(x.size()));
    double shift = 0.0;
    for (Index i = 0; i < kx.size(); ++i) {
        if (kx[i] >= target) continue;
        if (k1[i] <= 0.0) throw DomainError("poisson fidelity: cannot find a feasible starting point");
        shift = std::max(shift, (target - kx[i]) / k1[i]);
    }
    return x + Vector::Constant(x.size(), shift);
}

MapResult solve_map(const Posterior& post, const SolverSettings& settings) {
    if (!(settings.tolerance > 0.0)) throw InputError("solver tolerance must be positive");
    if (settings.max_iterations <= 0) throw InputError("solver max_iterations must be positive");

    Vector x0 = settings.initial ? *settings.initial : default_initial_point(post);
    if (x0.size() != post.dim()) throw InputError("solver initial point has the wrong dimension");
    if (!post.in_domain(x0)) {
        // Infeasible Poisson start: raise coordinates to the feasible default
        // (diagonal K) or fall back to it entirely.
        const Vector fallback = default_initial_point(post);
        if (post.fidelity().op().is_diagonal()) x0 = x0.cwiseMax(fallback);
        else x0 = fallback;
    }

    MapResult result;
    std::vector<double>* hist = settings.record_history ? &result.history : nullptr;
    auto residual = [&post](const Vector& u) { return optimality_residual(post, u); };

    FistaOutcome run;
    if (needs_primal_dual(post)) {
        result.method = "primal_dual";
        run = primal_dual_laplace(post, x0, settings.tolerance, settings.max_iterations, hist);
    } else if (poisson_needs_barrier(post)) {
        result.method = "fista_barrier";
        long used = 0;
        Vector x = x0;
        for (double mu : {1e-2, 1e-4, 1e-6, 1e-8}) {
            const Composite prob = build_composite(post, mu);
            auto barrier_res = [&](const Vector& u) {
                return prob.smooth_gradient(u).lpNorm<Eigen::Infinity>();
            };
            FistaOutcome stage = fista(prob, x, settings.tolerance, settings.max_iterations - used,
                                       barrier_res, hist);
            used += stage.iterations;
            x = stage.x;
            if (used >= settings.max_iterations) break;
        }
        FistaOutcome polish;
        if (used < settings.max_iterations) {
            polish = fista(build_composite(post, 0.0), x, settings.tolerance,
                           settings.max_iterations - used, residual, hist);
            used += polish.iterations;
            run = polish;
        } else {
            run.x = x;
            run.objective = post.objective(x);
            run.residual = residual(x);
            run.converged = run.residual <= settings.tolerance;
        }
        run.iterations = used;
    } else {
        result.method = "fista";
        run = fista(build_composite(post, 0.0), x0, settings.tolerance, settings.max_iterations,
                    residual, hist);
    }

    result.estimate = run.x;
    result.objective = post.objective(run.x);
    result.iterations = run.iterations;
    result.certificate = optimality_certificate(post, run.x);
    result.residual = result.certificate.residual;
    result.converged = result.residual <= settings.tolerance;
    return result;
}

OptimalityCertificate optimality_certificate(const Posterior& post, const VectorRef& u_in) {
    const Vector u = u_in;
    const Fidelity& fid = post.fidelity();
    const Prior& prior = post.prior();
    const ForwardOperator& op = fid.op();
    const double alpha = post.alpha();

    OptimalityCertificate cert;
    const Vector ku = op.apply(u);
    if (!fid.in_data_domain(ku)) return cert;

    Vector g = fid.data_subgradient(ku);
    Vector p = prior.subgradient(u);

    // Free coordinates of the subdifferential: (column of the composed map,
    // lower bound, upper bound, which vector, index).
    struct Free {
        Vector column;
        double lo, hi;
        bool data;
        Index index;
    };
    std::vector<Free> free;
    if (fid.model() == NoiseModel::Laplace) {
        for (Index i = 0; i < ku.size(); ++i) {
            if (std::abs(ku[i] - fid.data()[i]) <= kKinkTol * (1.0 + std::abs(fid.data()[i]))) {
                g[i] = 0.0;
                free.push_back({op.adjoint(Vector::Unit(ku.size(), i)), -1.0, 1.0, true, i});
            }
        }
    }
    if (fid.model() == NoiseModel::Poisson) {
        for (Index i = 0; i < ku.size(); ++i) {
            // Normal cone of the floor constraint.
            if (ku[i] <= 2.0 * fid.poisson_floor())
                free.push_back({op.adjoint(Vector::Unit(ku.size(), i)), -kInf, 0.0, true, i});
        }
    }
    if (prior.kind() == PriorKind::L1) {
        for (Index j = 0; j < u.size(); ++j) {
            if (std::abs(u[j]) <= kKinkTol) {
                p[j] = 0.0;
                free.push_back({alpha * Vector::Unit(u.size(), j), -prior.scale(), prior.scale(), false, j});
            }
        }
    }

    const Vector base = op.adjoint(g) + alpha * p;
    if (!free.empty()) {
        // min 1/2 ||base + A z||^2 over the box, by accelerated projected gradient.
        const Index nf = static_cast<Index>(free.size());
        Matrix a(u.size(), nf);
        Vector lo(nf), hi(nf);
        for (Index c = 0; c < nf; ++c) {
            a.col(c) = free[c].column;
            lo[c] = free[c].lo;
            hi[c] = free[c].hi;
        }
        const double lip = std::max(Eigen::JacobiSVD<Matrix>(a).singularValues()(0), 1e-300);
        const double step = 1.0 / (lip * lip);
        auto project = [&](Vector z) { return z.cwiseMax(lo).cwiseMin(hi).eval(); };
        Vector z = project(Vector::Zero(nf));
        Vector y = z;
        double t = 1.0;
        double best = (base + a * z).lpNorm<Eigen::Infinity>();
        Vector best_z = z;
        for (int it = 0; it < 20000 && best > 1e-15; ++it) {
            const Vector grad = a.transpose() * (base + a * y);
            const Vector z_next = project(y - step * grad);
            const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
            y = z_next + ((t - 1.0) / t_next) * (z_next - z);
            if ((z_next - z).lpNorm<Eigen::Infinity>() == 0.0 && it > 0) {
                z = z_next;
                break;
            }
            z = z_next;
            t = t_next;
            const double r = (base + a * z).lpNorm<Eigen::Infinity>();
            if (r < best) {
                best = r;
                best_z = z;
            }
        }
        for (Index c = 0; c < nf; ++c) {
            if (free[c].data) g[free[c].index] += best_z[c];
            else p[free[c].index] += best_z[c];
        }
    }
    cert.data_subgradient = g;
    cert.prior_subgradient = p;
    cert.residual = (op.adjoint(g) + alpha * p).lpNorm<Eigen::Infinity>();
    return cert;
}

double optimality_residual(const Posterior& post, const VectorRef& u) {
    return optimality_certificate(post, u).residual;
}

double map_centred_logpost(const Posterior& post, const VectorRef& u_map,
                           const OptimalityCertificate& cert, const VectorRef& u) {
    const Fidelity& fid = post.fidelity();
    const ForwardOperator& op = fid.op();
    if (!u.allFinite() || !post.in_domain(u) || !post.in_domain(u_map)) return -kInf;
    const Vector ku = op.apply(u);
    const Vector km = op.apply(u_map);
    const double de = fid.data_value(ku) - fid.data_value(km) - cert.data_subgradient.dot(ku - km);
    const double dr = post.prior().value(u) - post.prior().value(u_map) -
                      cert.prior_subgradient.dot(u - u_map);
    return -(de + post.alpha() * dr);
}

double map_centred_logpost(const Posterior& post, const VectorRef& u_map, const VectorRef& u) {
    return map_centred_logpost(post, u_map, optimality_certificate(post, u_map), u);
}

}  // namespace bregbayes
