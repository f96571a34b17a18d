#include "bregbayes/map_solver.hpp"

#include "unit/helpers.hpp"

#include <doctest.h>

#include <chrono>
#include <cmath>

using namespace bregbayes;
using bregbayes::testing::random_vector;
using bregbayes::testing::scalar_posterior;
using bregbayes::testing::vec;

TEST_CASE("scalar closed-form MAP estimates") {
    struct Case {
        NoiseModel model;
        double f;
        double expected;
    };
    // (u-3)^2 + u^2/2      -> 2(u-3) + u = 0        -> u = 2
    // u - 2 log u + u^2/2  -> u^2 + u - 2 = 0       -> u = 1
    // |u - 3| + u^2/2      -> -1 + u = 0 on u < 3   -> u = 1
    for (const Case& c : {Case{NoiseModel::Gaussian, 3.0, 2.0}, Case{NoiseModel::Poisson, 2.0, 1.0},
                          Case{NoiseModel::Laplace, 3.0, 1.0}}) {
        CAPTURE(to_string(c.model));
        const auto post = scalar_posterior(c.model, c.f);
        const auto start = std::chrono::steady_clock::now();
        const MapResult r = solve_map(post);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        CHECK(r.converged);
        CHECK(std::abs(r.estimate[0] - c.expected) <= 1e-8);
        CHECK(r.residual <= 1e-8);
        CHECK(optimality_residual(post, r.estimate) <= 1e-6);
        CHECK(r.objective == post.objective(r.estimate));
        CHECK(secs < 1.0);
    }
}

TEST_CASE("optimality residual examples") {
    const auto gauss = scalar_posterior(NoiseModel::Gaussian, 3.0);
    CHECK(optimality_residual(gauss, vec({2.1})) == doctest::Approx(0.3).epsilon(1e-12));

    const Posterior l1(Fidelity(NoiseModel::Gaussian, ForwardOperator::identity(2), Vector::Zero(2)),
                       Prior(PriorKind::L1), 1.0);
    CHECK(optimality_residual(l1, Vector::Zero(2)) == 0.0);
    // Fidelity gradient 2(0 - 3) = -6 exceeds the [-1, 1] box by 5.
    const Posterior l1b(Fidelity(NoiseModel::Gaussian, ForwardOperator::identity(1), vec({3.0})),
                        Prior(PriorKind::L1), 1.0);
    CHECK(optimality_residual(l1b, vec({0.0})) == doctest::Approx(5.0));
}

TEST_CASE("objective sequence is monotone") {
    std::mt19937_64 rng(4);
    const auto conv = ForwardOperator::convolution(vec({0.2, 0.6, 0.2}), 6);
    for (NoiseModel model : {NoiseModel::Gaussian, NoiseModel::Poisson, NoiseModel::Laplace}) {
        for (PriorKind prior : {PriorKind::Tikhonov, PriorKind::HuberTv, PriorKind::L1}) {
            CAPTURE(to_string(model));
            CAPTURE(to_string(prior));
            const Posterior post(Fidelity(model, model == NoiseModel::Laplace ? ForwardOperator::identity(6) : conv,
                                          random_vector(rng, 6, 0.5, 4.0)),
                                 Prior(prior, 1.0, 0.1), 0.5);
            SolverSettings s;
            s.record_history = true;
            const MapResult r = solve_map(post, s);
            CHECK(r.converged);
            CHECK(r.residual <= s.tolerance);
            for (std::size_t k = 1; k < r.history.size(); ++k)
                CHECK(r.history[k] <= r.history[k - 1] + 1e-12 * (1.0 + std::abs(r.history[k - 1])));
        }
    }
}

TEST_CASE("laplace fidelity with a blur operator uses the primal-dual path") {
    std::mt19937_64 rng(6);
    const auto conv = ForwardOperator::convolution(vec({0.25, 0.5, 0.25}), 3);
    for (PriorKind prior : {PriorKind::Tikhonov, PriorKind::L1, PriorKind::HuberTv}) {
        CAPTURE(to_string(prior));
        const Posterior post(Fidelity(NoiseModel::Laplace, conv, vec({1.0, 2.5, 0.5})), Prior(prior, 1.0, 0.1), 0.3);
        const MapResult r = solve_map(post);
        CHECK(r.method == "primal_dual");
        CHECK(r.converged);
        // No random perturbation improves on the solution.
        for (int trial = 0; trial < 200; ++trial) {
            const Vector d = random_vector(rng, 3, -1e-3, 1e-3);
            CHECK(post.objective(r.estimate + d) >= r.objective - 1e-9);
        }
    }
}

TEST_CASE("poisson with zero counts and a blur operator") {
    const auto conv = ForwardOperator::convolution(vec({0.25, 0.5, 0.25}), 4);
    const Posterior post(Fidelity(NoiseModel::Poisson, conv, vec({3.0, 0.0, 2.0, 5.0})), Prior(PriorKind::Tikhonov),
                         0.5);
    const MapResult r = solve_map(post);
    CHECK(post.in_domain(r.estimate));
    CHECK(r.residual <= 1e-6);
}

TEST_CASE("infeasible poisson start is moved into the domain") {
    const auto post = scalar_posterior(NoiseModel::Poisson, 2.0);
    SolverSettings s;
    s.initial = vec({-5.0});
    const MapResult r = solve_map(post, s);
    CHECK(r.converged);
    CHECK(r.estimate[0] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("non-convergence is reported, not thrown") {
    const Posterior post(Fidelity(NoiseModel::Gaussian, ForwardOperator::identity(3), vec({1, 2, 3})),
                         Prior(PriorKind::HuberTv, 1.0, 1e-3), 0.1);
    SolverSettings s;
    s.max_iterations = 2;
    s.initial = vec({10, -10, 10});
    const MapResult r = solve_map(post, s);
    CHECK_FALSE(r.converged);
    CHECK(r.iterations <= 2);
}

TEST_CASE("MAP-centred log posterior") {
    std::mt19937_64 rng(8);
    for (NoiseModel model : {NoiseModel::Gaussian, NoiseModel::Poisson}) {
        const auto post = scalar_posterior(model, model == NoiseModel::Gaussian ? 3.0 : 2.0);
        const MapResult r = solve_map(post);
        CHECK(map_centred_logpost(post, r.estimate, r.estimate) == 0.0);
        for (int trial = 0; trial < 50; ++trial) {
            const Vector u = random_vector(rng, 1, 0.1, 4.0);
            const Vector v = random_vector(rng, 1, 0.1, 4.0);
            const double lhs = map_centred_logpost(post, r.estimate, u) - map_centred_logpost(post, r.estimate, v);
            const double rhs = post.log_density(u) - post.log_density(v);
            CHECK(std::abs(lhs - rhs) <= (model == NoiseModel::Gaussian ? 1e-10 : 1e-8));
        }
        CHECK(map_centred_logpost(post, r.estimate, vec({std::nan("")})) == -kInf);
    }
    const auto pois = scalar_posterior(NoiseModel::Poisson, 2.0);
    CHECK(map_centred_logpost(pois, vec({1.0}), vec({-1.0})) == -kInf);
}

TEST_CASE("certificate picks the subgradient that satisfies optimality at a kink") {
    // |u - 0.5| + u^2/2: the minimizer sits on the kink u = 0.5, where
    // sign(0) = 0 would not satisfy the optimality condition.
    const auto post = scalar_posterior(NoiseModel::Laplace, 0.5);
    const MapResult r = solve_map(post);
    CHECK(r.estimate[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(r.converged);
    CHECK(r.certificate.data_subgradient[0] == doctest::Approx(-0.5));
    for (double u : {-1.0, 0.2, 2.0}) {
        for (double v : {0.0, 1.3}) {
            const double lhs = map_centred_logpost(post, r.estimate, vec({u})) -
                               map_centred_logpost(post, r.estimate, vec({v}));
            CHECK(std::abs(lhs - (post.log_density(vec({u})) - post.log_density(vec({v})))) <= 1e-12);
        }
    }
}
