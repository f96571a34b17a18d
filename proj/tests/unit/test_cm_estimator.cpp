#include "bregbayes/cm_estimator.hpp"
#include "bregbayes/map_solver.hpp"
#include "bregbayes/rng.hpp"

#include "unit/helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace bregbayes;
using bregbayes::testing::random_vector;
using bregbayes::testing::scalar_expectation;
using bregbayes::testing::scalar_posterior;
using bregbayes::testing::vec;

namespace {

SamplerSettings short_run(SamplerKind kind = SamplerKind::Rwm) {
    SamplerSettings s;
    s.kind = kind;
    s.iterations = 20000;
    s.burn_in = 4000;
    s.thin = 2;
    return s;
}

Chain synthetic_chain(const Matrix& samples) {
    Chain c;
    c.samples = samples;
    return c;
}

double gaussian_logp(double u) { return -(u - 3.0) * (u - 3.0) - 0.5 * u * u; }
double poisson_logp(double u) { return u > 0.0 ? -(u - 2.0 * std::log(u)) - 0.5 * u * u : -kInf; }
double laplace_logp(double u) { return -std::abs(u - 3.0) - 0.5 * u * u; }

}  // namespace

TEST_CASE("counter generator is reproducible and streams differ") {
    CounterRng a(7), b(7), c(8);
    for (int i = 0; i < 10; ++i) {
        const auto x = a();
        CHECK(x == b());
        CHECK(x != c());
    }
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));
    CHECK(derive_seed(5, 3) == derive_seed(5, 3));
}

TEST_CASE("sampler settings validation") {
    SamplerSettings s;
    s.initial_scale = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SamplerSettings{};
    s.burn_in = s.iterations;
    s.thin = 0;
    try {
        s.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.violations().size() == 2);
    }
    const auto lap = scalar_posterior(NoiseModel::Laplace, 3.0);
    CHECK_THROWS_AS(sample_posterior_mala(lap, short_run(), 1, vec({1.0})), ConfigError);
    const auto l1 = scalar_posterior(NoiseModel::Gaussian, 3.0, PriorKind::L1);
    CHECK_THROWS_AS(sample_posterior_mala(l1, short_run(), 1, vec({1.0})), ConfigError);
    const auto pois = scalar_posterior(NoiseModel::Poisson, 2.0);
    CHECK_THROWS_AS(sample_posterior_rwm(pois, short_run(), 1, vec({-1.0})), DomainError);
}

TEST_CASE("samplers are deterministic given the seed") {
    const auto post = scalar_posterior(NoiseModel::Poisson, 2.0);
    for (SamplerKind kind : {SamplerKind::Rwm, SamplerKind::Mala}) {
        const auto cfg = short_run(kind);
        const Chain a = kind == SamplerKind::Rwm ? sample_posterior_rwm(post, cfg, 99, vec({1.0}))
                                                 : sample_posterior_mala(post, cfg, 99, vec({1.0}));
        const Chain b = kind == SamplerKind::Rwm ? sample_posterior_rwm(post, cfg, 99, vec({1.0}))
                                                 : sample_posterior_mala(post, cfg, 99, vec({1.0}));
        const Chain c = kind == SamplerKind::Rwm ? sample_posterior_rwm(post, cfg, 100, vec({1.0}))
                                                 : sample_posterior_mala(post, cfg, 100, vec({1.0}));
        CHECK(a.samples == b.samples);
        CHECK(a.samples != c.samples);
        CHECK(a.samples.cols() == (cfg.iterations - cfg.burn_in) / cfg.thin);
        CHECK(a.acceptance_rate == doctest::Approx(static_cast<double>(a.accepted) / a.proposed));
        CHECK(a.proposed == cfg.iterations - cfg.burn_in);
        // Every retained sample is in the domain.
        CHECK(a.samples.minCoeff() >= post.fidelity().poisson_floor());
        for (Index k = 0; k < a.samples.cols(); ++k) CHECK(std::isfinite(post.log_density(a.samples.col(k))));
    }
}

TEST_CASE("adaptation lands in the acceptance window") {
    const auto post = scalar_posterior(NoiseModel::Gaussian, 3.0);
    SamplerSettings cfg = short_run();
    cfg.initial_scale = 50.0;
    const Chain c = sample_posterior_rwm(post, cfg, 3, vec({2.0}));
    CHECK(c.acceptance_rate > 0.15);
    CHECK(c.acceptance_rate < 0.45);
    CHECK_FALSE(c.acceptance_warning);
}

TEST_CASE("scalar gaussian: sampler means match the closed form") {
    // Posterior N(2f/3, 1/3) for f = 3.
    const auto post = scalar_posterior(NoiseModel::Gaussian, 3.0);
    for (SamplerKind kind : {SamplerKind::Rwm, SamplerKind::Mala}) {
        CAPTURE(to_string(kind));
        SamplerSettings cfg;
        cfg.kind = kind;
        const auto chains = run_chains(post, cfg, 2024, vec({2.0}));
        const CmEstimate est = cm_estimate(chains);
        CHECK(std::abs(est.mean[0] - 2.0) <= 3.0 * est.standard_error[0]);
        CHECK(est.diagnostics.rhat[0] <= kRhatThreshold);
        CHECK(est.standard_error[0] > 0.0);
    }
}

TEST_CASE("rwm and mala agree within combined error bars") {
    const auto post = scalar_posterior(NoiseModel::Poisson, 2.0);
    SamplerSettings cfg;
    const auto rwm = cm_estimate(run_chains(post, cfg, 11, vec({1.0})));
    cfg.kind = SamplerKind::Mala;
    const auto mala = cm_estimate(run_chains(post, cfg, 11, vec({1.0})));
    const double combined = std::hypot(rwm.standard_error[0], mala.standard_error[0]);
    CHECK(std::abs(rwm.mean[0] - mala.mean[0]) <= 3.0 * combined);
}

TEST_CASE("symmetric posterior has zero mean") {
    const Posterior post(Fidelity(NoiseModel::Gaussian, ForwardOperator::identity(2), Vector::Zero(2)),
                         Prior(PriorKind::Tikhonov), 1.0);
    const auto est = cm_estimate(run_chains(post, short_run(), 5, Vector::Zero(2)));
    for (Index i = 0; i < 2; ++i) CHECK(std::abs(est.mean[i]) <= 3.0 * est.standard_error[i]);
}

TEST_CASE("diagnostics on synthetic chains") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> normal;
    const long len = 4000;

    SUBCASE("independent draws give R-hat near one and ESS near the count") {
        std::vector<Chain> chains;
        for (int k = 0; k < 4; ++k) {
            Matrix s(1, len);
            for (long j = 0; j < len; ++j) s(0, j) = normal(rng);
            chains.push_back(synthetic_chain(s));
        }
        const Diagnostics d = chain_diagnostics(chains);
        CHECK(d.rhat_available);
        CHECK(d.rhat[0] < 1.05);
        CHECK_FALSE(d.flagged);
        CHECK(d.ess[0] > 0.7 * 4 * len);
    }
    SUBCASE("AR(1) chain: ESS close to N (1 - rho) / (1 + rho)") {
        const double rho = 0.95;
        const long n = 200000;
        Matrix s(1, n);
        double x = 0.0;
        for (long j = 0; j < n; ++j) {
            x = rho * x + std::sqrt(1.0 - rho * rho) * normal(rng);
            s(0, j) = x;
        }
        const double expected = n * (1.0 - rho) / (1.0 + rho);
        const Diagnostics d = chain_diagnostics({synthetic_chain(s)});
        CHECK_FALSE(d.rhat_available);
        CHECK(std::isnan(d.rhat[0]));
        CHECK(d.ess[0] < 0.1 * n);
        CHECK(d.ess[0] == doctest::Approx(expected).epsilon(0.2));
    }
    SUBCASE("chains stuck at different locations are flagged") {
        std::vector<Chain> chains;
        for (int k = 0; k < 4; ++k) {
            Matrix s(1, len);
            for (long j = 0; j < len; ++j) s(0, j) = normal(rng) + (k == 0 ? 3.0 : 0.0);
            chains.push_back(synthetic_chain(s));
        }
        const Diagnostics d = chain_diagnostics(chains);
        CHECK(d.rhat[0] > 1.05);
        CHECK(d.flagged);
        CHECK_THROWS_AS(cm_estimate(chains), NumericalError);
        CHECK_NOTHROW(cm_estimate(chains, true));
    }
    SUBCASE("identical constant chains are degenerate") {
        const std::vector<Chain> chains(2, synthetic_chain(Matrix::Constant(1, 100, 1.5)));
        const Diagnostics d = chain_diagnostics(chains);
        CHECK(d.degenerate[0]);
        CHECK(d.flagged);
        CHECK(std::isnan(d.rhat[0]));
    }
    SUBCASE("invalid inputs") {
        CHECK_THROWS_AS(cm_estimate({}), InputError);
        CHECK_THROWS_AS(cm_estimate({synthetic_chain(Matrix(1, 0))}), InputError);
        CHECK_THROWS_AS(chain_diagnostics({synthetic_chain(Matrix::Zero(1, 10)), synthetic_chain(Matrix::Zero(1, 12))}),
                        InputError);
    }
}

TEST_CASE("chain csv export") {
    Chain c = synthetic_chain((Matrix(2, 3) << 1, 2, 3, 4, 5, 6).finished());
    const auto path = std::filesystem::temp_directory_path() / "bregbayes_chain_test.csv";
    write_chain_csv(c, path.string());
    std::ifstream is(path);
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    CHECK(header == "sample,u0,u1");
    CHECK(row == "0,1,4");
    std::filesystem::remove(path);
}

TEST_CASE("quadrature on the scalar gaussian posterior") {
    const auto post = scalar_posterior(NoiseModel::Gaussian, 3.0);
    const QuadratureMeasure q = quadrature_posterior(post, vec({2.0}));
    CHECK(q.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(q.weights.minCoeff() >= 0.0);
    CHECK(q.box_lower[0] < 2.0);
    CHECK(q.box_upper[0] > 2.0);
    const auto ones = quadrature_expectation(q, [](const Vector&) { return vec({1.0}); });
    CHECK(ones.value[0] == doctest::Approx(1.0).epsilon(1e-14));
    const auto mean = quadrature_expectation(q, [](const Vector& u) { return u; });
    CHECK(std::abs(mean.value[0] - 2.0) <= 1e-6);
    const auto var = quadrature_expectation(q, [](const Vector& u) { return vec({(u[0] - 2.0) * (u[0] - 2.0)}); });
    CHECK(std::abs(var.value[0] - 1.0 / 3.0) <= 1e-8);
}

TEST_CASE("quadrature matches Simpson oracles on scalar posteriors") {
    struct Case {
        NoiseModel model;
        double f;
        double (*logp)(double);
        double lo, hi;
        std::vector<double> kinks;
    };
    for (const Case& c : {Case{NoiseModel::Gaussian, 3.0, gaussian_logp, -10.0, 12.0, {}},
                          Case{NoiseModel::Poisson, 2.0, poisson_logp, 1e-10, 15.0, {}},
                          Case{NoiseModel::Laplace, 3.0, laplace_logp, -12.0, 14.0, {3.0}}}) {
        CAPTURE(to_string(c.model));
        const auto post = scalar_posterior(c.model, c.f);
        const MapResult map = solve_map(post);
        const QuadratureMeasure q = quadrature_posterior(post, map.estimate);
        const double shift = c.logp(map.estimate[0]);
        for (int power = 1; power <= 3; ++power) {
            const double oracle = scalar_expectation(
                c.logp, [power](double u) { return std::pow(u, power); }, c.lo, c.hi, shift, c.kinks);
            const double quad =
                quadrature_expectation(q, [power](const Vector& u) { return vec({std::pow(u[0], power)}); }).value[0];
            CHECK(std::abs(quad - oracle) <= 1e-8 * (1.0 + std::abs(oracle)));
        }
        // Self-convergence under node doubling.
        QuadratureSettings fine;
        fine.nodes = 513;
        const QuadratureMeasure q2 = quadrature_posterior(post, map.estimate, fine);
        const auto id = [](const Vector& u) { return u; };
        CHECK(std::abs(quadrature_expectation(q, id).value[0] - quadrature_expectation(q2, id).value[0]) < 1e-8);
    }
}

TEST_CASE("quadrature on a two-dimensional gaussian with a blur operator") {
    const auto conv = ForwardOperator::convolution(vec({0.2, 0.6, 0.2}), 2);
    const Vector f = vec({1.0, 2.0});
    const Posterior post(Fidelity(NoiseModel::Gaussian, conv, f), Prior(PriorKind::Tikhonov), 0.5);
    const auto oracle = bregbayes::testing::gaussian_tikhonov_moments(bregbayes::testing::circulant(vec({0.2, 0.6, 0.2}), 2), f, 0.5);
    const QuadratureMeasure q = quadrature_posterior(post, solve_map(post).estimate);
    const Vector mean = quadrature_expectation(q, [](const Vector& u) { return u; }).value;
    CHECK((mean - oracle.mean).lpNorm<Eigen::Infinity>() <= 1e-8);
    const Vector cross = quadrature_expectation(q, [&](const Vector& u) {
                             return vec({(u[0] - oracle.mean[0]) * (u[1] - oracle.mean[1])});
                         }).value;
    CHECK(std::abs(cross[0] - oracle.covariance(0, 1)) <= 1e-8);
}

TEST_CASE("quadrature expectation of the prior subgradient on a symmetric posterior") {
    const auto post = scalar_posterior(NoiseModel::Gaussian, 0.0);
    const QuadratureMeasure q = quadrature_posterior(post, vec({0.0}));
    const Prior tik(PriorKind::Tikhonov);
    CHECK(std::abs(quadrature_expectation(q, [&](const Vector& u) { return tik.subgradient(u); }).value[0]) <= 1e-8);
}

TEST_CASE("quadrature exclusions and limits") {
    const auto post = scalar_posterior(NoiseModel::Gaussian, 3.0);
    const QuadratureMeasure q = quadrature_posterior(post, vec({2.0}));
    const auto half = quadrature_expectation(
        q, [](const Vector& u) { return vec({u[0] < 2.0 ? kInf : 1.0}); });
    CHECK(half.coverage_warning);
    // A step integrand is only resolved to about one node spacing.
    CHECK(half.excluded_weight == doctest::Approx(0.5).epsilon(0.05));
    CHECK(half.value[0] == doctest::Approx(1.0));
    CHECK_THROWS_AS(quadrature_expectation(q, [](const Vector&) { return vec({kInf}); }), NumericalError);

    const Posterior big(Fidelity(NoiseModel::Gaussian, ForwardOperator::identity(4), Vector::Zero(4)),
                        Prior(PriorKind::Tikhonov), 1.0);
    CHECK_THROWS_AS(quadrature_posterior(big, Vector::Zero(4)), UnsupportedError);
}

TEST_CASE("MCMC agrees with quadrature on scalar posteriors") {
    for (NoiseModel model : {NoiseModel::Gaussian, NoiseModel::Poisson, NoiseModel::Laplace}) {
        for (PriorKind prior : {PriorKind::Tikhonov, PriorKind::L1}) {
            CAPTURE(to_string(model));
            CAPTURE(to_string(prior));
            const auto post = scalar_posterior(model, model == NoiseModel::Poisson ? 2.0 : 3.0, prior);
            const Vector map = solve_map(post).estimate;
            const auto q = quadrature_posterior(post, map);
            const double quad = quadrature_expectation(q, [](const Vector& u) { return u; }).value[0];
            const auto est = cm_estimate(run_chains(post, SamplerSettings{}, 77, map));
            CHECK(std::abs(est.mean[0] - quad) <= 3.0 * est.standard_error[0]);
        }
    }
}

TEST_CASE("planar quadrature follows kink lines of any orientation") {
    // E[grad log p] = 0 for a log-density that is Lipschitz on its domain and
    // vanishes at the domain edge.
    const auto conv = ForwardOperator::convolution(vec({0.2, 0.6, 0.2}), 2);
    struct Case {
        NoiseModel model;
        PriorKind prior;
        Vector f;
    };
    for (const Case& c : {Case{NoiseModel::Poisson, PriorKind::Tikhonov, vec({3.0, 1.0})},
                          Case{NoiseModel::Poisson, PriorKind::HuberTv, vec({3.0, 1.0})},
                          Case{NoiseModel::Laplace, PriorKind::Tikhonov, vec({3.0, 1.0})},
                          Case{NoiseModel::Laplace, PriorKind::HuberTv, vec({2.0, -1.0})},
                          Case{NoiseModel::Gaussian, PriorKind::L1, vec({2.0, -1.0})}}) {
        CAPTURE(to_string(c.model));
        CAPTURE(to_string(c.prior));
        const Posterior post(Fidelity(c.model, conv, c.f), Prior(c.prior, 1.0, 0.5), 1.0);
        const auto q = quadrature_posterior(post, solve_map(post).estimate);
        const Vector score =
            quadrature_expectation(q, [&](const Vector& u) { return post.log_density_gradient(u).gradient; }).value;
        CHECK(score.lpNorm<Eigen::Infinity>() <= 1e-8);
    }

    // Reference from adaptive cubature split along u1 - u0 = +-delta.
    const Posterior huber(Fidelity(NoiseModel::Gaussian, conv, vec({3.0, 1.0})), Prior(PriorKind::HuberTv, 1.0, 0.5),
                          1.0);
    const auto q = quadrature_posterior(huber, solve_map(huber).estimate);
    const Vector mean = quadrature_expectation(q, [](const Vector& u) { return u; }).value;
    CHECK(std::abs(mean[0] - 2.388256271688338) <= 1e-8);
    CHECK(std::abs(mean[1] - 1.6117437283116611) <= 1e-8);
}

TEST_CASE("quadrature box grows along correlated directions") {
    // Nearly collinear blur: the posterior is long and thin along (1, -1).
    const Matrix k = (Matrix(2, 2) << 1.0, 0.9, 0.9, 1.0).finished();
    const Vector f = vec({1.0, 2.0});
    const Posterior post(Fidelity(NoiseModel::Gaussian, ForwardOperator::dense(k), f), Prior(PriorKind::Tikhonov),
                         0.05);
    const auto oracle = bregbayes::testing::gaussian_tikhonov_moments(k, f, 0.05);
    const auto q = quadrature_posterior(post, solve_map(post).estimate);
    const Vector mean = quadrature_expectation(q, [](const Vector& u) { return u; }).value;
    CHECK((mean - oracle.mean).lpNorm<Eigen::Infinity>() <= 1e-8);
    const double var0 =
        quadrature_expectation(q, [&](const Vector& u) { return vec({std::pow(u[0] - oracle.mean[0], 2)}); }).value[0];
    CHECK(std::abs(var0 - oracle.covariance(0, 0)) <= 1e-8);
}

TEST_CASE("three-dimensional huber quadrature in difference coordinates") {
    const Posterior post(Fidelity(NoiseModel::Gaussian, ForwardOperator::identity(3), vec({1.0, 2.0, 0.5})),
                         Prior(PriorKind::HuberTv, 1.0, 0.5), 1.0);
    const auto q = quadrature_posterior(post, solve_map(post).estimate);
    CHECK_FALSE(q.transform.isIdentity(0.0));
    const Vector score =
        quadrature_expectation(q, [&](const Vector& u) { return post.log_density_gradient(u).gradient; }).value;
    CHECK(score.lpNorm<Eigen::Infinity>() <= 1e-8);
}
