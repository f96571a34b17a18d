#include "bregbayes/cm_estimator.hpp"

#include "bregbayes/rng.hpp"

#include <gsl/gsl_integration.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <random>

namespace bregbayes {

std::string_view to_string(SamplerKind kind) {
    return kind == SamplerKind::Rwm ? "rwm" : "mala";
}

SamplerKind sampler_kind_from_string(std::string_view name) {
    if (name == "rwm") return SamplerKind::Rwm;
    if (name == "mala") return SamplerKind::Mala;
    throw InputError("unknown sampler '" + std::string(name) + "'");
}

void SamplerSettings::validate() const {
    std::vector<std::string> errors;
    if (chains < 1) errors.emplace_back("sampler.chains must be at least 1");
    if (iterations < 1) errors.emplace_back("sampler.iterations must be positive");
    if (burn_in < 0) errors.emplace_back("sampler.burn_in must be nonnegative");
    if (thin < 1) errors.emplace_back("sampler.thin must be at least 1");
    if (burn_in >= iterations) errors.emplace_back("sampler.burn_in must be smaller than sampler.iterations");
    else if ((iterations - burn_in) / std::max(thin, 1L) < 2)
        errors.emplace_back("sampler settings retain fewer than two samples per chain");
    if (!(initial_scale > 0.0) || !std::isfinite(initial_scale))
        errors.emplace_back("sampler.initial_scale must be positive");
    if (!(acceptance_low > 0.0 && acceptance_low < acceptance_high && acceptance_high < 1.0))
        errors.emplace_back("sampler acceptance window must satisfy 0 < low < high < 1");
    if (!(start_jitter >= 0.0) || !std::isfinite(start_jitter))
        errors.emplace_back("sampler.start_jitter must be nonnegative");
    if (!errors.empty()) throw ConfigError(std::move(errors));
}

namespace {

constexpr double kAcceptanceWarnLow = 0.05;
constexpr double kAcceptanceWarnHigh = 0.8;

struct State {
    Vector x;
    double logp;
    Vector grad;
};

Chain run_sampler(const Posterior& post, const SamplerSettings& cfg, std::uint64_t seed, const VectorRef& start,
                  bool mala) {
    cfg.validate();
    if (mala && !post.smooth())
        throw ConfigError("mala requires a smooth posterior (gaussian/poisson fidelity, tikhonov/huber_tv prior)");
    if (start.size() != post.dim()) throw InputError("sampler: start has the wrong dimension");
    require_finite(start, "sampler start");
    if (!post.in_domain(start)) throw DomainError("sampler: start outside the posterior domain");

    CounterRng rng(seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> uniform;
    const Index n = post.dim();

    auto evaluate = [&](Vector x) {
        State s{std::move(x), 0.0, {}};
        s.logp = post.log_density(s.x);
        if (mala && std::isfinite(s.logp)) s.grad = post.log_density_gradient(s.x).gradient;
        return s;
    };

    State cur = evaluate(Vector(start));
    const long kept = (cfg.iterations - cfg.burn_in) / cfg.thin;
    Chain chain;
    chain.seed = seed;
    chain.burn_in = cfg.burn_in;
    chain.thin = cfg.thin;
    chain.start = start;
    chain.samples.resize(n, kept);

    const double target = 0.5 * (cfg.acceptance_low + cfg.acceptance_high);
    double log_scale = std::log(cfg.initial_scale);
    Vector z(n);
    long stored = 0;
    for (long it = 0; it < cfg.iterations; ++it) {
        const double h = std::exp(log_scale);
        for (Index i = 0; i < n; ++i) z[i] = normal(rng);
        Vector y = mala ? Vector(cur.x + 0.5 * h * cur.grad + std::sqrt(h) * z) : Vector(cur.x + h * z);

        double log_ratio = -kInf;
        State prop;
        if (post.in_domain(y)) {
            prop = evaluate(std::move(y));
            if (std::isfinite(prop.logp)) {
                log_ratio = prop.logp - cur.logp;
                if (mala) {
                    const Vector fwd = prop.x - cur.x - 0.5 * h * cur.grad;
                    const Vector bwd = cur.x - prop.x - 0.5 * h * prop.grad;
                    log_ratio += (fwd.squaredNorm() - bwd.squaredNorm()) / (2.0 * h);
                }
            }
        }
        const double accept_prob = log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
        const bool accept = uniform(rng) < accept_prob;

        if (it < cfg.burn_in) {
            log_scale += std::pow(static_cast<double>(it + 1), -0.6) * (accept_prob - target);
        } else {
            ++chain.proposed;
            if (accept) ++chain.accepted;
        }
        if (accept) cur = std::move(prop);
        if (it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thin == 0 && stored < kept)
            chain.samples.col(stored++) = cur.x;
    }
    chain.proposal_scale = std::exp(log_scale);
    chain.acceptance_rate =
        chain.proposed > 0 ? static_cast<double>(chain.accepted) / static_cast<double>(chain.proposed) : 0.0;
    chain.acceptance_warning =
        chain.acceptance_rate < kAcceptanceWarnLow || chain.acceptance_rate > kAcceptanceWarnHigh;
    return chain;
}

}  // namespace

Chain sample_posterior_rwm(const Posterior& post, const SamplerSettings& cfg, std::uint64_t seed,
                           const VectorRef& start) {
    return run_sampler(post, cfg, seed, start, false);
}

Chain sample_posterior_mala(const Posterior& post, const SamplerSettings& cfg, std::uint64_t seed,
                            const VectorRef& start) {
    return run_sampler(post, cfg, seed, start, true);
}

std::vector<Chain> run_chains(const Posterior& post, const SamplerSettings& cfg, std::uint64_t master_seed,
                              const VectorRef& centre) {
    cfg.validate();
    if (!post.in_domain(centre)) throw DomainError("run_chains: centre outside the posterior domain");
    std::vector<Chain> chains;
    chains.reserve(static_cast<std::size_t>(cfg.chains));
    for (int k = 0; k < cfg.chains; ++k) {
        const std::uint64_t seed = derive_seed(master_seed, static_cast<std::uint64_t>(k));
        CounterRng start_rng = CounterRng(seed).split(1);
        std::normal_distribution<double> normal;
        Vector jitter(centre.size());
        for (Index i = 0; i < jitter.size(); ++i) jitter[i] = cfg.start_jitter * normal(start_rng);
        Vector start = centre + jitter;
        for (int tries = 0; tries < 60 && !post.in_domain(start); ++tries) {
            jitter *= 0.5;
            start = centre + jitter;
        }
        if (!post.in_domain(start)) start = centre;
        chains.push_back(cfg.kind == SamplerKind::Mala ? sample_posterior_mala(post, cfg, seed, start)
                                                       : sample_posterior_rwm(post, cfg, seed, start));
    }
    return chains;
}

// ---------------------------------------------------------------------------
// Diagnostics

namespace {

double mean_of(const double* x, long n) { return std::accumulate(x, x + n, 0.0) / static_cast<double>(n); }

double variance_of(const double* x, long n, double mean) {
    double acc = 0.0;
    for (long i = 0; i < n; ++i) acc += (x[i] - mean) * (x[i] - mean);
    return acc / static_cast<double>(n - 1);
}

// Autocovariance at lag t with 1/n normalization.
double autocovariance(const double* x, long n, double mean, long t) {
    double acc = 0.0;
    for (long i = 0; i + t < n; ++i) acc += (x[i] - mean) * (x[i + t] - mean);
    return acc / static_cast<double>(n);
}

}  // namespace

double effective_sample_size(const VectorRef& values, const std::vector<long>& chain_lengths) {
    if (chain_lengths.empty()) throw InputError("effective_sample_size: no chains");
    const long len = chain_lengths.front();
    for (long l : chain_lengths)
        if (l != len) throw InputError("effective_sample_size: chains must have equal length");
    const long chains = static_cast<long>(chain_lengths.size());
    if (values.size() != len * chains) throw InputError("effective_sample_size: length mismatch");
    if (len < 4) return static_cast<double>(len * chains);

    std::vector<double> means(chains), vars(chains);
    for (long m = 0; m < chains; ++m) {
        const double* x = values.data() + m * len;
        means[m] = mean_of(x, len);
        vars[m] = variance_of(x, len, means[m]);
    }
    const double w = std::accumulate(vars.begin(), vars.end(), 0.0) / static_cast<double>(chains);
    if (!(w > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    double b_over_n = 0.0;
    if (chains > 1) {
        const double grand = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(chains);
        for (double m : means) b_over_n += (m - grand) * (m - grand);
        b_over_n /= static_cast<double>(chains - 1);
    }
    const double nd = static_cast<double>(len);
    const double var_plus = (nd - 1.0) / nd * w + b_over_n;

    auto rho = [&](long t) {
        double acov = 0.0;
        for (long m = 0; m < chains; ++m) acov += autocovariance(values.data() + m * len, len, means[m], t);
        acov /= static_cast<double>(chains);
        return 1.0 - (w - acov) / var_plus;
    };

    // Geyer's initial positive sequence on pairs of lags, then made monotone.
    std::vector<double> r(static_cast<std::size_t>(len), 0.0);
    r[0] = 1.0;
    double even = 1.0;
    double odd = rho(1);
    r[1] = odd;
    long s = 1;
    while (s < len - 4 && even + odd > 0.0) {
        even = rho(s + 1);
        odd = rho(s + 2);
        if (even + odd >= 0.0) {
            r[s + 1] = even;
            r[s + 2] = odd;
        }
        s += 2;
    }
    const long max_s = s;
    if (r[max_s] > 0.0 && max_s + 1 < len) r[max_s + 1] = r[max_s];
    for (long t = 1; t <= max_s - 3; t += 2) {
        if (r[t + 1] + r[t + 2] > r[t - 1] + r[t]) {
            r[t + 1] = 0.5 * (r[t - 1] + r[t]);
            r[t + 2] = r[t + 1];
        }
    }
    double tau = -1.0;
    for (long t = 0; t <= max_s; ++t) tau += 2.0 * r[t];
    if (max_s + 1 < len) tau += r[max_s + 1];
    const double total = nd * static_cast<double>(chains);
    return std::min(total / tau, total * std::log10(total));
}

Diagnostics chain_diagnostics(const std::vector<Chain>& chains) {
    if (chains.empty()) throw InputError("chain_diagnostics: no chains");
    const Index n = chains.front().samples.rows();
    const long len = chains.front().samples.cols();
    for (const auto& c : chains) {
        if (c.samples.rows() != n || c.samples.cols() != len)
            throw InputError("chain_diagnostics: chains must have equal shape");
    }
    if (len < 4) throw InputError("chain_diagnostics: need at least four samples per chain");
    const long m = static_cast<long>(chains.size());

    Diagnostics d;
    d.total_samples = len * m;
    d.ess = Vector::Zero(n);
    d.rhat = Vector::Constant(n, std::numeric_limits<double>::quiet_NaN());
    d.degenerate.assign(static_cast<std::size_t>(n), false);
    d.rhat_available = m >= 2;

    const std::vector<long> lengths(static_cast<std::size_t>(m), len);
    Vector series(len * m);
    for (Index i = 0; i < n; ++i) {
        for (long k = 0; k < m; ++k) series.segment(k * len, len) = chains[k].samples.row(i).transpose();
        d.ess[i] = effective_sample_size(series, lengths);

        // Split R-hat over 2m half chains.
        const long half = len / 2;
        std::vector<double> means, vars;
        for (long k = 0; k < m; ++k) {
            for (long part = 0; part < 2; ++part) {
                const double* x = series.data() + k * len + part * (len - half);
                const double mu = mean_of(x, half);
                means.push_back(mu);
                vars.push_back(variance_of(x, half, mu));
            }
        }
        const double w = std::accumulate(vars.begin(), vars.end(), 0.0) / static_cast<double>(vars.size());
        if (!(w > 0.0)) {
            d.degenerate[static_cast<std::size_t>(i)] = true;
            d.flagged = true;
            continue;
        }
        if (!d.rhat_available) continue;
        const double grand = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
        double b_over_n = 0.0;
        for (double mu : means) b_over_n += (mu - grand) * (mu - grand);
        b_over_n /= static_cast<double>(means.size() - 1);
        const double hn = static_cast<double>(half);
        const double var_plus = (hn - 1.0) / hn * w + b_over_n;
        d.rhat[i] = std::sqrt(var_plus / w);
        if (d.rhat[i] > kRhatThreshold) d.flagged = true;
    }
    return d;
}

CmEstimate cm_estimate(const std::vector<Chain>& chains, bool allow_unconverged) {
    if (chains.empty()) throw InputError("cm_estimate: no chains");
    for (const auto& c : chains)
        if (c.samples.cols() == 0) throw InputError("cm_estimate: empty chain");

    CmEstimate out;
    out.diagnostics = chain_diagnostics(chains);
    if (out.diagnostics.flagged && !allow_unconverged)
        throw NumericalError("cm_estimate: R-hat above " + std::to_string(kRhatThreshold) +
                             " or degenerate chains; rerun with more iterations or override");

    const Index n = chains.front().samples.rows();
    Vector sum = Vector::Zero(n);
    long total = 0;
    for (const auto& c : chains) {
        sum += c.samples.rowwise().sum();
        total += c.samples.cols();
    }
    out.mean = sum / static_cast<double>(total);
    Vector ss = Vector::Zero(n);
    for (const auto& c : chains) ss += (c.samples.colwise() - out.mean).rowwise().squaredNorm();
    const Vector sd = (ss / static_cast<double>(total - 1)).cwiseSqrt();
    out.standard_error.resize(n);
    for (Index i = 0; i < n; ++i) {
        const double ess = out.diagnostics.ess[i];
        out.standard_error[i] = sd[i] == 0.0 ? 0.0 : sd[i] / std::sqrt(ess);
    }
    return out;
}

void write_chain_csv(const Chain& chain, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << "sample";
    for (Index i = 0; i < chain.samples.rows(); ++i) os << ",u" << i;
    os << '\n' << std::setprecision(17);
    for (Index k = 0; k < chain.samples.cols(); ++k) {
        os << k;
        for (Index i = 0; i < chain.samples.rows(); ++i) os << ',' << chain.samples(i, k);
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Quadrature

namespace {

struct GlTableDeleter {
    void operator()(gsl_integration_glfixed_table* t) const { gsl_integration_glfixed_table_free(t); }
};

Matrix fd_hessian(const std::function<double(const Vector&)>& f, const Vector& c) {
    const Index n = c.size();
    Vector h(n);
    for (Index i = 0; i < n; ++i) h[i] = 1e-4 * (1.0 + std::abs(c[i]));
    // Shrink steps until every stencil point is evaluable.
    for (int tries = 0; tries < 30; ++tries) {
        bool ok = true;
        for (Index i = 0; i < n && ok; ++i)
            for (Index j = 0; j < n && ok; ++j)
                for (double si : {-1.0, 1.0})
                    for (double sj : {-1.0, 1.0}) {
                        Vector x = c;
                        x[i] += si * h[i];
                        x[j] += sj * h[j];
                        if (!std::isfinite(f(x))) ok = false;
                    }
        if (ok) break;
        h *= 0.1;
    }
    const double f0 = f(c);
    Matrix hess(n, n);
    for (Index i = 0; i < n; ++i) {
        Vector xp = c, xm = c;
        xp[i] += h[i];
        xm[i] -= h[i];
        hess(i, i) = (f(xp) - 2.0 * f0 + f(xm)) / (h[i] * h[i]);
        for (Index j = 0; j < i; ++j) {
            Vector pp = c, pm = c, mp = c, mm = c;
            pp[i] += h[i];
            pp[j] += h[j];
            pm[i] += h[i];
            pm[j] -= h[j];
            mp[i] -= h[i];
            mp[j] += h[j];
            mm[i] -= h[i];
            mm[j] -= h[j];
            hess(i, j) = hess(j, i) = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h[i] * h[j]);
        }
    }
    return hess;
}

using Objective = std::function<double(const Vector&)>;

constexpr int kMaxBoxRounds = 12;

Vector posterior_sd(const Objective& f, const Vector& c) {
    const Index n = c.size();
    const Matrix hess = fd_hessian(f, c);
    Vector sd(n);
    Eigen::LLT<Matrix> llt(hess);
    if (hess.allFinite() && llt.info() == Eigen::Success) {
        const Matrix inv = llt.solve(Matrix::Identity(n, n));
        sd = inv.diagonal().cwiseMax(0.0).cwiseSqrt();
    } else {
        sd.setConstant(-1.0);
    }
    for (Index i = 0; i < n; ++i) {
        if (std::isfinite(sd[i]) && sd[i] > 0.0) continue;
        const double hii = hess(i, i);
        sd[i] = std::isfinite(hii) && hii > 0.0 ? 1.0 / std::sqrt(hii) : 1.0;
    }
    return sd;
}

// Lower-triangular L with L L^T the inverse Hessian at c; diagonal standard
// deviations when the Hessian is not positive definite.
Matrix whitening(const Posterior& post, const Vector& c) {
    const Index n = c.size();
    const Matrix hess = fd_hessian([&](const Vector& x) { return post.objective(x); }, c);
    Eigen::LLT<Matrix> llt(hess);
    if (hess.allFinite() && llt.info() == Eigen::Success) {
        Eigen::LLT<Matrix> cov(llt.solve(Matrix::Identity(n, n)));
        if (cov.info() == Eigen::Success) {
            const Matrix l = cov.matrixL();
            if (l.allFinite() && l.diagonal().minCoeff() > 0.0) return l;
        }
    }
    return posterior_sd([&](const Vector& x) { return post.objective(x); }, c).asDiagonal();
}

bool laplace_diagonal(const Posterior& post) {
    const Fidelity& fid = post.fidelity();
    return fid.model() == NoiseModel::Laplace && fid.op().is_diagonal() && fid.op().output_dim() == post.dim();
}

// Linear map u = T z whose z axes carry the kinks. Huber-TV has curvature
// jumps at u_{i+1} - u_i = +-delta, which become axis-aligned in difference
// coordinates z_0 = u_0, z_i = u_i - u_{i-1}. Laplace kinks at u_i = f_i / K_ii
// are axis-aligned in u and take precedence.
Matrix quadrature_transform(const Posterior& post) {
    const Index n = post.dim();
    Matrix t = Matrix::Identity(n, n);
    if (post.prior().kind() == PriorKind::HuberTv && !laplace_diagonal(post))
        t = Matrix::Ones(n, n).triangularView<Eigen::Lower>();
    return t;
}

// Kink locations per z coordinate.
std::vector<std::vector<double>> axis_kinks(const Posterior& post, const Matrix& transform) {
    const Index n = post.dim();
    std::vector<std::vector<double>> kinks(static_cast<std::size_t>(n));
    if (!transform.isIdentity(0.0)) {
        for (Index i = 1; i < n; ++i) {
            kinks[i].push_back(-post.prior().huber_delta());
            kinks[i].push_back(post.prior().huber_delta());
        }
        return kinks;
    }
    const Fidelity& fid = post.fidelity();
    if (laplace_diagonal(post)) {
        const Vector diag = fid.op().to_dense().diagonal();
        for (Index i = 0; i < n; ++i)
            if (diag[i] != 0.0) kinks[i].push_back(fid.data()[i] / diag[i]);
    }
    if (post.prior().kind() == PriorKind::L1)
        for (auto& k : kinks) k.push_back(0.0);
    return kinks;
}

// Extend [centre, edge] outward along axis i until the objective rises by
// `drop` or the domain ends; returns the new edge.
double extend_edge(const Objective& f, const Vector& centre, Index i, double edge, double drop, bool& at_domain) {
    at_domain = false;
    const double f0 = f(centre);
    Vector x = centre;
    double dist = edge - centre[i];
    for (int k = 0; k < 200; ++k) {
        x[i] = centre[i] + dist;
        const double fx = f(x);
        if (!std::isfinite(fx)) {
            // Bisect to the domain boundary.
            double in = 0.0, out = dist;
            for (int b = 0; b < 200; ++b) {
                const double mid = 0.5 * (in + out);
                if (mid == in || mid == out) break;
                x[i] = centre[i] + mid;
                if (std::isfinite(f(x))) in = mid;
                else out = mid;
            }
            at_domain = true;
            return centre[i] + in;
        }
        if (fx - f0 >= drop) return centre[i] + dist;
        dist *= 2.0;
    }
    return centre[i] + dist;
}

}  // namespace

int default_quadrature_nodes(Index n) { return n == 1 ? 257 : 65; }

namespace {

using GlTable = std::unique_ptr<gsl_integration_glfixed_table, GlTableDeleter>;

// Gauss-Legendre nodes over [lo, hi] split at the interior cuts.
void panel_nodes(double lo, double hi, std::vector<double> cuts, int per_panel, const GlTable& table,
                 std::vector<double>& x, std::vector<double>& w) {
    x.clear();
    w.clear();
    cuts.erase(std::remove_if(cuts.begin(), cuts.end(), [&](double c) { return !(c > lo && c < hi); }), cuts.end());
    cuts.push_back(lo);
    cuts.push_back(hi);
    std::sort(cuts.begin(), cuts.end());
    const double merge = 1e-12 * (hi - lo);
    for (std::size_t p = 0; p + 1 < cuts.size(); ++p) {
        if (cuts[p + 1] - cuts[p] <= merge) continue;
        for (int j = 0; j < per_panel; ++j) {
            double xj = 0.0, wj = 0.0;
            gsl_integration_glfixed_point(cuts[p], cuts[p + 1], static_cast<std::size_t>(j), &xj, &wj, table.get());
            x.push_back(xj);
            w.push_back(wj);
        }
    }
}

// Sets a . u = b across which the integrand is not smooth: Laplace residual
// zeros, the Poisson domain edge, l1 axes and Huber-TV transition lines.
struct Hyperplane {
    Vector a;
    double b;
};

std::vector<Hyperplane> kink_hyperplanes(const Posterior& post) {
    const Index n = post.dim();
    std::vector<Hyperplane> out;
    const Fidelity& fid = post.fidelity();
    if (fid.model() != NoiseModel::Gaussian) {
        const Matrix k = fid.op().to_dense();
        for (Index i = 0; i < k.rows(); ++i) {
            if (k.row(i).isZero(0.0)) continue;
            const double b = fid.model() == NoiseModel::Laplace ? fid.data()[i] : fid.poisson_floor();
            out.push_back({k.row(i).transpose(), b});
        }
    }
    if (post.prior().kind() == PriorKind::L1) {
        for (Index i = 0; i < n; ++i) out.push_back({Vector::Unit(n, i), 0.0});
    } else if (post.prior().kind() == PriorKind::HuberTv) {
        for (Index i = 0; i + 1 < n; ++i) {
            const Vector a = Vector::Unit(n, i + 1) - Vector::Unit(n, i);
            out.push_back({a, post.prior().huber_delta()});
            out.push_back({a, -post.prior().huber_delta()});
        }
    }
    return out;
}

struct GridBuild {
    Matrix nodes;
    Vector logw;
    double max_log = -kInf;
    double max_lp = -kInf;
    // Largest log density on the lower and upper face of each axis.
    Vector face_lower;
    Vector face_upper;
};

void record(GridBuild& g, Index k, const Posterior& post, double log_weight, const std::vector<std::pair<Index, bool>>& faces) {
    const double lp = post.log_density(g.nodes.col(k));
    g.logw[k] = std::isfinite(lp) ? log_weight + lp : -kInf;
    g.max_log = std::max(g.max_log, g.logw[k]);
    if (!std::isfinite(lp)) return;
    g.max_lp = std::max(g.max_lp, lp);
    for (const auto& [axis, upper] : faces) {
        double& f = upper ? g.face_upper[axis] : g.face_lower[axis];
        f = std::max(f, lp);
    }
}

// Tensor grid in z coordinates, u = transform * z, with per-axis kinks.
GridBuild tensor_grid(const Posterior& post, const Matrix& transform, const Vector& lower, const Vector& upper,
                      const std::vector<std::vector<double>>& kinks, int per_panel, const GlTable& table) {
    const Index n = post.dim();
    std::vector<std::vector<double>> ax(n), aw(n);
    for (Index i = 0; i < n; ++i) panel_nodes(lower[i], upper[i], kinks[i], per_panel, table, ax[i], aw[i]);
    Index total = 1;
    for (Index i = 0; i < n; ++i) total *= static_cast<Index>(ax[i].size());
    GridBuild g;
    g.nodes.resize(n, total);
    g.logw.resize(total);
    g.face_lower = g.face_upper = Vector::Constant(n, -kInf);
    std::vector<std::size_t> idx(static_cast<std::size_t>(n), 0);
    std::vector<std::pair<Index, bool>> faces;
    Vector z(n);
    for (Index k = 0; k < total; ++k) {
        double lw = 0.0;
        faces.clear();
        for (Index i = 0; i < n; ++i) {
            z[i] = ax[i][idx[i]];
            lw += std::log(aw[i][idx[i]]);
            if (idx[i] == 0) faces.emplace_back(i, false);
            if (idx[i] + 1 == ax[i].size()) faces.emplace_back(i, true);
        }
        g.nodes.col(k) = transform * z;
        record(g, k, post, lw, faces);
        for (Index i = n - 1; i >= 0; --i) {
            if (++idx[i] < ax[i].size()) break;
            idx[i] = 0;
        }
    }
    return g;
}

// Iterated grid on a planar box: the outer axis is cut where kink lines meet
// each other or the inner box edges, the inner axis where each line crosses
// the current outer node, so every panel integrand is smooth.
GridBuild planar_grid(const Posterior& post, const std::vector<Hyperplane>& kinks, const Vector& origin,
                      const Matrix& transform, const Vector& lower, const Vector& upper, int per_panel,
                      const GlTable& table) {
    // Kink lines in z coordinates: a . (origin + T z) = b.
    std::vector<Hyperplane> planes;
    for (const auto& h : kinks) planes.push_back({transform.transpose() * h.a, h.b - h.a.dot(origin)});
    std::vector<Hyperplane> lines = planes;
    lines.push_back({Vector::Unit(2, 1), lower[1]});
    lines.push_back({Vector::Unit(2, 1), upper[1]});
    const double tiny = 1e-14;
    std::vector<double> outer_cuts;
    for (const auto& h : planes)
        if (std::abs(h.a[1]) <= tiny * h.a.norm()) outer_cuts.push_back(h.b / h.a[0]);
    for (std::size_t p = 0; p < lines.size(); ++p) {
        for (std::size_t r = p + 1; r < lines.size(); ++r) {
            const Vector& a = lines[p].a;
            const Vector& c = lines[r].a;
            const double det = a[0] * c[1] - a[1] * c[0];
            if (std::abs(det) <= tiny * a.norm() * c.norm()) continue;
            outer_cuts.push_back((lines[p].b * c[1] - lines[r].b * a[1]) / det);
        }
    }
    std::vector<double> x0, w0, x1, w1;
    panel_nodes(lower[0], upper[0], outer_cuts, per_panel, table, x0, w0);

    std::vector<std::vector<double>> inner_x(x0.size()), inner_w(x0.size());
    Index total = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        std::vector<double> cuts;
        for (const auto& h : planes)
            if (std::abs(h.a[1]) > tiny * h.a.norm()) cuts.push_back((h.b - h.a[0] * x0[i]) / h.a[1]);
        panel_nodes(lower[1], upper[1], cuts, per_panel, table, inner_x[i], inner_w[i]);
        total += static_cast<Index>(inner_x[i].size());
    }

    GridBuild g;
    g.nodes.resize(2, total);
    g.logw.resize(total);
    g.face_lower = g.face_upper = Vector::Constant(2, -kInf);
    std::vector<std::pair<Index, bool>> faces;
    Index k = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        for (std::size_t j = 0; j < inner_x[i].size(); ++j, ++k) {
            faces.clear();
            if (i == 0) faces.emplace_back(0, false);
            if (i + 1 == x0.size()) faces.emplace_back(0, true);
            if (j == 0) faces.emplace_back(1, false);
            if (j + 1 == inner_x[i].size()) faces.emplace_back(1, true);
            g.nodes.col(k) = origin + transform * Vector{{x0[i], inner_x[i][j]}};
            record(g, k, post, std::log(w0[i]) + std::log(inner_w[i][j]), faces);
        }
    }
    return g;
}

Vector normalized_weights(const GridBuild& g) {
    // Scalar exp: Eigen's vectorized exp does not send -inf to exactly zero.
    Vector w = (g.logw.array() - g.max_log).unaryExpr([](double x) { return std::exp(x); }).matrix();
    return w / w.sum();
}

}  // namespace

QuadratureMeasure quadrature_posterior(const Posterior& post, const VectorRef& centre_in,
                                       const QuadratureSettings& cfg) {
    const Index n = post.dim();
    if (n > 3) throw UnsupportedError("quadrature is limited to dimension <= 3, got " + std::to_string(n));
    if (centre_in.size() != n) throw InputError("quadrature_posterior: centre has the wrong dimension");
    if (!(cfg.width > 0.0)) throw ConfigError("quadrature width must be positive");
    if (cfg.nodes < 0 || cfg.nodes == 1) throw ConfigError("quadrature nodes must be at least 2");
    const Vector centre = centre_in;
    if (!post.in_domain(centre)) throw DomainError("quadrature_posterior: centre outside the domain");
    const int per_panel = cfg.nodes > 0 ? cfg.nodes : default_quadrature_nodes(n);
    const bool planar = n == 2;

    QuadratureMeasure q;
    q.nodes_per_panel = per_panel;
    // Slightly under w^2 / 2 so that an exact Gaussian box is not doubled over round-off.
    const double drop = 0.499 * cfg.width * cfg.width;
    GlTable table(gsl_integration_glfixed_table_alloc(static_cast<std::size_t>(per_panel)));
    if (!table) throw NumericalError("quadrature: cannot allocate Gauss-Legendre table");
    const auto planes = planar ? kink_hyperplanes(post) : std::vector<Hyperplane>{};

    // Box around zc along the axes of the current coordinates, widened until
    // no face carries density within `drop` of the peak.
    const auto build = [&](const Vector& zc, const std::vector<std::vector<double>>& kinks, bool whitened) {
        const Objective objective = [&](const Vector& z) { return post.objective(q.origin + q.transform * z); };
        const Vector sd = whitened ? Vector::Ones(n) : posterior_sd(objective, zc);
        q.box_lower.resize(n);
        q.box_upper.resize(n);
        // Faces on the domain edge stay put on the tensor grid; the planar
        // grid cuts along the domain edge and may grow past it.
        std::vector<bool> lower_fixed(static_cast<std::size_t>(n)), upper_fixed(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            bool hit = false;
            q.box_lower[i] = extend_edge(objective, zc, i, zc[i] - cfg.width * sd[i], drop, hit);
            lower_fixed[i] = hit && !planar;
            q.box_upper[i] = extend_edge(objective, zc, i, zc[i] + cfg.width * sd[i], drop, hit);
            upper_fixed[i] = hit && !planar;
        }
        GridBuild g;
        for (int round = 0; round < kMaxBoxRounds; ++round) {
            g = planar ? planar_grid(post, planes, q.origin, q.transform, q.box_lower, q.box_upper, per_panel, table)
                       : tensor_grid(post, q.transform, q.box_lower, q.box_upper, kinks, per_panel, table);
            if (!std::isfinite(g.max_log)) break;
            bool grown = false;
            for (Index i = 0; i < n; ++i) {
                if (!lower_fixed[i] && g.face_lower[i] > g.max_lp - drop) {
                    q.box_lower[i] = zc[i] - 2.0 * (zc[i] - q.box_lower[i]);
                    grown = true;
                }
                if (!upper_fixed[i] && g.face_upper[i] > g.max_lp - drop) {
                    q.box_upper[i] = zc[i] + 2.0 * (q.box_upper[i] - zc[i]);
                    grown = true;
                }
            }
            if (!grown) break;
        }
        if (!std::isfinite(g.max_log)) throw NumericalError("quadrature: no node inside the domain");
        return g;
    };

    GridBuild g;
    if (planar) {
        // Whiten with the curvature at the centre, then once more with the
        // moments of that first pass, which track heavy or skewed tails.
        q.origin = centre;
        q.transform = whitening(post, centre);
        g = build(Vector::Zero(n), {}, false);
        const Vector w = normalized_weights(g);
        const Vector mean = g.nodes * w;
        const Matrix dev = g.nodes.colwise() - mean;
        const Matrix cov = dev * w.asDiagonal() * dev.transpose();
        Eigen::LLT<Matrix> llt(cov);
        if (cov.allFinite() && llt.info() == Eigen::Success && post.in_domain(mean)) {
            q.origin = mean;
            q.transform = llt.matrixL();
            g = build(Vector::Zero(n), {}, true);
        }
    } else {
        // Tensor grids use coordinates that align the kinks with the axes.
        q.origin = Vector::Zero(n);
        q.transform = quadrature_transform(post);
        g = build(q.transform.triangularView<Eigen::Lower>().solve(centre), axis_kinks(post, q.transform), false);
    }
    q.weights = normalized_weights(g);
    q.nodes = std::move(g.nodes);
    return q;
}

QuadratureExpectation quadrature_expectation(const QuadratureMeasure& measure,
                                             const std::function<Vector(const Vector&)>& g) {
    QuadratureExpectation out;
    double kept = 0.0;
    for (Index k = 0; k < measure.nodes.cols(); ++k) {
        const double w = measure.weights[k];
        if (w == 0.0) continue;
        const Vector v = g(measure.nodes.col(k));
        if (!v.allFinite()) {
            out.excluded_weight += w;
            continue;
        }
        if (out.value.size() == 0) out.value = Vector::Zero(v.size());
        out.value += w * v;
        kept += w;
    }
    if (!(kept > 0.0)) throw NumericalError("quadrature_expectation: integrand is not finite on any node");
    out.value /= kept;
    out.coverage_warning = out.excluded_weight > 0.0;
    return out;
}

}  // namespace bregbayes
