#include "bregbayes/bayes_cost.hpp"

#include <cmath>

namespace bregbayes {

SampleSet SampleSet::from_chains(const std::vector<Chain>& chains) {
    if (chains.empty()) throw InputError("SampleSet: no chains");
    SampleSet s;
    const Index n = chains.front().samples.rows();
    Index total = 0;
    for (const auto& c : chains) {
        if (c.samples.rows() != n) throw InputError("SampleSet: chains of different dimension");
        total += c.samples.cols();
        s.chain_lengths.push_back(static_cast<long>(c.samples.cols()));
    }
    if (total == 0) throw InputError("SampleSet: empty chains");
    s.points.resize(n, total);
    Index offset = 0;
    for (const auto& c : chains) {
        s.points.middleCols(offset, c.samples.cols()) = c.samples;
        offset += c.samples.cols();
    }
    s.weights = Vector::Constant(total, 1.0 / static_cast<double>(total));
    return s;
}

SampleSet SampleSet::from_quadrature(const QuadratureMeasure& measure) {
    SampleSet s;
    // Zero-weight nodes may sit outside the domain; leave them out.
    Index kept = 0;
    for (Index k = 0; k < measure.weights.size(); ++k) kept += measure.weights[k] > 0.0;
    s.points.resize(measure.nodes.rows(), kept);
    s.weights.resize(kept);
    Index j = 0;
    for (Index k = 0; k < measure.weights.size(); ++k) {
        if (!(measure.weights[k] > 0.0)) continue;
        s.points.col(j) = measure.nodes.col(k);
        s.weights[j++] = measure.weights[k];
    }
    s.weights /= s.weights.sum();
    return s;
}

SampleSet SampleSet::from_points(Matrix points) {
    if (points.cols() == 0) throw InputError("SampleSet: no points");
    SampleSet s;
    s.weights = Vector::Constant(points.cols(), 1.0 / static_cast<double>(points.cols()));
    s.chain_lengths = {static_cast<long>(points.cols())};
    s.points = std::move(points);
    return s;
}

WeightedMean weighted_mean(const SampleSet& samples, const VectorRef& values) {
    if (values.size() != samples.size()) throw InputError("weighted_mean: length mismatch");
    WeightedMean out;
    out.count = static_cast<long>(values.size());
    double wsum = 0.0, acc = 0.0;
    for (Index j = 0; j < values.size(); ++j) {
        if (!std::isfinite(values[j])) {
            ++out.excluded;
            continue;
        }
        wsum += samples.weights[j];
        acc += samples.weights[j] * values[j];
    }
    if (!(wsum > 0.0)) throw NumericalError("weighted_mean: no finite values");
    out.value = acc / wsum;
    if (samples.is_quadrature()) return out;

    // Excluded entries are replaced by the mean so the chain layout survives.
    Vector series = values;
    double ss = 0.0;
    for (Index j = 0; j < series.size(); ++j) {
        if (!std::isfinite(series[j])) series[j] = out.value;
        ss += samples.weights[j] * (series[j] - out.value) * (series[j] - out.value);
    }
    const double kept = static_cast<double>(out.count - out.excluded);
    if (!(ss > 0.0) || kept < 2.0) return out;
    const double var = ss / wsum * kept / (kept - 1.0);
    const double ess = effective_sample_size(series, samples.chain_lengths);
    if (std::isfinite(ess) && ess > 0.0) out.standard_error = std::sqrt(var / ess);
    return out;
}

// ---------------------------------------------------------------------------

BayesCostEvaluator::BayesCostEvaluator(CostFunctional cost, const SampleSet& samples)
    : cost_(std::move(cost)), samples_(samples) {
    const Index n = samples_.dim();
    const Index count = samples_.size();
    if (count == 0) throw InputError("BayesCostEvaluator: empty sample set");
    included_.assign(static_cast<std::size_t>(count), true);
    const bool map_form = cost_.kind() == CostFunctional::Kind::MapForm;

    for (const auto& term : cost_.terms()) {
        TermCache c;
        c.f.resize(count);
        if (map_form) {
            c.q.resize(n, count);
            c.offset.resize(count);
        }
        for (Index j = 0; j < count; ++j) {
            const auto u = samples_.points.col(j);
            if (!term.functional.in_domain(u)) {
                included_[static_cast<std::size_t>(j)] = false;
                c.f[j] = kInf;
                if (map_form) {
                    c.q.col(j).setZero();
                    c.offset[j] = kInf;
                }
                continue;
            }
            c.f[j] = term.functional.value(u);
            if (!std::isfinite(c.f[j])) included_[static_cast<std::size_t>(j)] = false;
            if (map_form) {
                c.q.col(j) = term.functional.subgradient(u);
                c.offset[j] = c.f[j] - c.q.col(j).dot(u);
            }
        }
        cache_.push_back(std::move(c));
    }

    weights_ = samples_.weights;
    for (Index j = 0; j < count; ++j) {
        if (included_[static_cast<std::size_t>(j)]) continue;
        weights_[j] = 0.0;
        ++excluded_;
    }
    const double wsum = weights_.sum();
    if (!(wsum > 0.0)) throw NumericalError("Bayes cost: every sample has infinite cost");
    weights_ /= wsum;
    mean_ = samples_.points * weights_;
    for (auto& c : cache_) {
        Vector fw = c.f;
        for (Index j = 0; j < count; ++j)
            if (weights_[j] == 0.0) fw[j] = 0.0;
        c.f_mean = fw.dot(weights_);
        if (map_form) {
            Vector ow = c.offset;
            for (Index j = 0; j < count; ++j)
                if (weights_[j] == 0.0) ow[j] = 0.0;
            c.offset_mean = ow.dot(weights_);
            c.q_mean = c.q * weights_;
        }
    }
}

double BayesCostEvaluator::value(const VectorRef& u_hat) const {
    if (u_hat.size() != samples_.dim()) throw InputError("Bayes cost: estimate has the wrong dimension");
    double total = 0.0;
    for (std::size_t k = 0; k < cache_.size(); ++k) {
        const auto& term = cost_.terms()[k];
        const auto& c = cache_[k];
        if (!term.functional.in_domain(u_hat)) return kInf;
        const double fu = term.functional.value(u_hat);
        if (!std::isfinite(fu)) return kInf;
        double v;
        if (cost_.kind() == CostFunctional::Kind::MapForm) {
            v = fu - c.offset_mean - c.q_mean.dot(u_hat);
        } else {
            v = c.f_mean - fu - term.functional.subgradient(u_hat).dot(mean_ - u_hat);
        }
        total += term.weight * v;
    }
    return total;
}

Vector BayesCostEvaluator::gradient(const VectorRef& u_hat) const {
    Vector g = Vector::Zero(samples_.dim());
    for (std::size_t k = 0; k < cache_.size(); ++k) {
        const auto& term = cost_.terms()[k];
        if (!term.functional.in_domain(u_hat)) throw DomainError("Bayes cost gradient: estimate outside the domain");
        if (cost_.kind() == CostFunctional::Kind::MapForm) {
            g += term.weight * (term.functional.subgradient(u_hat) - cache_[k].q_mean);
        } else {
            g -= term.weight * term.functional.hessian_apply(u_hat, mean_ - u_hat);
        }
    }
    return g;
}

Vector BayesCostEvaluator::per_sample(const VectorRef& u_hat) const {
    const Index count = samples_.size();
    Vector out = Vector::Zero(count);
    for (std::size_t k = 0; k < cache_.size(); ++k) {
        const auto& term = cost_.terms()[k];
        const auto& c = cache_[k];
        if (!term.functional.in_domain(u_hat)) return Vector::Constant(count, kInf);
        const double fu = term.functional.value(u_hat);
        if (cost_.kind() == CostFunctional::Kind::MapForm) {
            for (Index j = 0; j < count; ++j) {
                const double d = fu - c.offset[j] - c.q.col(j).dot(u_hat);
                out[j] += term.weight * clip_bregman(d, std::abs(fu) + std::abs(c.f[j]));
            }
        } else {
            const Vector q = term.functional.subgradient(u_hat);
            const double base = fu - q.dot(u_hat);
            for (Index j = 0; j < count; ++j) {
                const double d = c.f[j] - base - q.dot(samples_.points.col(j));
                out[j] += term.weight * clip_bregman(d, std::abs(fu) + std::abs(c.f[j]));
            }
        }
    }
    for (Index j = 0; j < count; ++j)
        if (!included_[static_cast<std::size_t>(j)]) out[j] = kInf;
    return out;
}

CostEstimate BayesCostEvaluator::estimate(const VectorRef& u_hat) const {
    const Vector values = per_sample(u_hat);
    const WeightedMean m = weighted_mean(samples_, values);
    CostEstimate e;
    e.value = m.value;
    e.standard_error = m.standard_error;
    e.sample_count = m.count;
    e.excluded_count = m.excluded;
    e.exclusion_warning = static_cast<double>(m.excluded) > 0.01 * static_cast<double>(m.count);
    return e;
}

CostEstimate estimate_bayes_cost(const CostFunctional& cost, const VectorRef& u_hat, const SampleSet& samples) {
    return BayesCostEvaluator(cost, samples).estimate(u_hat);
}

// ---------------------------------------------------------------------------

MinimizeResult minimize_bayes_cost(const BayesCostEvaluator& evaluator, const VectorRef& init,
                                   const MinimizeSettings& cfg) {
    constexpr int kMaxConsecutiveIncreases = 100;
    Vector x = init;
    double fx = evaluator.value(x);
    if (!std::isfinite(fx)) throw NumericalError("minimize_bayes_cost: starting point has infinite Bayes cost");
    MinimizeResult best{x, fx, 0};
    double step = cfg.initial_step;
    int increases = 0;
    long it = 0;
    for (; it < cfg.max_iterations; ++it) {
        if (step < cfg.step_tolerance * (1.0 + x.lpNorm<Eigen::Infinity>())) break;
        const Vector g = evaluator.gradient(x);
        const double gn = g.norm();
        if (!(gn > 0.0) || !std::isfinite(gn)) break;
        Vector y = x - (step / gn) * g;
        const double fy = evaluator.value(y);
        if (!std::isfinite(fy)) {
            step *= 0.5;
            continue;
        }
        if (fy > fx) {
            step *= 0.5;
            if (++increases >= kMaxConsecutiveIncreases)
                throw NumericalError("minimize_bayes_cost: objective increased on " +
                                     std::to_string(kMaxConsecutiveIncreases) +
                                     " consecutive steps (last value " + std::to_string(fy) + ")");
        } else if (fy < fx) {
            increases = 0;
            step *= 1.2;
        } else {
            // No measurable change: the step is below the resolution of the cost.
            step *= 0.5;
        }
        x = std::move(y);
        fx = fy;
        if (fx < best.value) {
            best.minimizer = x;
            best.value = fx;
        }
    }
    best.iterations = it;
    return best;
}

MinimizeResult minimize_bayes_cost(const CostFunctional& cost, const SampleSet& samples, const VectorRef& init,
                                   const MinimizeSettings& cfg) {
    return minimize_bayes_cost(BayesCostEvaluator(cost, samples), init, cfg);
}

// ---------------------------------------------------------------------------

SampleAverage average_subgradient(const std::function<Vector(const Vector&)>& g, const SampleSet& samples) {
    const Index count = samples.size();
    Matrix values;
    for (Index j = 0; j < count; ++j) {
        Vector v;
        try {
            v = g(samples.points.col(j));
        } catch (const DomainError&) {
            v = Vector();
        }
        if (values.size() == 0 && v.size() > 0) values = Matrix::Constant(v.size(), count, kInf);
        if (v.size() > 0 && v.allFinite()) values.col(j) = v;
    }
    if (values.size() == 0) throw NumericalError("average_subgradient: no sample in the domain");
    SampleAverage out;
    out.value.resize(values.rows());
    out.standard_error.resize(values.rows());
    for (Index i = 0; i < values.rows(); ++i) {
        const WeightedMean m = weighted_mean(samples, values.row(i).transpose());
        out.value[i] = m.value;
        out.standard_error[i] = m.standard_error;
        out.excluded = m.excluded;
    }
    return out;
}

SampleAverage average_subgradient(const Functional& f, const SampleSet& samples) {
    return average_subgradient(
        [&f](const Vector& u) {
            if (!f.in_domain(u)) return Vector(Vector::Constant(u.size(), kInf));
            return f.subgradient(u);
        },
        samples);
}

}  // namespace bregbayes
