#include "bregbayes/model.hpp"

#include <cmath>
#include <string>

namespace bregbayes {

namespace {

void check_dim(Index got, Index want, const char* what) {
    if (got != want) {
        throw InputError(std::string(what) + ": expected length " + std::to_string(want) +
                         ", got " + std::to_string(got));
    }
}

bool injective(const Matrix& k) {
    if (k.rows() < k.cols()) return false;
    Eigen::FullPivLU<Matrix> lu(k);
    lu.setThreshold(1e-12);
    return lu.rank() == k.cols();
}

}  // namespace

// ---------------------------------------------------------------------------
// ForwardOperator

ForwardOperator ForwardOperator::identity(Index n) {
    if (n <= 0) throw InputError("identity operator: dimension must be positive");
    ForwardOperator op;
    op.kind_ = Kind::Identity;
    op.n_ = op.m_ = n;
    return op;
}

ForwardOperator ForwardOperator::dense(Matrix matrix) {
    if (matrix.rows() == 0 || matrix.cols() == 0) throw InputError("dense operator: empty matrix");
    if (!matrix.allFinite()) throw InputError("dense operator: non-finite entry");
    ForwardOperator op;
    op.kind_ = Kind::Dense;
    op.m_ = matrix.rows();
    op.n_ = matrix.cols();
    op.matrix_ = std::move(matrix);
    return op;
}

ForwardOperator ForwardOperator::convolution(Vector kernel, Index n) {
    if (n <= 0) throw InputError("convolution operator: dimension must be positive");
    if (kernel.size() == 0) throw InputError("convolution operator: empty kernel");
    if (!kernel.allFinite() || (kernel.array() < 0.0).any()) {
        throw InputError("convolution operator: taps must be finite and nonnegative");
    }
    if (std::abs(kernel.sum() - 1.0) > 1e-12) {
        throw InputError("convolution operator: taps must sum to 1");
    }
    ForwardOperator op;
    op.kind_ = Kind::Convolution1d;
    op.n_ = op.m_ = n;
    op.kernel_ = std::move(kernel);
    return op;
}

Vector ForwardOperator::apply(const VectorRef& u) const {
    check_dim(u.size(), n_, "apply_forward");
    switch (kind_) {
        case Kind::Identity: return u;
        case Kind::Dense: return matrix_ * u;
        case Kind::Convolution1d: {
            const Index taps = kernel_.size();
            const Index centre = (taps - 1) / 2;
            Vector out = Vector::Zero(m_);
            for (Index i = 0; i < n_; ++i) {
                double acc = 0.0;
                for (Index j = 0; j < taps; ++j) {
                    Index idx = ((i + j - centre) % n_ + n_) % n_;
                    acc += kernel_[j] * u[idx];
                }
                out[i] = acc;
            }
            return out;
        }
    }
    return {};
}

Vector ForwardOperator::adjoint(const VectorRef& v) const {
    check_dim(v.size(), m_, "apply_adjoint");
    switch (kind_) {
        case Kind::Identity: return v;
        case Kind::Dense: return matrix_.transpose() * v;
        case Kind::Convolution1d: {
            const Index taps = kernel_.size();
            const Index centre = (taps - 1) / 2;
            Vector out = Vector::Zero(n_);
            for (Index i = 0; i < m_; ++i) {
                for (Index j = 0; j < taps; ++j) {
                    Index idx = ((i + j - centre) % n_ + n_) % n_;
                    out[idx] += kernel_[j] * v[i];
                }
            }
            return out;
        }
    }
    return {};
}

Matrix ForwardOperator::to_dense() const {
    Matrix out(m_, n_);
    for (Index j = 0; j < n_; ++j) out.col(j) = apply(Vector::Unit(n_, j));
    return out;
}

bool ForwardOperator::entrywise_nonnegative() const {
    switch (kind_) {
        case Kind::Identity: return true;
        case Kind::Dense: return (matrix_.array() >= 0.0).all();
        case Kind::Convolution1d: return true;  // enforced at construction
    }
    return false;
}

bool ForwardOperator::is_diagonal() const {
    switch (kind_) {
        case Kind::Identity: return true;
        case Kind::Dense: {
            if (m_ != n_) return false;
            Matrix off = matrix_;
            off.diagonal().setZero();
            return (off.array() == 0.0).all();
        }
        case Kind::Convolution1d: return n_ == 1;
    }
    return false;
}

double ForwardOperator::norm() const {
    if (kind_ == Kind::Identity) return 1.0;
    Eigen::JacobiSVD<Matrix> svd(to_dense());
    return svd.singularValues()(0);
}

// ---------------------------------------------------------------------------
// Names

std::string_view to_string(NoiseModel model) {
    switch (model) {
        case NoiseModel::Gaussian: return "gaussian";
        case NoiseModel::Poisson: return "poisson";
        case NoiseModel::Laplace: return "laplace";
    }
    return "?";
}

NoiseModel noise_model_from_string(std::string_view name) {
    if (name == "gaussian") return NoiseModel::Gaussian;
    if (name == "poisson") return NoiseModel::Poisson;
    if (name == "laplace") return NoiseModel::Laplace;
    throw InputError("unknown fidelity kind '" + std::string(name) + "'");
}

std::string_view to_string(PriorKind kind) {
    switch (kind) {
        case PriorKind::Tikhonov: return "tikhonov";
        case PriorKind::HuberTv: return "huber_tv";
        case PriorKind::L1: return "l1";
    }
    return "?";
}

PriorKind prior_kind_from_string(std::string_view name) {
    if (name == "tikhonov") return PriorKind::Tikhonov;
    if (name == "huber_tv") return PriorKind::HuberTv;
    if (name == "l1") return PriorKind::L1;
    throw InputError("unknown prior kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Fidelity

Fidelity::Fidelity(NoiseModel model, ForwardOperator op, Vector data, double poisson_floor)
    : model_(model), op_(std::move(op)), data_(std::move(data)), floor_(poisson_floor) {
    check_dim(data_.size(), op_.output_dim(), "fidelity data");
    require_finite(data_, "fidelity data");
    if (!(floor_ > 0.0)) throw InputError("poisson floor must be positive");

    const Matrix k = op_.to_dense();
    switch (model_) {
        case NoiseModel::Gaussian: strictly_convex_ = injective(k); break;
        case NoiseModel::Poisson: {
            if ((data_.array() < 0.0).any()) throw InputError("poisson data must be nonnegative");
            for (Index i = 0; i < data_.size(); ++i) log_factorial_sum_ += std::lgamma(data_[i] + 1.0);
            // Only rows with positive counts carry curvature.
            std::vector<Index> rows;
            for (Index i = 0; i < data_.size(); ++i)
                if (data_[i] > 0.0) rows.push_back(i);
            Matrix reduced(static_cast<Index>(rows.size()), k.cols());
            for (Index r = 0; r < reduced.rows(); ++r) reduced.row(r) = k.row(rows[r]);
            strictly_convex_ = !rows.empty() && injective(reduced);
            break;
        }
        case NoiseModel::Laplace: strictly_convex_ = false; break;
    }
}

void Fidelity::check_input(const VectorRef& u) const {
    check_dim(u.size(), dim(), "fidelity");
    if (u.hasNaN()) throw InputError("fidelity: NaN in argument");
}

bool Fidelity::in_data_domain(const VectorRef& ku) const {
    if (model_ != NoiseModel::Poisson) return ku.allFinite();
    return (ku.array() >= floor_).all();
}

bool Fidelity::in_domain(const VectorRef& u) const {
    check_input(u);
    return in_data_domain(op_.apply(u));
}

double Fidelity::data_value(const VectorRef& ku) const {
    switch (model_) {
        case NoiseModel::Gaussian: return (ku - data_).squaredNorm();
        case NoiseModel::Laplace: return (ku - data_).lpNorm<1>();
        case NoiseModel::Poisson: {
            if (!in_data_domain(ku)) return kInf;
            double acc = log_factorial_sum_;
            for (Index i = 0; i < ku.size(); ++i) {
                acc += ku[i];
                if (data_[i] > 0.0) acc -= data_[i] * std::log(ku[i]);
            }
            return acc;
        }
    }
    return kInf;
}

Vector Fidelity::data_subgradient(const VectorRef& ku) const {
    switch (model_) {
        case NoiseModel::Gaussian: return 2.0 * (ku - data_);
        case NoiseModel::Laplace: return (ku - data_).unaryExpr([](double x) { return sign0(x); });
        case NoiseModel::Poisson: {
            if (!in_data_domain(ku)) throw DomainError("poisson fidelity: (Ku)_i below the domain floor");
            return (1.0 - data_.array() / ku.array()).matrix();
        }
    }
    return {};
}

Vector Fidelity::data_curvature(const VectorRef& ku) const {
    switch (model_) {
        case NoiseModel::Gaussian: return Vector::Constant(ku.size(), 2.0);
        case NoiseModel::Laplace: return Vector::Zero(ku.size());
        case NoiseModel::Poisson: {
            if (!in_data_domain(ku)) throw DomainError("poisson fidelity: (Ku)_i below the domain floor");
            return (data_.array() / ku.array().square()).matrix();
        }
    }
    return {};
}

Vector Fidelity::hessian_apply(const VectorRef& u, const VectorRef& v) const {
    check_input(u);
    check_input(v);
    const Vector ku = op_.apply(u);
    return op_.adjoint(data_curvature(ku).cwiseProduct(op_.apply(v)));
}

double Fidelity::value(const VectorRef& u) const {
    check_input(u);
    return data_value(op_.apply(u));
}

Vector Fidelity::subgradient(const VectorRef& u) const {
    check_input(u);
    return op_.adjoint(data_subgradient(op_.apply(u)));
}

// ---------------------------------------------------------------------------
// Prior

double huber(double x, double delta) {
    const double a = std::abs(x);
    return a <= delta ? 0.5 * x * x / delta : a - 0.5 * delta;
}

double huber_derivative(double x, double delta) {
    if (x > delta) return 1.0;
    if (x < -delta) return -1.0;
    return x / delta;
}

Prior::Prior(PriorKind kind, double scale, double huber_delta)
    : kind_(kind), scale_(scale), delta_(huber_delta) {
    if (!(scale_ > 0.0) || !std::isfinite(scale_)) throw InputError("prior scale must be positive");
    if (!(delta_ > 0.0) || !std::isfinite(delta_)) throw InputError("huber delta must be positive");
}

double Prior::value(const VectorRef& u) const {
    if (u.hasNaN()) throw InputError("prior: NaN in argument");
    double r = 0.0;
    switch (kind_) {
        case PriorKind::Tikhonov: r = 0.5 * u.squaredNorm(); break;
        case PriorKind::L1: r = u.lpNorm<1>(); break;
        case PriorKind::HuberTv:
            for (Index i = 0; i + 1 < u.size(); ++i) r += huber(u[i + 1] - u[i], delta_);
            break;
    }
    return scale_ * r;
}

Vector Prior::subgradient(const VectorRef& u) const {
    if (u.hasNaN()) throw InputError("prior: NaN in argument");
    Vector g;
    switch (kind_) {
        case PriorKind::Tikhonov: g = u; break;
        case PriorKind::L1: g = u.unaryExpr([](double x) { return sign0(x); }); break;
        case PriorKind::HuberTv: {
            g = Vector::Zero(u.size());
            for (Index i = 0; i + 1 < u.size(); ++i) {
                const double d = huber_derivative(u[i + 1] - u[i], delta_);
                g[i + 1] += d;
                g[i] -= d;
            }
            break;
        }
    }
    return scale_ * g;
}

Vector Prior::hessian_apply(const VectorRef& u, const VectorRef& v) const {
    if (u.hasNaN() || v.hasNaN()) throw InputError("prior: NaN in argument");
    if (u.size() != v.size()) throw InputError("prior: dimension mismatch");
    Vector h;
    switch (kind_) {
        case PriorKind::Tikhonov: h = v; break;
        case PriorKind::L1: h = Vector::Zero(v.size()); break;
        case PriorKind::HuberTv: {
            h = Vector::Zero(v.size());
            for (Index i = 0; i + 1 < u.size(); ++i) {
                if (std::abs(u[i + 1] - u[i]) > delta_) continue;
                const double d = (v[i + 1] - v[i]) / delta_;
                h[i + 1] += d;
                h[i] -= d;
            }
            break;
        }
    }
    return scale_ * h;
}

// ---------------------------------------------------------------------------
// Posterior

Posterior::Posterior(Fidelity fidelity, Prior prior, double alpha)
    : fidelity_(std::move(fidelity)), prior_(prior), alpha_(alpha) {
    if (!(alpha_ > 0.0) || !std::isfinite(alpha_)) throw InputError("alpha must be positive");
}

double Posterior::objective(const VectorRef& u) const {
    const double e = fidelity_.value(u);
    if (!std::isfinite(e)) return kInf;
    return e + alpha_ * prior_.value(u);
}

double Posterior::log_density(const VectorRef& u) const { return -objective(u); }

GradientEvaluation Posterior::log_density_gradient(const VectorRef& u) const {
    GradientEvaluation out;
    const Vector ku = fidelity_.op().apply(u);
    out.gradient = -fidelity_.op().adjoint(fidelity_.data_subgradient(ku)) -
                   alpha_ * prior_.subgradient(u);
    if (fidelity_.model() == NoiseModel::Laplace && ((ku - fidelity_.data()).array() == 0.0).any())
        out.kink_selection = true;
    if (prior_.kind() == PriorKind::L1 && (u.array() == 0.0).any()) out.kink_selection = true;
    return out;
}

}  // namespace bregbayes
