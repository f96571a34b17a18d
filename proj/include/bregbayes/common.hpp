#pragma once

#include <Eigen/Dense>

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace bregbayes {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
using VectorRef = Eigen::Ref<const Eigen::VectorXd>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Malformed arguments: wrong dimensions, NaN, negative Poisson counts.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A point outside the domain of a functional where a finite answer is required.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// A configuration that is well-formed but not usable (e.g. MALA on a
/// nonsmooth posterior, a zero step size).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::string message)
        : std::runtime_error(message), violations_{std::move(message)} {}
    explicit ConfigError(std::vector<std::string> violations)
        : std::runtime_error(join(violations)), violations_(std::move(violations)) {}

    const std::vector<std::string>& violations() const { return violations_; }

private:
    static std::string join(const std::vector<std::string>& items) {
        std::string out;
        for (const auto& s : items) {
            if (!out.empty()) out += "; ";
            out += s;
        }
        return out;
    }
    std::vector<std::string> violations_;
};

/// Requested operation is outside what is supported (quadrature in n > 3,
/// average-optimality check on a nondifferentiable fidelity).
class UnsupportedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numerical procedure failed (divergence, every sample excluded, ...).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

inline void require_finite(const VectorRef& u, const char* what) {
    if (!u.allFinite()) throw InputError(std::string(what) + ": non-finite entry");
}

}  // namespace bregbayes
