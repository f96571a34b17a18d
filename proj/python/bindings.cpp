#include "bregbayes/experiment.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace bregbayes;

namespace {

py::object to_python(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_python(const py::object& obj) {
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "MAP and conditional mean estimators with Bregman costs";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
    py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
    py::register_exception<UnsupportedError>(m, "UnsupportedError", PyExc_NotImplementedError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    py::enum_<NoiseModel>(m, "NoiseModel")
        .value("gaussian", NoiseModel::Gaussian)
        .value("poisson", NoiseModel::Poisson)
        .value("laplace", NoiseModel::Laplace);
    py::enum_<PriorKind>(m, "PriorKind")
        .value("tikhonov", PriorKind::Tikhonov)
        .value("huber_tv", PriorKind::HuberTv)
        .value("l1", PriorKind::L1);

    py::class_<ForwardOperator>(m, "ForwardOperator")
        .def_static("identity", &ForwardOperator::identity, py::arg("n"))
        .def_static("dense", &ForwardOperator::dense, py::arg("matrix"))
        .def_static("convolution", &ForwardOperator::convolution, py::arg("kernel"), py::arg("n"))
        .def("apply", [](const ForwardOperator& op, const Vector& u) { return op.apply(u); })
        .def("adjoint", [](const ForwardOperator& op, const Vector& v) { return op.adjoint(v); })
        .def("to_dense", &ForwardOperator::to_dense);

    py::class_<Fidelity>(m, "Fidelity")
        .def(py::init<NoiseModel, ForwardOperator, Vector, double>(), py::arg("model"), py::arg("op"),
             py::arg("data"), py::arg("poisson_floor") = kDefaultPoissonFloor)
        .def("value", [](const Fidelity& f, const Vector& u) { return f.value(u); });

    py::class_<Prior>(m, "Prior")
        .def(py::init<PriorKind, double, double>(), py::arg("kind"), py::arg("scale") = 1.0,
             py::arg("huber_delta") = kDefaultHuberDelta)
        .def("value", [](const Prior& p, const Vector& u) { return p.value(u); });

    py::class_<Posterior>(m, "Posterior")
        .def(py::init<Fidelity, Prior, double>(), py::arg("fidelity"), py::arg("prior"), py::arg("alpha"))
        .def_property_readonly("dim", &Posterior::dim)
        .def("objective", [](const Posterior& p, const Vector& u) { return p.objective(u); })
        .def("log_density", [](const Posterior& p, const Vector& u) { return p.log_density(u); });

    py::class_<MapResult>(m, "MapResult")
        .def_readonly("estimate", &MapResult::estimate)
        .def_readonly("objective", &MapResult::objective)
        .def_readonly("residual", &MapResult::residual)
        .def_readonly("iterations", &MapResult::iterations)
        .def_readonly("converged", &MapResult::converged)
        .def_readonly("method", &MapResult::method);

    m.def(
        "solve_map",
        [](const Posterior& post, double tolerance, long max_iterations) {
            SolverSettings s;
            s.tolerance = tolerance;
            s.max_iterations = max_iterations;
            return solve_map(post, s);
        },
        py::arg("posterior"), py::arg("tolerance") = 1e-8, py::arg("max_iterations") = 100000);

    m.def(
        "quadrature_mean",
        [](const Posterior& post, const Vector& centre, int nodes) {
            QuadratureSettings s;
            s.nodes = nodes;
            const QuadratureMeasure q = quadrature_posterior(post, centre, s);
            return py::make_tuple(Vector(q.nodes * q.weights), q.nodes, q.weights);
        },
        py::arg("posterior"), py::arg("centre"), py::arg("nodes") = 0,
        "Returns (mean, nodes, weights) of the quadrature representation.");

    m.def(
        "sample_mean",
        [](const Posterior& post, const Vector& centre, std::uint64_t seed, int chains, long iterations,
           long burn_in, long thin) {
            SamplerSettings s;
            s.chains = chains;
            s.iterations = iterations;
            s.burn_in = burn_in;
            s.thin = thin;
            s.validate();
            const CmEstimate est = cm_estimate(run_chains(post, s, seed, centre), true);
            return py::make_tuple(est.mean, est.standard_error, est.diagnostics.rhat);
        },
        py::arg("posterior"), py::arg("centre"), py::arg("seed"), py::arg("chains") = 4,
        py::arg("iterations") = 50000, py::arg("burn_in") = 10000, py::arg("thin") = 5,
        "Random-walk Metropolis estimate; returns (mean, standard_error, rhat).");

    m.def(
        "run",
        [](const std::string& command, const py::object& config, std::optional<std::string> out,
           std::optional<std::uint64_t> seed) {
            ExperimentConfig cfg = parse_config(from_python(config));
            if (out) cfg.output_dir = *out;
            if (seed) cfg.seed = *seed;
            return to_python(run_experiment(command_from_string(command), cfg).report);
        },
        py::arg("command"), py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none(),
        "Runs map, cm, oracle, verify or compare on a configuration dict and returns the report.");

    m.attr("__version__") = BREGBAYES_VERSION;
}
