#include "bregbayes/experiment.hpp"

#include "bregbayes/rng.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#ifndef BREGBAYES_VERSION
#define BREGBAYES_VERSION "unknown"
#endif

namespace bregbayes {

using nlohmann::json;

namespace {

// Seed streams derived from the master seed.
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kChainStream = 2;
constexpr std::uint64_t kCentredStream = 3;
constexpr std::uint64_t kPerturbationStream = 4;

const std::set<std::string> kCheckNames = {"map_centred_form",    "map_bayes_optimality", "cm_average_optimality",
                                           "cm_bayes_optimality", "compare_estimates",    "sampler_agreement"};
const std::set<std::string> kCmCostNames = {"c1", "c2", "c3", "mean_squared"};

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Reads typed fields from a JSON object and collects every problem found.
class Reader {
public:
    std::vector<std::string> errors;

    void fail(const std::string& path, const std::string& message) { errors.push_back(path + ": " + message); }

    bool is_object(const json& j, const std::string& path) {
        if (j.is_object()) return true;
        fail(path, "expected an object");
        return false;
    }

    void allow(const json& obj, const std::string& path, std::initializer_list<std::string_view> keys) {
        for (const auto& item : obj.items()) {
            bool known = false;
            for (auto k : keys) known = known || item.key() == k;
            if (!known) fail(join(path, item.key()), "unknown key");
        }
    }

    const json* find(const json& obj, const std::string& key) {
        const auto it = obj.find(key);
        return it == obj.end() ? nullptr : &*it;
    }

    void number(const json& obj, const std::string& path, const std::string& key, double& out) {
        const json* v = find(obj, key);
        if (!v) return;
        if (!v->is_number() || !std::isfinite(v->get<double>())) return fail(join(path, key), "expected a finite number");
        out = v->get<double>();
    }

    template <typename Int>
    void integer(const json& obj, const std::string& path, const std::string& key, Int& out) {
        const json* v = find(obj, key);
        if (!v) return;
        if (!v->is_number_integer()) return fail(join(path, key), "expected an integer");
        out = v->get<Int>();
    }

    void seed(const json& obj, const std::string& path, const std::string& key, std::uint64_t& out) {
        const json* v = find(obj, key);
        if (!v) return;
        if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
            return fail(join(path, key), "expected a nonnegative integer");
        out = v->get<std::uint64_t>();
    }

    void boolean(const json& obj, const std::string& path, const std::string& key, bool& out) {
        const json* v = find(obj, key);
        if (!v) return;
        if (!v->is_boolean()) return fail(join(path, key), "expected true or false");
        out = v->get<bool>();
    }

    void string(const json& obj, const std::string& path, const std::string& key, std::string& out) {
        const json* v = find(obj, key);
        if (!v) return;
        if (!v->is_string()) return fail(join(path, key), "expected a string");
        out = v->get<std::string>();
    }

    std::optional<Vector> vector(const json& j, const std::string& path) {
        if (!j.is_array() || j.empty()) {
            fail(path, "expected a non-empty array of numbers");
            return std::nullopt;
        }
        Vector v(static_cast<Index>(j.size()));
        for (std::size_t i = 0; i < j.size(); ++i) {
            if (!j[i].is_number() || !std::isfinite(j[i].get<double>())) {
                fail(path + "[" + std::to_string(i) + "]", "expected a finite number");
                return std::nullopt;
            }
            v[static_cast<Index>(i)] = j[i].get<double>();
        }
        return v;
    }

    std::optional<Matrix> matrix(const json& j, const std::string& path) {
        if (!j.is_array() || j.empty()) {
            fail(path, "expected a non-empty array of rows");
            return std::nullopt;
        }
        std::vector<Vector> rows;
        for (std::size_t r = 0; r < j.size(); ++r) {
            auto row = vector(j[r], path + "[" + std::to_string(r) + "]");
            if (!row) return std::nullopt;
            if (!rows.empty() && row->size() != rows.front().size()) {
                fail(path, "rows have different lengths");
                return std::nullopt;
            }
            rows.push_back(*row);
        }
        Matrix m(static_cast<Index>(rows.size()), rows.front().size());
        for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Index>(r)) = rows[r].transpose();
        return m;
    }
};

void parse_operator(Reader& rd, const json& op, ExperimentConfig& cfg) {
    const std::string path = "model.operator";
    if (!rd.is_object(op, path)) return;
    rd.allow(op, path, {"kind", "dim", "matrix", "kernel"});
    rd.string(op, path, "kind", cfg.operator_kind);
    rd.integer(op, path, "dim", cfg.dim);
    if (cfg.operator_kind == "identity" || cfg.operator_kind == "convolution") {
        if (!rd.find(op, "dim")) rd.fail(join(path, "dim"), "required for the " + cfg.operator_kind + " operator");
        else if (cfg.dim < 1) rd.fail(join(path, "dim"), "must be positive");
    }
    if (cfg.operator_kind == "identity") {
        if (rd.find(op, "matrix") || rd.find(op, "kernel")) rd.fail(path, "identity takes only 'dim'");
    } else if (cfg.operator_kind == "dense") {
        if (rd.find(op, "kernel")) rd.fail(join(path, "kernel"), "not used by the dense operator");
        if (const json* m = rd.find(op, "matrix")) {
            if (auto mat = rd.matrix(*m, join(path, "matrix"))) {
                cfg.matrix = *mat;
                if (rd.find(op, "dim") && cfg.dim != cfg.matrix.cols())
                    rd.fail(join(path, "dim"), "does not match the number of matrix columns");
                cfg.dim = cfg.matrix.cols();
            }
        } else {
            rd.fail(join(path, "matrix"), "required for the dense operator");
        }
    } else if (cfg.operator_kind == "convolution") {
        if (rd.find(op, "matrix")) rd.fail(join(path, "matrix"), "not used by the convolution operator");
        if (const json* k = rd.find(op, "kernel")) {
            if (auto kern = rd.vector(*k, join(path, "kernel"))) cfg.kernel = *kern;
        } else {
            rd.fail(join(path, "kernel"), "required for the convolution operator");
        }
    } else {
        rd.fail(join(path, "kind"), "must be one of identity, dense, convolution");
    }
}

void parse_model(Reader& rd, const json& model, ExperimentConfig& cfg) {
    const std::string path = "model";
    if (!rd.is_object(model, path)) return;
    rd.allow(model, path, {"operator", "fidelity", "data", "synthetic", "prior", "alpha", "poisson_floor"});

    if (const json* op = rd.find(model, "operator")) parse_operator(rd, *op, cfg);
    else rd.fail(join(path, "operator"), "required");

    if (const json* fid = rd.find(model, "fidelity")) {
        try {
            if (!fid->is_string()) throw InputError("expected a string");
            cfg.fidelity = noise_model_from_string(fid->get<std::string>());
        } catch (const InputError&) {
            rd.fail(join(path, "fidelity"), "must be one of gaussian, poisson, laplace");
        }
    } else {
        rd.fail(join(path, "fidelity"), "required");
    }

    const json* data = rd.find(model, "data");
    const json* synth = rd.find(model, "synthetic");
    if (data && synth) rd.fail(path, "give either 'data' or 'synthetic', not both");
    if (!data && !synth) rd.fail(path, "one of 'data' or 'synthetic' is required");
    if (data) cfg.data = rd.vector(*data, join(path, "data"));
    if (synth && rd.is_object(*synth, join(path, "synthetic"))) {
        const std::string sp = join(path, "synthetic");
        rd.allow(*synth, sp, {"truth", "noise_level"});
        if (const json* t = rd.find(*synth, "truth")) cfg.truth = rd.vector(*t, join(sp, "truth"));
        else rd.fail(join(sp, "truth"), "required");
        rd.number(*synth, sp, "noise_level", cfg.noise_level);
        if (cfg.noise_level < 0.0) rd.fail(join(sp, "noise_level"), "must be nonnegative");
    }

    if (const json* prior = rd.find(model, "prior")) {
        const std::string pp = join(path, "prior");
        std::string kind;
        if (prior->is_string()) {
            kind = prior->get<std::string>();
        } else if (rd.is_object(*prior, pp)) {
            rd.allow(*prior, pp, {"kind", "scale", "huber_delta"});
            if (!rd.find(*prior, "kind")) rd.fail(join(pp, "kind"), "required");
            rd.string(*prior, pp, "kind", kind);
            rd.number(*prior, pp, "scale", cfg.prior_scale);
            rd.number(*prior, pp, "huber_delta", cfg.huber_delta);
            if (!(cfg.prior_scale > 0.0)) rd.fail(join(pp, "scale"), "must be positive");
            if (!(cfg.huber_delta > 0.0)) rd.fail(join(pp, "huber_delta"), "must be positive");
        }
        if (!kind.empty()) {
            try {
                cfg.prior = prior_kind_from_string(kind);
            } catch (const InputError&) {
                rd.fail(pp, "kind must be one of tikhonov, huber_tv, l1");
            }
        }
    } else {
        rd.fail(join(path, "prior"), "required");
    }

    rd.number(model, path, "alpha", cfg.alpha);
    if (!(cfg.alpha > 0.0)) rd.fail(join(path, "alpha"), "must be positive");
    rd.number(model, path, "poisson_floor", cfg.poisson_floor);
    if (!(cfg.poisson_floor > 0.0)) rd.fail(join(path, "poisson_floor"), "must be positive");
}

void parse_sampler(Reader& rd, const json& s, ExperimentConfig& cfg) {
    const std::string path = "sampler";
    if (!rd.is_object(s, path)) return;
    rd.allow(s, path, {"method", "chains", "iterations", "burn_in", "thin", "initial_scale", "acceptance_window",
                       "start_jitter", "allow_unconverged"});
    std::string method = std::string(to_string(cfg.sampler.kind));
    rd.string(s, path, "method", method);
    try {
        cfg.sampler.kind = sampler_kind_from_string(method);
    } catch (const InputError&) {
        rd.fail(join(path, "method"), "must be rwm or mala");
    }
    rd.integer(s, path, "chains", cfg.sampler.chains);
    rd.integer(s, path, "iterations", cfg.sampler.iterations);
    rd.integer(s, path, "burn_in", cfg.sampler.burn_in);
    rd.integer(s, path, "thin", cfg.sampler.thin);
    rd.number(s, path, "initial_scale", cfg.sampler.initial_scale);
    rd.number(s, path, "start_jitter", cfg.sampler.start_jitter);
    rd.boolean(s, path, "allow_unconverged", cfg.allow_unconverged);
    if (const json* w = rd.find(s, "acceptance_window")) {
        auto v = rd.vector(*w, join(path, "acceptance_window"));
        if (v && v->size() == 2) {
            cfg.sampler.acceptance_low = (*v)[0];
            cfg.sampler.acceptance_high = (*v)[1];
        } else if (v) {
            rd.fail(join(path, "acceptance_window"), "expected [low, high]");
        }
    }
}

void parse_check(Reader& rd, const json& c, const std::string& path, ExperimentConfig& cfg) {
    CheckSpec spec;
    const json* opts = nullptr;
    if (c.is_string()) {
        spec.name = c.get<std::string>();
    } else if (c.is_object()) {
        rd.string(c, path, "name", spec.name);
        if (!rd.find(c, "name")) rd.fail(join(path, "name"), "required");
        opts = &c;
    } else {
        return rd.fail(path, "expected a check name or an object with 'name'");
    }
    if (!kCheckNames.count(spec.name)) {
        std::string names;
        for (const auto& n : kCheckNames) names += (names.empty() ? "" : ", ") + n;
        return rd.fail(path, "unknown check '" + spec.name + "' (expected one of " + names + ")");
    }
    spec.radius = spec.name == "map_centred_form" ? 2.0 : 0.5;
    if (opts) {
        if (spec.name == "map_centred_form") {
            rd.allow(c, path, {"name", "tolerance", "points", "radius", "centre_offset"});
            rd.number(c, path, "tolerance", spec.tolerance);
            rd.integer(c, path, "points", spec.points);
            rd.number(c, path, "radius", spec.radius);
            rd.number(c, path, "centre_offset", spec.centre_offset);
            if (!(spec.tolerance > 0.0)) rd.fail(join(path, "tolerance"), "must be positive");
            if (spec.points < 1) rd.fail(join(path, "points"), "must be positive");
        } else if (spec.name == "map_bayes_optimality") {
            rd.allow(c, path, {"name", "perturbations", "radius", "cost"});
            rd.integer(c, path, "perturbations", spec.perturbations);
            rd.number(c, path, "radius", spec.radius);
            rd.string(c, path, "cost", spec.cost);
            if (spec.perturbations < 1) rd.fail(join(path, "perturbations"), "must be positive");
            if (spec.cost != "map" && !kCmCostNames.count(spec.cost))
                rd.fail(join(path, "cost"), "must be map, c1, c2, c3 or mean_squared");
        } else if (spec.name == "cm_bayes_optimality") {
            rd.allow(c, path, {"name", "costs", "init_offset"});
            rd.number(c, path, "init_offset", spec.init_offset);
            if (const json* cs = rd.find(c, "costs")) {
                spec.costs.clear();
                if (!cs->is_array() || cs->empty()) {
                    rd.fail(join(path, "costs"), "expected a non-empty array of cost names");
                } else {
                    for (const auto& name : *cs) {
                        if (!name.is_string() || !kCmCostNames.count(name.get<std::string>()))
                            rd.fail(join(path, "costs"), "entries must be c1, c2, c3 or mean_squared");
                        else spec.costs.push_back(name.get<std::string>());
                    }
                }
            }
        } else {
            rd.allow(c, path, {"name"});
        }
        if (!(spec.radius > 0.0)) rd.fail(join(path, "radius"), "must be positive");
    }
    cfg.checks.push_back(spec);
}

bool has_error_at(const Reader& rd, const std::string& prefix) {
    for (const auto& e : rd.errors)
        if (e.rfind(prefix, 0) == 0) return true;
    return false;
}

// Cross-field checks; skipped for parts whose own section already failed.
void validate_model(Reader& rd, ExperimentConfig& cfg) {
    if (has_error_at(rd, "model.operator") || has_error_at(rd, "model:") || has_error_at(rd, "model.fidelity"))
        return;
    std::optional<ForwardOperator> op;
    try {
        op = build_operator(cfg);
    } catch (const InputError& e) {
        rd.fail("model.operator", e.what());
        return;
    }
    if (cfg.data && cfg.data->size() != op->output_dim())
        rd.fail("model.data", "length " + std::to_string(cfg.data->size()) + " does not match the operator output dimension " +
                                  std::to_string(op->output_dim()));
    if (cfg.truth) {
        if (cfg.truth->size() != op->input_dim()) {
            rd.fail("model.synthetic.truth", "length " + std::to_string(cfg.truth->size()) +
                                                 " does not match the operator input dimension " +
                                                 std::to_string(op->input_dim()));
        } else if (cfg.fidelity == NoiseModel::Poisson && (op->apply(*cfg.truth).array() < 0.0).any()) {
            rd.fail("model.synthetic.truth", "K u* has negative entries; Poisson intensities must be nonnegative");
        }
    }
    if (cfg.data && cfg.data->size() == op->output_dim()) {
        try {
            Fidelity(cfg.fidelity, *op, *cfg.data, cfg.poisson_floor);
        } catch (const InputError& e) {
            rd.fail("model.data", e.what());
        }
    }
}

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

ExperimentConfig parse_config(const json& doc) {
    Reader rd;
    ExperimentConfig cfg;
    if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
    rd.allow(doc, "", {"schema_version", "seed", "model", "solver", "sampler", "quadrature", "verify", "output"});

    if (const json* v = rd.find(doc, "schema_version")) {
        if (!v->is_number_integer() || v->get<long long>() != kSchemaVersion)
            rd.fail("schema_version", "unsupported version (expected " + std::to_string(kSchemaVersion) + ")");
    } else {
        rd.fail("schema_version", "required");
    }
    rd.seed(doc, "", "seed", cfg.seed);

    if (const json* m = rd.find(doc, "model")) parse_model(rd, *m, cfg);
    else rd.fail("model", "required");

    if (const json* s = rd.find(doc, "solver"); s && rd.is_object(*s, "solver")) {
        rd.allow(*s, "solver", {"tolerance", "max_iterations"});
        rd.number(*s, "solver", "tolerance", cfg.solver.tolerance);
        rd.integer(*s, "solver", "max_iterations", cfg.solver.max_iterations);
        if (!(cfg.solver.tolerance > 0.0)) rd.fail("solver.tolerance", "must be positive");
        if (cfg.solver.max_iterations < 1) rd.fail("solver.max_iterations", "must be positive");
    }
    if (const json* s = rd.find(doc, "sampler")) parse_sampler(rd, *s, cfg);
    try {
        cfg.sampler.validate();
    } catch (const ConfigError& e) {
        for (const auto& v : e.violations()) rd.errors.push_back(v);
    }

    if (const json* q = rd.find(doc, "quadrature"); q && rd.is_object(*q, "quadrature")) {
        rd.allow(*q, "quadrature", {"nodes", "width", "doubling_tolerance"});
        rd.integer(*q, "quadrature", "nodes", cfg.quadrature.nodes);
        rd.number(*q, "quadrature", "width", cfg.quadrature.width);
        rd.number(*q, "quadrature", "doubling_tolerance", cfg.doubling_tolerance);
        if (cfg.quadrature.nodes < 0 || cfg.quadrature.nodes == 1)
            rd.fail("quadrature.nodes", "must be 0 (automatic) or at least 2");
        if (!(cfg.quadrature.width > 0.0)) rd.fail("quadrature.width", "must be positive");
        if (!(cfg.doubling_tolerance > 0.0)) rd.fail("quadrature.doubling_tolerance", "must be positive");
    }

    if (const json* v = rd.find(doc, "verify"); v && rd.is_object(*v, "verify")) {
        rd.allow(*v, "verify", {"source", "checks"});
        rd.string(*v, "verify", "source", cfg.source);
        if (cfg.source != "auto" && cfg.source != "quadrature" && cfg.source != "mcmc")
            rd.fail("verify.source", "must be auto, quadrature or mcmc");
        if (const json* checks = rd.find(*v, "checks")) {
            cfg.checks_given = true;
            if (!checks->is_array() || checks->empty()) {
                rd.fail("verify.checks", "expected a non-empty array");
            } else {
                for (std::size_t i = 0; i < checks->size(); ++i)
                    parse_check(rd, (*checks)[i], "verify.checks[" + std::to_string(i) + "]", cfg);
            }
        }
    }

    if (const json* o = rd.find(doc, "output"); o && rd.is_object(*o, "output")) {
        rd.allow(*o, "output", {"dir", "write_chains"});
        rd.string(*o, "output", "dir", cfg.output_dir);
        rd.boolean(*o, "output", "write_chains", cfg.write_chains);
        if (cfg.output_dir.empty()) rd.fail("output.dir", "must not be empty");
    }

    validate_model(rd, cfg);
    if (cfg.sampler.kind == SamplerKind::Mala && (cfg.fidelity == NoiseModel::Laplace || cfg.prior == PriorKind::L1))
        rd.fail("sampler.method", "mala requires a smooth posterior (no laplace fidelity or l1 prior)");
    if (!rd.errors.empty()) throw ConfigError(rd.errors);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read configuration file '" + path + "'");
    json doc;
    try {
        doc = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("configuration file '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_config(doc);
}

json resolved_config(const ExperimentConfig& cfg) {
    json op = {{"kind", cfg.operator_kind}, {"dim", cfg.dim}};
    if (cfg.operator_kind == "dense") {
        json rows = json::array();
        for (Index r = 0; r < cfg.matrix.rows(); ++r) rows.push_back(vec_json(cfg.matrix.row(r).transpose()));
        op["matrix"] = rows;
    }
    if (cfg.operator_kind == "convolution") op["kernel"] = vec_json(cfg.kernel);

    json model = {{"operator", op},
                  {"fidelity", to_string(cfg.fidelity)},
                  {"prior", {{"kind", to_string(cfg.prior)}, {"scale", cfg.prior_scale}, {"huber_delta", cfg.huber_delta}}},
                  {"alpha", cfg.alpha},
                  {"poisson_floor", cfg.poisson_floor}};
    if (cfg.data) model["data"] = vec_json(*cfg.data);
    if (cfg.truth) model["synthetic"] = {{"truth", vec_json(*cfg.truth)}, {"noise_level", cfg.noise_level}};

    json checks = json::array();
    for (const auto& c : cfg.checks) {
        json j = {{"name", c.name}};
        if (c.name == "map_centred_form") {
            j["tolerance"] = c.tolerance;
            j["points"] = c.points;
            j["radius"] = c.radius;
            j["centre_offset"] = c.centre_offset;
        } else if (c.name == "map_bayes_optimality") {
            j["perturbations"] = c.perturbations;
            j["radius"] = c.radius;
            j["cost"] = c.cost;
        } else if (c.name == "cm_bayes_optimality") {
            j["costs"] = c.costs;
            j["init_offset"] = c.init_offset;
        }
        checks.push_back(j);
    }

    return {{"schema_version", kSchemaVersion},
            {"seed", cfg.seed},
            {"model", model},
            {"solver", {{"tolerance", cfg.solver.tolerance}, {"max_iterations", cfg.solver.max_iterations}}},
            {"sampler",
             {{"method", to_string(cfg.sampler.kind)},
              {"chains", cfg.sampler.chains},
              {"iterations", cfg.sampler.iterations},
              {"burn_in", cfg.sampler.burn_in},
              {"thin", cfg.sampler.thin},
              {"initial_scale", cfg.sampler.initial_scale},
              {"acceptance_window", {cfg.sampler.acceptance_low, cfg.sampler.acceptance_high}},
              {"start_jitter", cfg.sampler.start_jitter},
              {"allow_unconverged", cfg.allow_unconverged}}},
            {"quadrature",
             {{"nodes", cfg.quadrature.nodes},
              {"width", cfg.quadrature.width},
              {"doubling_tolerance", cfg.doubling_tolerance}}},
            {"verify", {{"source", cfg.source}, {"checks", checks}}},
            {"output", {{"dir", cfg.output_dir}, {"write_chains", cfg.write_chains}}}};
}

ForwardOperator build_operator(const ExperimentConfig& cfg) {
    if (cfg.operator_kind == "identity") return ForwardOperator::identity(cfg.dim);
    if (cfg.operator_kind == "dense") return ForwardOperator::dense(cfg.matrix);
    if (cfg.operator_kind == "convolution") return ForwardOperator::convolution(cfg.kernel, cfg.dim);
    throw InputError("unknown operator kind '" + cfg.operator_kind + "'");
}

Vector synthesize_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (!cfg.truth) throw InputError("synthesize_data: no synthetic recipe");
    const ForwardOperator op = build_operator(cfg);
    const Vector clean = op.apply(*cfg.truth);
    CounterRng rng(seed);
    Vector f = clean;
    switch (cfg.fidelity) {
        case NoiseModel::Gaussian: {
            std::normal_distribution<double> normal;
            for (Index i = 0; i < f.size(); ++i) f[i] += cfg.noise_level * normal(rng);
            break;
        }
        case NoiseModel::Laplace: {
            std::exponential_distribution<double> expo(1.0);
            std::bernoulli_distribution coin;
            for (Index i = 0; i < f.size(); ++i) f[i] += cfg.noise_level * (coin(rng) ? 1.0 : -1.0) * expo(rng);
            break;
        }
        case NoiseModel::Poisson: {
            for (Index i = 0; i < f.size(); ++i) {
                if (clean[i] < 0.0) throw InputError("synthesize_data: negative Poisson intensity");
                if (clean[i] == 0.0) {
                    f[i] = 0.0;
                    continue;
                }
                std::poisson_distribution<long long> pois(clean[i]);
                f[i] = static_cast<double>(pois(rng));
            }
            break;
        }
    }
    return f;
}

Posterior build_posterior(const ExperimentConfig& cfg, std::uint64_t seed) {
    const Vector data = cfg.data ? *cfg.data : synthesize_data(cfg, derive_seed(seed, kDataStream));
    return Posterior(Fidelity(cfg.fidelity, build_operator(cfg), data, cfg.poisson_floor),
                     Prior(cfg.prior, cfg.prior_scale, cfg.huber_delta), cfg.alpha);
}

Command command_from_string(std::string_view name) {
    if (name == "map") return Command::Map;
    if (name == "cm") return Command::Cm;
    if (name == "oracle") return Command::Oracle;
    if (name == "verify") return Command::Verify;
    if (name == "compare") return Command::Compare;
    throw ConfigError("unknown command '" + std::string(name) + "'");
}

std::string_view to_string(Command command) {
    switch (command) {
        case Command::Map: return "map";
        case Command::Cm: return "cm";
        case Command::Oracle: return "oracle";
        case Command::Verify: return "verify";
        case Command::Compare: return "compare";
    }
    return "?";
}

namespace {

CostFunctional named_cost(const std::string& name, const Posterior& post) {
    if (name == "map") return CostFunctional::map_cost(post);
    if (name == "c1") return CostFunctional::cm_c1(post);
    if (name == "c2") return CostFunctional::cm_c2(post);
    if (name == "c3") return CostFunctional::cm_c3(post);
    if (name == "mean_squared") return CostFunctional::mean_squared();
    throw ConfigError("unknown cost '" + name + "'");
}

VerificationReport map_report(const MapResult& map) {
    VerificationReport r;
    r.name = "map_solver";
    r.passed = map.converged;
    r.measured["objective"] = map.objective;
    r.measured["residual"] = map.residual;
    r.measured["iterations"] = static_cast<double>(map.iterations);
    r.measured_vectors["estimate"] = std::vector<double>(map.estimate.data(), map.estimate.data() + map.estimate.size());
    r.notes.push_back("method " + map.method);
    return r;
}

VerificationReport diagnostics_report(const std::vector<Chain>& chains, const CmEstimate& cm, std::uint64_t seed) {
    VerificationReport r;
    r.name = "chain_diagnostics";
    const Diagnostics& d = cm.diagnostics;
    r.passed = !d.flagged;
    r.seeds.push_back(seed);
    for (const auto& c : chains) r.seeds.push_back(c.seed);
    if (d.rhat_available) r.measured["max_rhat"] = d.rhat.maxCoeff();
    r.measured["min_ess"] = d.ess.minCoeff();
    r.measured["samples"] = static_cast<double>(d.total_samples);
    double acc_min = 1.0, acc_max = 0.0;
    bool warn = false;
    for (const auto& c : chains) {
        acc_min = std::min(acc_min, c.acceptance_rate);
        acc_max = std::max(acc_max, c.acceptance_rate);
        warn = warn || c.acceptance_warning;
    }
    r.measured["min_acceptance"] = acc_min;
    r.measured["max_acceptance"] = acc_max;
    r.tolerances["max_rhat"] = kRhatThreshold;
    r.measured_vectors["rhat"] = std::vector<double>(d.rhat.data(), d.rhat.data() + d.rhat.size());
    r.measured_vectors["ess"] = std::vector<double>(d.ess.data(), d.ess.data() + d.ess.size());
    if (warn) r.notes.emplace_back("acceptance rate outside [0.05, 0.8] in some chain");
    if (!d.rhat_available) r.notes.emplace_back("single chain: R-hat unavailable");
    return r;
}

struct Sampled {
    SampleSet samples;
    Vector cm;
    Vector cm_stderr;
    std::string source;
};

Sampled sample_with_chains(const Posterior& post, const ExperimentConfig& cfg, const Vector& centre,
                           std::uint64_t seed, std::vector<VerificationReport>& reports, json& results) {
    const auto chains = run_chains(post, cfg.sampler, seed, centre);
    const CmEstimate cm = cm_estimate(chains, true);
    reports.push_back(diagnostics_report(chains, cm, seed));
    if (cfg.write_chains) {
        std::filesystem::create_directories(cfg.output_dir);
        for (std::size_t k = 0; k < chains.size(); ++k)
            write_chain_csv(chains[k], (std::filesystem::path(cfg.output_dir) / ("chain_" + std::to_string(k) + ".csv")).string());
    }
    json seeds = json::array();
    for (const auto& c : chains) seeds.push_back(c.seed);
    results["chain_seeds"] = seeds;
    return {SampleSet::from_chains(chains), cm.mean, cm.standard_error, "mcmc"};
}

Sampled sample_with_quadrature(const Posterior& post, const ExperimentConfig& cfg, const Vector& centre, json& results) {
    const QuadratureMeasure q = quadrature_posterior(post, centre, cfg.quadrature);
    results["quadrature_nodes"] = q.nodes.cols();
    results["quadrature_box_lower"] = vec_json(q.box_lower);
    results["quadrature_box_upper"] = vec_json(q.box_upper);
    json transform = json::array();
    for (Index r = 0; r < q.transform.rows(); ++r) transform.push_back(vec_json(q.transform.row(r).transpose()));
    results["quadrature_origin"] = vec_json(q.origin);
    results["quadrature_transform"] = transform;
    SampleSet s = SampleSet::from_quadrature(q);
    const Vector mean = s.points * s.weights;
    return {std::move(s), mean, Vector::Zero(mean.size()), "quadrature"};
}

std::string resolve_source(const ExperimentConfig& cfg, Index n) {
    if (cfg.source != "auto") return cfg.source;
    return n <= 2 ? "quadrature" : "mcmc";
}

}  // namespace

ExperimentResult run_experiment(Command command, const ExperimentConfig& cfg) {
    ExperimentResult out;
    json results = json::object();
    std::vector<VerificationReport>& reports = out.checks;

    const Posterior post = build_posterior(cfg, cfg.seed);
    const Index n = post.dim();
    json derived = {{"data", derive_seed(cfg.seed, kDataStream)},
                    {"chains", derive_seed(cfg.seed, kChainStream)},
                    {"map_centred_form", derive_seed(cfg.seed, kCentredStream)},
                    {"perturbations", derive_seed(cfg.seed, kPerturbationStream)}};
    results["data"] = vec_json(post.fidelity().data());

    if (command == Command::Oracle && n > 3)
        throw UnsupportedError("oracle: quadrature supports dimension <= 3, got " + std::to_string(n));
    const std::string source = resolve_source(cfg, n);
    if ((command == Command::Verify || command == Command::Compare) && source == "quadrature" && n > 3)
        throw UnsupportedError("verify: quadrature source supports dimension <= 3, got " + std::to_string(n));
    if (command == Command::Verify && cfg.checks_given && post.fidelity().model() == NoiseModel::Laplace) {
        for (const auto& c : cfg.checks)
            if (c.name == "cm_average_optimality")
                throw UnsupportedError("cm_average_optimality: the laplace fidelity is not differentiable");
    }

    const MapResult map = solve_map(post, cfg.solver);
    reports.push_back(map_report(map));
    results["map_estimate"] = vec_json(map.estimate);
    results["map_residual"] = map.residual;
    results["map_method"] = map.method;

    switch (command) {
        case Command::Map: break;
        case Command::Cm: {
            const Sampled s = sample_with_chains(post, cfg, map.estimate, derive_seed(cfg.seed, kChainStream), reports, results);
            results["cm_estimate"] = vec_json(s.cm);
            results["cm_stderr"] = vec_json(s.cm_stderr);
            break;
        }
        case Command::Oracle: {
            const Sampled s = sample_with_quadrature(post, cfg, map.estimate, results);
            results["cm_estimate"] = vec_json(s.cm);
            QuadratureSettings doubled = cfg.quadrature;
            doubled.nodes = 2 * (cfg.quadrature.nodes > 0 ? cfg.quadrature.nodes : default_quadrature_nodes(n)) - 1;
            const QuadratureMeasure q2 = quadrature_posterior(post, map.estimate, doubled);
            const Vector mean2 = q2.nodes * q2.weights;
            VerificationReport r;
            r.name = "quadrature_convergence";
            r.measured["mean_change"] = (mean2 - s.cm).lpNorm<Eigen::Infinity>();
            r.measured["nodes"] = static_cast<double>(s.samples.size());
            r.tolerances["mean_change"] = cfg.doubling_tolerance;
            r.passed = r.measured["mean_change"] <= cfg.doubling_tolerance;
            reports.push_back(r);
            break;
        }
        case Command::Verify:
        case Command::Compare: {
            json sresults = json::object();
            const Sampled s = source == "mcmc"
                                  ? sample_with_chains(post, cfg, map.estimate, derive_seed(cfg.seed, kChainStream),
                                                       reports, sresults)
                                  : sample_with_quadrature(post, cfg, map.estimate, sresults);
            for (auto& [k, v] : sresults.items()) results[k] = v;
            results["source"] = s.source;
            results["cm_estimate"] = vec_json(s.cm);
            results["cm_stderr"] = vec_json(s.cm_stderr);

            std::vector<CheckSpec> checks = cfg.checks;
            if (command == Command::Compare) {
                checks = {CheckSpec{"compare_estimates"}};
            } else if (!cfg.checks_given) {
                for (const auto& name : {"map_centred_form", "map_bayes_optimality", "cm_average_optimality",
                                         "cm_bayes_optimality", "compare_estimates"}) {
                    if (std::string(name) == "cm_average_optimality" && !post.fidelity().smooth()) {
                        results["skipped"].push_back(name);
                        continue;
                    }
                    CheckSpec c{name};
                    c.radius = c.name == "map_centred_form" ? 2.0 : 0.5;
                    checks.push_back(c);
                }
                if (n <= 3) checks.push_back(CheckSpec{"sampler_agreement"});
            }

            for (const auto& c : checks) {
                if (c.name == "map_centred_form") {
                    const Vector centre = map.estimate.array() + c.centre_offset;
                    reports.push_back(verify_map_centred_form(post, centre, c.points, c.tolerance,
                                                              derive_seed(cfg.seed, kCentredStream), c.radius));
                } else if (c.name == "map_bayes_optimality") {
                    PerturbationSettings p;
                    p.count = c.perturbations;
                    p.radius = c.radius;
                    if (c.cost != "map") p.cost = named_cost(c.cost, post);
                    reports.push_back(verify_map_bayes_optimality(post, map.estimate, s.samples, p,
                                                                  derive_seed(cfg.seed, kPerturbationStream)));
                } else if (c.name == "cm_average_optimality") {
                    reports.push_back(verify_cm_average_optimality(post, s.samples));
                } else if (c.name == "cm_bayes_optimality") {
                    const Vector init = map.estimate.array() + c.init_offset;
                    for (const auto& cost : c.costs)
                        reports.push_back(verify_cm_bayes_optimality(named_cost(cost, post), cost, s.samples, init));
                } else if (c.name == "compare_estimates") {
                    reports.push_back(compare_estimates(post, map.estimate, s.cm, s.samples));
                } else if (c.name == "sampler_agreement") {
                    if (n > 3) throw UnsupportedError("sampler_agreement needs dimension <= 3");
                    json tmp;
                    std::vector<VerificationReport> extra;
                    const Sampled other = s.source == "mcmc"
                                              ? sample_with_quadrature(post, cfg, map.estimate, tmp)
                                              : sample_with_chains(post, cfg, map.estimate,
                                                                   derive_seed(cfg.seed, kChainStream), extra, tmp);
                    const Vector& se = s.source == "mcmc" ? s.cm_stderr : other.cm_stderr;
                    VerificationReport r;
                    r.name = "sampler_agreement";
                    r.seeds.push_back(derive_seed(cfg.seed, kChainStream));
                    const Vector diff = (s.cm - other.cm).cwiseAbs();
                    const Vector bound = (kStderrMultiple * se).array() + kQuadratureSlack;
                    r.measured["max_diff"] = diff.maxCoeff();
                    r.measured["max_diff_in_stderr"] = (diff.array() / se.array().max(1e-300)).maxCoeff();
                    r.tolerances["stderr_multiple"] = kStderrMultiple;
                    r.passed = (diff.array() <= bound.array()).all();
                    reports.push_back(r);
                }
            }
            break;
        }
    }

    out.passed = true;
    for (const auto& r : reports) out.passed = out.passed && r.passed;

    json& rep = out.report;
    rep["tool"] = "bregbayes";
    rep["version"] = BREGBAYES_VERSION;
    rep["command"] = to_string(command);
    rep["config"] = resolved_config(cfg);
    rep["seed"] = cfg.seed;
    rep["derived_seeds"] = derived;
    rep["results"] = results;
    rep["checks"] = reports;
    rep["passed"] = out.passed;

    std::filesystem::create_directories(cfg.output_dir);
    const std::filesystem::path dir(cfg.output_dir);
    std::ofstream os(dir / "report.json");
    if (!os) throw std::runtime_error("cannot write " + (dir / "report.json").string());
    os << rep.dump(2) << '\n';
    write_summary_csv(reports, (dir / "summary.csv").string());
    return out;
}

}  // namespace bregbayes
