#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rbsde/bsde_solver.hpp"
#include "rbsde/errors.hpp"
#include "rbsde/expression.hpp"
#include "rbsde/problem.hpp"
#include "rbsde/zoo.hpp"

namespace rbsde {

using json = nlohmann::json;

enum class Stage { validate, simulate, solve_bsde, solve_hjb, compare, invariants };

inline std::string to_string(Stage s)
{
    switch (s) {
    case Stage::validate: return "validate";
    case Stage::simulate: return "simulate";
    case Stage::solve_bsde: return "solve-bsde";
    case Stage::solve_hjb: return "solve-hjb";
    case Stage::compare: return "compare";
    case Stage::invariants: return "invariants";
    }
    return "validate";
}

inline Stage stage_from_string(const std::string& s)
{
    for (Stage st : {Stage::validate, Stage::simulate, Stage::solve_bsde, Stage::solve_hjb, Stage::compare,
                     Stage::invariants})
        if (to_string(st) == s) return st;
    throw ConfigError("unknown pipeline stage '" + s + "'");
}

struct SimulateConfig {
    double T = 5.0;
    std::size_t n_paths = 1000;
    double dt = 0.05;
    std::size_t csv_paths = 100; // rows exported to CSV; the binary cache holds all paths
    bool binary = true;
    std::vector<double> moment_orders{2.0};
};

struct HJBConfig {
    std::vector<std::pair<double, double>> box;
    double dx = 0.01;
    bool strict_monotone = true;
};

struct ChecksConfig {
    std::size_t dual_samples = 8;
    double epsilon = 0.05;
    std::size_t n_paths = 20000;
    std::vector<std::pair<double, double>> dpp_box{{-1.0, 1.0}};
    double dpp_cap_fraction = 0.5;
};

struct ExperimentConfig {
    std::string problem_name;
    ZooProblem problem; // zoo entry or inlined problem wrapped with defaults
    std::vector<Stage> pipeline;
    std::vector<ScheduleEntry> schedule;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    std::size_t threads = 1;
    double target_tol = 0.05;
    double compare_rel_tol = 0.05;
    LimitOptions limit;
    RegressionBasis basis;
    SimulateConfig simulate;
    HJBConfig hjb;
    ChecksConfig checks;

    bool has(Stage s) const
    {
        for (Stage p : pipeline)
            if (p == s) return true;
        return false;
    }
};

namespace detail {

template <class T>
T get_or(const json& j, const char* key, T fallback)
{
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

inline std::vector<std::pair<double, double>> parse_box(const json& j, const char* what)
{
    std::vector<std::pair<double, double>> box;
    if (!j.is_array()) throw ConfigError(std::string(what) + ": expected a list of [lo, hi] pairs");
    for (const auto& r : j) {
        if (!r.is_array() || r.size() != 2) throw ConfigError(std::string(what) + ": expected [lo, hi]");
        box.emplace_back(r[0].get<double>(), r[1].get<double>());
    }
    return box;
}

inline ControlSpace parse_control_space(const json& j)
{
    if (j.is_array()) return ControlSpace::finite(j.get<std::vector<double>>());
    if (j.is_object() && j.contains("finite")) return ControlSpace::finite(j.at("finite").get<std::vector<double>>());
    if (j.is_object() && j.contains("interval")) {
        const auto v = j.at("interval").get<std::vector<double>>();
        if (v.size() != 2) throw ConfigError("control_space.interval: expected [lo, hi]");
        return ControlSpace::interval(v[0], v[1]);
    }
    throw ConfigError("control_space: expected a list of actions, {\"finite\": [...]} or {\"interval\": [lo, hi]}");
}

// Expression coefficients see t, x, a and the enabled summary features
// (sup, avg, ewma) of a 1-d state.
inline std::vector<double> expression_inputs(double t, const PathSummary& s, double a)
{
    const SummarySpec& sp = *s.spec;
    return {t,
            s.x(0),
            a,
            sp.running_sup ? s.sup() : 0.0,
            sp.running_average ? s.average(0) : 0.0,
            sp.ewma_rate > 0.0 ? s.ewma(0) : 0.0};
}

inline const std::vector<std::string>& expression_variables()
{
    static const std::vector<std::string> v{"t", "x", "a", "sup", "avg", "ewma"};
    return v;
}

inline ZooProblem parse_inline_problem(const json& j)
{
    ZooProblem z;
    ProblemSpec& s = z.spec;
    const json& coef = j.contains("coefficients") ? j.at("coefficients") : json();
    if (coef.is_string()) {
        // named builtin: start from the zoo entry, then apply overrides
        z = zoo_problem(coef.get<std::string>());
    } else if (coef.is_object()) {
        s.dim_state = get_or<std::size_t>(j, "dim_state", 1);
        s.dim_noise = get_or<std::size_t>(j, "dim_noise", 1);
        if (s.dim_state != 1 || s.dim_noise != 1)
            throw ConfigError("expression coefficients are supported for 1-d problems only");
        for (const char* k : {"drift", "diffusion", "reward"})
            if (!coef.contains(k)) throw ConfigError(std::string("coefficients.") + k + " is required");
        const auto& vars = expression_variables();
        const auto b = std::make_shared<Expression>(coef.at("drift").get<std::string>(), vars);
        const auto g = std::make_shared<Expression>(coef.at("diffusion").get<std::string>(), vars);
        const auto f = std::make_shared<Expression>(coef.at("reward").get<std::string>(), vars);
        s.drift = [b](double t, const PathSummary& p, double a, std::span<double> out) {
            out[0] = (*b)(expression_inputs(t, p, a));
        };
        s.diffusion = [g](double t, const PathSummary& p, double a, std::span<double> out) {
            out[0] = (*g)(expression_inputs(t, p, a));
        };
        s.reward = [f](double t, const PathSummary& p, double a) { return (*f)(expression_inputs(t, p, a)); };
        z.known = {Provenance::none, std::nullopt, "inline problem"};
    } else {
        throw ConfigError("problem.coefficients: expected a zoo name or {drift, diffusion, reward}");
    }
    z.name = get_or<std::string>(j, "name", z.name.empty() ? "inline" : z.name);
    s.name = z.name;
    if (j.contains("dim_state")) s.dim_state = j.at("dim_state").get<std::size_t>();
    if (j.contains("dim_noise")) s.dim_noise = j.at("dim_noise").get<std::size_t>();
    s.summary.dim_state = s.dim_state;
    if (j.contains("summary")) {
        const json& sm = j.at("summary");
        s.summary.running_sup = get_or<bool>(sm, "running_sup", false);
        s.summary.running_average = get_or<bool>(sm, "running_average", false);
        s.summary.ewma_rate = get_or<double>(sm, "ewma_rate", 0.0);
        s.summary.lags = get_or<std::vector<double>>(sm, "lags", {});
    }
    if (j.contains("beta")) s.beta = j.at("beta").get<double>();
    if (j.contains("x0")) s.x0 = j.at("x0").get<std::vector<double>>();
    if (j.contains("L")) s.lipschitz_L = j.at("L").get<double>();
    if (j.contains("bdg_constant")) s.bdg_constant = j.at("bdg_constant").get<double>();
    if (j.contains("control_space")) s.control_space = parse_control_space(j.at("control_space"));
    if (j.contains("regime")) {
        const auto r = j.at("regime").get<std::string>();
        if (r == "A" || r == "bounded")
            s.regime = Regime::bounded(get_or<double>(j, "f_sup", get_or<double>(j, "M", 0.0)));
        else if (r == "A'" || r == "polynomial")
            s.regime = Regime::polynomial(get_or<double>(j, "r", 0.0), get_or<double>(j, "M", 0.0));
        else
            throw ConfigError("problem.regime: expected \"A\" or \"A'\"");
        // declared constants belong to the zoo regime they were derived for
        s.declared_growth.reset();
    }
    if (j.contains("declared_growth")) {
        const json& g = j.at("declared_growth");
        s.declared_growth = GrowthConstants{get_or<double>(g, "p", 2.0), g.at("c_bar").get<double>(),
                                            g.at("beta_bar").get<double>(), get_or<double>(g, "bdg_constant", 2.0)};
    }
    if (s.x0.size() != s.dim_state) throw ConfigError("problem.x0 must have dim_state entries");
    try {
        s.check_structure();
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    return z;
}

inline std::vector<ScheduleEntry> parse_schedule(const json& j)
{
    std::vector<ScheduleEntry> out;
    if (!j.is_array() || j.empty()) throw ConfigError("schedule: expected a nonempty list");
    for (const auto& e : j)
        out.push_back({e.at("T").get<double>(), e.at("n").get<double>(), e.at("paths").get<std::size_t>()});
    return out;
}

} // namespace detail

// Parses a config document. seed_override and threads_override come from the
// command line; a seed must be given in one of the two places.
inline ExperimentConfig parse_config(const json& j, std::optional<std::uint64_t> seed_override = std::nullopt,
                                     std::optional<std::size_t> threads_override = std::nullopt)
{
    try {
        if (!j.is_object()) throw ConfigError("config: top level must be an object");
        ExperimentConfig c;
        if (!j.contains("problem")) throw ConfigError("config: 'problem' is required");
        const json& p = j.at("problem");
        if (p.is_string())
            c.problem = zoo_problem(p.get<std::string>());
        else
            c.problem = detail::parse_inline_problem(p);
        c.problem_name = c.problem.name;
        const ZooDefaults& d = c.problem.defaults;

        c.pipeline.clear();
        for (const auto& s : detail::get_or<std::vector<std::string>>(
                 j, "pipeline", {"validate", "solve-bsde", "solve-hjb", "compare", "invariants"}))
            c.pipeline.push_back(stage_from_string(s));

        if (seed_override)
            c.seed = *seed_override;
        else if (j.contains("seed"))
            c.seed = j.at("seed").get<std::uint64_t>();
        else
            throw ConfigError("config: an explicit 'seed' is required (or --seed)");
        c.threads = threads_override.value_or(detail::get_or<std::size_t>(j, "threads", 1));
        require(c.threads >= 1, "config: threads must be >= 1");
        c.output_dir = detail::get_or<std::string>(j, "output_dir", "out");
        c.target_tol = detail::get_or<double>(j, "target_tol", d.target_tol);
        c.compare_rel_tol = detail::get_or<double>(j, "compare_rel_tol", 0.05);
        c.schedule = j.contains("schedule") ? detail::parse_schedule(j.at("schedule")) : d.schedule;

        c.limit = limit_options(c.problem, c.seed, c.threads);
        if (j.contains("randomization")) {
            const json& r = j.at("randomization");
            c.limit.lambda_total = detail::get_or<double>(r, "lambda_total", c.limit.lambda_total);
            c.limit.mark_weights = detail::get_or<std::vector<double>>(r, "mark_weights", c.limit.mark_weights);
            if (r.contains("a0")) c.limit.a0 = r.at("a0").get<double>();
            if (r.contains("max_dt")) c.limit.max_dt = r.at("max_dt").get<double>();
            c.limit.bsde.implicit_scheme = detail::get_or<bool>(r, "implicit", c.limit.bsde.implicit_scheme);
        }

        c.basis = d.basis;
        if (j.contains("basis")) {
            const json& b = j.at("basis");
            const auto kind = detail::get_or<std::string>(b, "kind", "tent");
            if (kind == "tent")
                c.basis.kind = RegressionBasis::Kind::tent;
            else if (kind == "polynomial")
                c.basis.kind = RegressionBasis::Kind::polynomial;
            else
                throw ConfigError("basis.kind: expected tent or polynomial");
            c.basis.degree = detail::get_or<int>(b, "degree", c.basis.degree);
            c.basis.knots = detail::get_or<int>(b, "knots", c.basis.knots);
            c.basis.action_degree = detail::get_or<int>(b, "action_degree", c.basis.action_degree);
            c.basis.max_condition = detail::get_or<double>(b, "max_condition", c.basis.max_condition);
            if (b.contains("box")) c.basis.box = detail::parse_box(b.at("box"), "basis.box");
        }

        if (j.contains("simulate")) {
            const json& s = j.at("simulate");
            c.simulate.T = detail::get_or<double>(s, "T", c.simulate.T);
            c.simulate.n_paths = detail::get_or<std::size_t>(s, "paths", c.simulate.n_paths);
            c.simulate.dt = detail::get_or<double>(s, "dt", c.simulate.dt);
            c.simulate.csv_paths = detail::get_or<std::size_t>(s, "csv_paths", c.simulate.csv_paths);
            c.simulate.binary = detail::get_or<bool>(s, "binary", c.simulate.binary);
            c.simulate.moment_orders = detail::get_or<std::vector<double>>(s, "moment_orders", c.simulate.moment_orders);
        }

        c.hjb.box = d.hjb_box;
        c.hjb.dx = d.hjb_dx;
        if (j.contains("hjb")) {
            const json& h = j.at("hjb");
            if (h.contains("box")) c.hjb.box = detail::parse_box(h.at("box"), "hjb.box");
            c.hjb.dx = detail::get_or<double>(h, "dx", c.hjb.dx);
            c.hjb.strict_monotone = detail::get_or<bool>(h, "strict_monotone", c.hjb.strict_monotone);
        }

        if (j.contains("checks")) {
            const json& k = j.at("checks");
            c.checks.dual_samples = detail::get_or<std::size_t>(k, "dual_samples", c.checks.dual_samples);
            c.checks.epsilon = detail::get_or<double>(k, "epsilon", c.checks.epsilon);
            c.checks.n_paths = detail::get_or<std::size_t>(k, "paths", c.checks.n_paths);
            if (k.contains("dpp_box")) c.checks.dpp_box = detail::parse_box(k.at("dpp_box"), "checks.dpp_box");
            c.checks.dpp_cap_fraction = detail::get_or<double>(k, "dpp_cap_fraction", c.checks.dpp_cap_fraction);
        }
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
}

inline ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt,
                                    std::optional<std::size_t> threads_override = std::nullopt)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return parse_config(j, seed_override, threads_override);
}

} // namespace rbsde
