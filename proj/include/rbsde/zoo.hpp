#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rbsde/bsde_solver.hpp"
#include "rbsde/errors.hpp"
#include "rbsde/problem.hpp"
#include "rbsde/regression.hpp"

namespace rbsde {

enum class Provenance { closed_form, hjb_oracle, brute_force, none };

inline std::string to_string(Provenance p)
{
    switch (p) {
    case Provenance::closed_form: return "closed-form";
    case Provenance::hjb_oracle: return "hjb-oracle";
    case Provenance::brute_force: return "brute-force";
    case Provenance::none: return "none";
    }
    return "none";
}

struct KnownValue {
    Provenance provenance = Provenance::none;
    std::optional<double> value; // present for closed forms; oracle values are computed on demand
    std::string oracle;
};

// Numerical defaults attached to a zoo problem.
struct ZooDefaults {
    double lambda_total = 1.0;
    bool implicit_scheme = false;
    std::vector<double> mark_weights;
    double a0 = 0.0;
    std::optional<double> max_dt;
    std::vector<ScheduleEntry> schedule = default_schedule();
    RegressionBasis basis;
    std::vector<std::pair<double, double>> hjb_box{{-6.0, 6.0}};
    double hjb_dx = 0.01;
    double target_tol = 0.05;
};

struct ZooProblem {
    std::string name;
    std::string description;
    ProblemSpec spec;
    KnownValue known;
    std::string bsde_stage = "full"; // or "summary-regression"
    std::string caveat;
    ZooDefaults defaults;
};

namespace zoo {

inline DriftFn constant_drift(double c)
{
    return [c](double, const PathSummary&, double, std::span<double> out) { std::fill(out.begin(), out.end(), c); };
}
inline DiffusionFn constant_diffusion(double c)
{
    return [c](double, const PathSummary&, double, std::span<double> out) { std::fill(out.begin(), out.end(), c); };
}
inline DriftFn action_drift()
{
    return [](double, const PathSummary&, double a, std::span<double> out) { out[0] = a; };
}

// f = c, b = a, sigma = 1, A = {-1, 1}.
inline ZooProblem constant_reward(double c = 1.0, double beta = 0.5)
{
    ZooProblem z;
    z.name = "constant-reward";
    z.description = "f = c; the value c(1 - e^{-beta T})/beta does not depend on the control";
    ProblemSpec& s = z.spec;
    s.name = z.name;
    s.drift = action_drift();
    s.diffusion = constant_diffusion(1.0);
    s.reward = [c](double, const PathSummary&, double) { return c; };
    s.beta = beta;
    s.x0 = {0.0};
    s.control_space = ControlSpace::finite({-1.0, 1.0});
    s.regime = Regime::bounded(std::abs(c));
    s.lipschitz_L = 2.0;
    z.known = {Provenance::closed_form, c / beta, "c / beta (infinite horizon)"};
    z.defaults.a0 = -1.0;
    z.defaults.schedule = {{30.0, 2.0, 10000}, {30.0, 5.0, 10000}};
    z.defaults.max_dt = 0.1;
    z.defaults.target_tol = 1e-4;
    return z;
}

// A = {0}, b = -x, sigma = 1, f = -x^2: the control plays no role.
inline ZooProblem singleton_ou(double beta = 1.0, double x0 = 1.0)
{
    ZooProblem z;
    z.name = "singleton-ou";
    z.description = "Ornstein-Uhlenbeck dX = -X dt + dW with f = -x^2 and a single action";
    ProblemSpec& s = z.spec;
    s.name = z.name;
    s.drift = [](double, const PathSummary& p, double, std::span<double> out) { out[0] = -p.x(0); };
    s.diffusion = constant_diffusion(1.0);
    s.reward = [](double, const PathSummary& p, double) { return -p.x(0) * p.x(0); };
    s.beta = beta;
    s.x0 = {x0};
    s.control_space = ControlSpace::finite({0.0});
    s.regime = Regime::polynomial(2.0, 1.0);
    s.lipschitz_L = 1.0;
    s.declared_growth = GrowthConstants{2.0, 10.0, 0.5, 2.0};
    z.known = {Provenance::closed_form, -(x0 * x0 / (beta + 2.0) + 1.0 / (beta * (beta + 2.0))),
               "int_0^inf e^{-beta t} E[X_t^2] dt = x^2/(beta+2) + 1/(beta(beta+2))"};
    z.defaults.a0 = 0.0;
    z.defaults.max_dt = 0.01;
    z.defaults.schedule = {{5.0, 2.0, 10000}, {10.0, 2.0, 10000}, {20.0, 2.0, 20000}};
    return z;
}

// b = a, sigma = 1, f = -|x|, A = {-1, 1}.
inline ZooProblem bangbang_1d()
{
    ZooProblem z;
    z.name = "bangbang-1d";
    z.description = "drift control a in {-1, 1}, unit noise, reward -|x|";
    ProblemSpec& s = z.spec;
    s.name = z.name;
    s.drift = action_drift();
    s.diffusion = constant_diffusion(1.0);
    s.reward = [](double, const PathSummary& p, double) { return -std::abs(p.x(0)); };
    s.beta = 1.0;
    s.x0 = {0.0};
    s.control_space = ControlSpace::finite({-1.0, 1.0});
    s.regime = Regime::polynomial(1.0, 1.0);
    s.lipschitz_L = 2.0;
    s.declared_growth = GrowthConstants{1.0, 2.0, 0.5, 2.0};
    z.known = {Provenance::hjb_oracle, std::nullopt, "policy-iteration finite differences on [-6, 6], dx = 0.01"};
    z.defaults.a0 = -1.0;
    // switching must be fast against the time scale of the state: n lambda(A) large, hence the implicit scheme
    z.defaults.lambda_total = 20.0;
    z.defaults.implicit_scheme = true;
    z.defaults.max_dt = 0.025;
    z.defaults.schedule = {};
    for (auto [T, paths] : {std::pair{5.0, 10000}, {10.0, 10000}, {20.0, 50000}})
        for (double n : {2.0, 5.0, 10.0, 20.0}) z.defaults.schedule.push_back({T, n, static_cast<std::size_t>(paths)});
    return z;
}

// Same dynamics, bounded reward -min(|x|, 1): regime (A).
inline ZooProblem bangbang_capped_1d()
{
    ZooProblem z = bangbang_1d();
    z.name = "bangbang-capped-1d";
    z.description = "drift control a in {-1, 1}, unit noise, bounded reward -min(|x|, 1)";
    z.spec.name = z.name;
    z.spec.reward = [](double, const PathSummary& p, double) { return -std::min(std::abs(p.x(0)), 1.0); };
    z.spec.regime = Regime::bounded(1.0);
    z.spec.declared_growth.reset();
    z.known = {Provenance::hjb_oracle, std::nullopt, "policy-iteration finite differences on [-6, 6], dx = 0.01"};
    z.defaults = ZooDefaults{};
    z.defaults.a0 = -1.0;
    z.defaults.schedule = {{5.0, 5.0, 10000}, {5.0, 20.0, 10000}, {10.0, 5.0, 10000}, {10.0, 20.0, 10000},
                           {20.0, 5.0, 10000}, {20.0, 20.0, 10000}};
    return z;
}

// b = 0, sigma = a in {0.5, 1.5}, f = -x^2: control in the diffusion.
inline ZooProblem controlled_vol_1d()
{
    ZooProblem z;
    z.name = "controlled-vol-1d";
    z.description = "volatility control a in {0.5, 1.5}, no drift, reward -x^2";
    ProblemSpec& s = z.spec;
    s.name = z.name;
    s.drift = constant_drift(0.0);
    s.diffusion = [](double, const PathSummary&, double a, std::span<double> out) { out[0] = a; };
    s.reward = [](double, const PathSummary& p, double) { return -p.x(0) * p.x(0); };
    s.beta = 1.0;
    s.x0 = {0.5};
    s.control_space = ControlSpace::finite({0.5, 1.5});
    s.regime = Regime::polynomial(2.0, 1.0);
    s.lipschitz_L = 1.5;
    s.declared_growth = GrowthConstants{2.0, 14.0, 0.5, 2.0};
    z.known = {Provenance::hjb_oracle, std::nullopt, "policy-iteration finite differences on [-6, 6], dx = 0.01"};
    z.defaults.a0 = 0.5;
    return z;
}

// b_t = a - EWMA_t(X), sigma = 1, f = -min(|x|, 2): path-dependent drift.
inline ZooProblem memory_drift()
{
    ZooProblem z;
    z.name = "memory-drift";
    z.description = "drift a minus an exponential moving average of the path (rate 1), reward -min(|x|, 2)";
    ProblemSpec& s = z.spec;
    s.name = z.name;
    s.summary.ewma_rate = 1.0;
    s.drift = [](double, const PathSummary& p, double a, std::span<double> out) { out[0] = a - p.ewma(0); };
    s.diffusion = constant_diffusion(1.0);
    s.reward = [](double, const PathSummary& p, double) { return -std::min(std::abs(p.x(0)), 2.0); };
    s.beta = 1.0;
    s.x0 = {0.0};
    s.control_space = ControlSpace::finite({-0.5, 0.5});
    s.regime = Regime::bounded(2.0);
    s.lipschitz_L = 1.5;
    z.known = {Provenance::none, std::nullopt, "no independent oracle (path-dependent)"};
    z.bsde_stage = "summary-regression";
    z.caveat = "conditional expectations are regressed on (x, EWMA) only; the value is exact for this summary "
               "because the coefficients read nothing else, but the regression is two-dimensional";
    z.defaults.a0 = -0.5;
    z.defaults.basis.knots = 10;
    z.defaults.schedule = {{5.0, 2.0, 10000}, {5.0, 5.0, 10000}, {10.0, 2.0, 10000}, {10.0, 5.0, 10000}};
    return z;
}

} // namespace zoo

inline LimitOptions limit_options(const ZooProblem& z, std::uint64_t seed, std::size_t threads = 1)
{
    LimitOptions o;
    o.lambda_total = z.defaults.lambda_total;
    o.mark_weights = z.defaults.mark_weights;
    o.a0 = z.defaults.a0;
    o.max_dt = z.defaults.max_dt;
    o.seed = seed;
    o.bsde.implicit_scheme = z.defaults.implicit_scheme;
    o.bsde.threads = threads;
    return o;
}

inline std::vector<ZooProblem> zoo_list()
{
    return {zoo::constant_reward(), zoo::singleton_ou(), zoo::bangbang_1d(), zoo::controlled_vol_1d(),
            zoo::memory_drift(), zoo::bangbang_capped_1d()};
}

inline ZooProblem zoo_problem(const std::string& name)
{
    for (auto& z : zoo_list())
        if (z.name == name) return z;
    throw ConfigError("unknown zoo problem '" + name + "'");
}

} // namespace rbsde
