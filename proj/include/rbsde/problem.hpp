#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rbsde/control_space.hpp"
#include "rbsde/errors.hpp"
#include "rbsde/rng.hpp"
#include "rbsde/summary.hpp"

namespace rbsde {

// ---------------------------------------------------------------------------
// Moment-growth constants
// ---------------------------------------------------------------------------

struct GrowthConstants {
    double p = 2.0;
    double c_bar = 1.0;
    double beta_bar = 0.0;
    double bdg_constant = 2.0;
};

// Default BDG constant for moment order p: 2 for p <= 2 (Doob's L2 maximal
// inequality with the Ito isometry), (p/(p-1))^p p^{p/2} above.
inline double default_bdg_constant(double p)
{
    require(p > 0.0, "bdg constant: p must be > 0");
    if (p <= 2.0) return 2.0;
    return std::pow(p / (p - 1.0), p) * std::pow(p, p / 2.0);
}

// Constants (C_bar, beta_bar) of the sup-moment estimate
//   E[sup_{s<=T} |X_s|^p | F_t] <= C_bar e^{beta_bar (T-t)} (1 + sup_{s<=t}|X_s|^p).
// For p < 2 the estimate is obtained from the p = 2 one by Jensen, so c_bdg is
// then the order-2 constant.
inline GrowthConstants growth_constants(double p, double L, double c_bdg)
{
    require(std::isfinite(p) && p > 0.0, "growth_constants: p must be > 0");
    require(std::isfinite(L) && L >= 0.0, "growth_constants: L must be >= 0");
    require(std::isfinite(c_bdg) && c_bdg > 0.0, "growth_constants: BDG constant must be > 0");
    GrowthConstants g;
    g.p = p;
    g.bdg_constant = c_bdg;
    const double lip = std::pow((1.0 + c_bdg) * L, p);
    g.beta_bar = 0.5 * p * (1.0 + 4.0 * (1.0 + c_bdg * c_bdg) * L * L);
    if (p >= 2.0)
        g.c_bar = std::pow(2.0, p + p / 2.0 - 1.0) * std::max(1.0, lip);
    else
        g.c_bar = std::pow(2.0, p) * std::max(1.0, lip);
    return g;
}

inline GrowthConstants growth_constants(double p, double L)
{
    return growth_constants(p, L, default_bdg_constant(std::max(p, 2.0)));
}

// ---------------------------------------------------------------------------
// Problem specification
// ---------------------------------------------------------------------------

// (A): bounded reward, any beta > 0. (A'): |f| <= M (1 + sup|x|^r) and
// beta > beta_bar.
struct Regime {
    enum class Kind { bounded, polynomial };
    Kind kind = Kind::bounded;
    double f_sup = 0.0; // (A)
    double r = 0.0;     // (A')
    double M = 0.0;     // (A')

    static Regime bounded(double f_sup) { return {Kind::bounded, f_sup, 0.0, 0.0}; }
    static Regime polynomial(double r, double M) { return {Kind::polynomial, 0.0, r, M}; }
    bool is_bounded() const noexcept { return kind == Kind::bounded; }
};

using DriftFn = std::function<void(double t, const PathSummary& s, double a, std::span<double> out)>;
using DiffusionFn = std::function<void(double t, const PathSummary& s, double a, std::span<double> out)>;
using RewardFn = std::function<double(double t, const PathSummary& s, double a)>;

struct ProblemSpec {
    std::string name;
    std::size_t dim_state = 1;
    std::size_t dim_noise = 1;
    SummarySpec summary;
    DriftFn drift;         // writes n entries
    DiffusionFn diffusion; // writes n*d entries, row-major
    RewardFn reward;
    double beta = 1.0;
    std::vector<double> x0{0.0};
    ControlSpace control_space = ControlSpace::finite({0.0});
    Regime regime = Regime::bounded(0.0);
    double lipschitz_L = 0.0;
    std::optional<double> bdg_constant;
    // A problem-specific moment estimate (beta_bar, C_bar) for the reward
    // exponent r, used instead of the generic constants when present. Any pair
    // satisfying the sup-moment estimate is admissible; check_moment_bound
    // validates it empirically.
    std::optional<GrowthConstants> declared_growth;

    bool markovian() const noexcept { return summary.markovian(); }
    double x0_norm() const { return SummarySpec::norm(x0); }

    void check_structure() const
    {
        require(dim_state > 0 && dim_noise > 0, "problem: dimensions must be positive");
        require(x0.size() == dim_state, "problem: x0 must have dim_state entries");
        require(summary.dim_state == dim_state, "problem: summary dimension mismatch");
        require(drift && diffusion && reward, "problem: coefficients must be set");
        require(std::isfinite(beta) && beta > 0.0, "problem: beta must be > 0");
        require(lipschitz_L >= 0.0, "problem: L must be >= 0");
        if (regime.is_bounded())
            require(std::isfinite(regime.f_sup) && regime.f_sup >= 0.0, "problem: regime (A) needs a finite sup bound");
        else
            require(regime.r > 0.0 && regime.M > 0.0, "problem: regime (A') needs r > 0 and M > 0");
    }

    // Constants governing the reward exponent r under (A').
    GrowthConstants growth() const
    {
        if (declared_growth) return *declared_growth;
        const double p = regime.is_bounded() ? 2.0 : regime.r;
        return growth_constants(p, lipschitz_L, bdg_constant.value_or(default_bdg_constant(std::max(p, 2.0))));
    }

    // beta - beta_bar under (A'); beta under (A).
    double tail_decay_rate() const
    {
        if (regime.is_bounded()) return beta;
        return beta - growth().beta_bar;
    }
};

// Bound on |Y_t| given sup_{s<=t}|X_s|; |Y| <= ||f||/beta under (A).
inline double value_bound(const ProblemSpec& spec, double sup_state_norm)
{
    if (spec.regime.is_bounded()) return spec.regime.f_sup / spec.beta;
    const auto g = spec.growth();
    const double gap = spec.beta - g.beta_bar;
    if (gap <= 0.0) return std::numeric_limits<double>::infinity();
    return 2.0 * spec.regime.M * (1.0 + g.c_bar) / gap * (1.0 + std::pow(sup_state_norm, spec.regime.r));
}

inline double value_bound(const ProblemSpec& spec) { return value_bound(spec, spec.x0_norm()); }

// |V - V_T| from the finite-horizon approximation of the value.
inline double truncation_bound(const ProblemSpec& spec, double T)
{
    if (spec.regime.is_bounded()) return spec.regime.f_sup * std::exp(-spec.beta * T) / spec.beta;
    const auto g = spec.growth();
    const double gap = spec.beta - g.beta_bar;
    if (gap <= 0.0) return std::numeric_limits<double>::infinity();
    const double M = spec.regime.M;
    return M * std::exp(-spec.beta * T) / spec.beta
           + M * g.c_bar * (1.0 + std::pow(spec.x0_norm(), spec.regime.r)) * std::exp(-gap * T) / gap;
}

// |Y^{T'}_0 - Y^T_0| for T' >= T, from the dual representation of the
// penalized solutions.
inline double tail_bound(const ProblemSpec& spec, double T)
{
    if (spec.regime.is_bounded()) return spec.regime.f_sup / spec.beta * std::exp(-spec.beta * T);
    const double gap = spec.tail_decay_rate();
    if (gap <= 0.0) return std::numeric_limits<double>::infinity();
    return value_bound(spec) * std::exp(-gap * T);
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct ProbeSample {
    double t = 0.0;
    double action = 0.0;
    std::vector<double> features;
    std::vector<double> features_other;
    double ratio = 0.0;
};

struct ValidationReport {
    bool valid = true;           // false iff a hard assumption fails
    bool assumption_violation = false;
    std::string message;
    GrowthConstants generic_growth; // constants from (r, L, C_p)
    GrowthConstants used_growth;    // what the tail certificates use
    bool lipschitz_ok = true;
    double empirical_L = 0.0;
    std::optional<ProbeSample> lipschitz_offender;
    bool origin_ok = true;
    double origin_bound = 0.0; // max_a |b(0,a)| + |sigma(0,a)|
    bool reward_ok = true;
    std::optional<ProbeSample> reward_offender;
    std::size_t probes = 0;
};

struct ProbeOptions {
    std::size_t pairs = 256;
    double slack = 1.05;
    std::uint64_t seed = 12345;
};

namespace detail {

inline double coefficient_distance(const ProblemSpec& spec, double t, const PathSummary& s1, const PathSummary& s2,
                                   double a)
{
    const std::size_t n = spec.dim_state, d = spec.dim_noise;
    std::vector<double> b1(n), b2(n), g1(n * d), g2(n * d);
    spec.drift(t, s1, a, b1);
    spec.drift(t, s2, a, b2);
    spec.diffusion(t, s1, a, g1);
    spec.diffusion(t, s2, a, g2);
    double db = 0.0, dg = 0.0;
    for (std::size_t i = 0; i < n; ++i) db += (b1[i] - b2[i]) * (b1[i] - b2[i]);
    for (std::size_t i = 0; i < n * d; ++i) dg += (g1[i] - g2[i]) * (g1[i] - g2[i]);
    return std::sqrt(db) + std::sqrt(dg);
}

} // namespace detail

// Checks beta against beta_bar under (A') and probes Lipschitz continuity and
// reward growth on random path summaries. Probe failures are reported, never
// thrown.
inline ValidationReport validate_problem(const ProblemSpec& spec, const ProbeOptions& opt = {})
{
    spec.check_structure();
    ValidationReport rep;
    const double p = spec.regime.is_bounded() ? 2.0 : spec.regime.r;
    rep.generic_growth = growth_constants(
        p, spec.lipschitz_L, spec.bdg_constant.value_or(default_bdg_constant(std::max(p, 2.0))));
    rep.used_growth = spec.growth();

    if (!spec.regime.is_bounded() && !(spec.beta > rep.used_growth.beta_bar)) {
        rep.valid = false;
        rep.assumption_violation = true;
        rep.message = "beta = " + std::to_string(spec.beta) + " does not exceed beta_bar = "
                      + std::to_string(rep.used_growth.beta_bar);
    }

    const SummarySpec& ss = spec.summary;
    const std::size_t m = ss.size();
    auto rng = make_stream(opt.seed, 0, StreamTag::probe);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double radius = 2.0 * (1.0 + spec.x0_norm()) + 3.0;
    const auto actions = spec.control_space.enumerate(9);

    auto random_features = [&](std::vector<double>& f) {
        f.assign(m, 0.0);
        for (std::size_t i = 0; i < m; ++i) f[i] = radius * (2.0 * unit(rng) - 1.0);
        if (ss.running_sup) {
            double nx = SummarySpec::norm(std::span<const double>(f.data(), ss.dim_state));
            f[ss.sup_offset()] = nx + radius * unit(rng);
        }
    };

    std::vector<double> f1, f2;
    for (std::size_t k = 0; k < opt.pairs; ++k) {
        const double t = 10.0 * unit(rng);
        const double a = actions[std::min(actions.size() - 1, static_cast<std::size_t>(unit(rng) * actions.size()))];
        random_features(f1);
        const double scale = std::pow(10.0, -3.0 + 3.0 * unit(rng));
        f2 = f1;
        for (std::size_t i = 0; i < m; ++i) f2[i] += scale * (2.0 * unit(rng) - 1.0);
        if (ss.running_sup) {
            double nx = SummarySpec::norm(std::span<const double>(f2.data(), ss.dim_state));
            f2[ss.sup_offset()] = std::max(f2[ss.sup_offset()], nx);
        }
        double dist = 0.0;
        for (std::size_t i = 0; i < m; ++i) dist = std::max(dist, std::abs(f1[i] - f2[i]));
        PathSummary s1{&ss, f1}, s2{&ss, f2};
        const double ratio = dist > 0.0 ? detail::coefficient_distance(spec, t, s1, s2, a) / dist : 0.0;
        if (ratio > rep.empirical_L) rep.empirical_L = ratio;
        if (ratio > opt.slack * spec.lipschitz_L && rep.lipschitz_ok) {
            rep.lipschitz_ok = false;
            rep.lipschitz_offender = ProbeSample{t, a, f1, f2, ratio};
        }

        // reward growth
        const double fv = std::abs(spec.reward(t, s1, a));
        const double sup_x = ss.running_sup ? f1[ss.sup_offset()]
                                            : SummarySpec::norm(std::span<const double>(f1.data(), ss.dim_state));
        const double allowed = spec.regime.is_bounded()
                                   ? spec.regime.f_sup
                                   : spec.regime.M * (1.0 + std::pow(sup_x, spec.regime.r));
        if (!(fv <= opt.slack * allowed + 1e-12) && rep.reward_ok) {
            rep.reward_ok = false;
            rep.reward_offender = ProbeSample{t, a, f1, {}, fv};
        }
        ++rep.probes;
    }

    // |b(0,a)| + |sigma(0,a)| <= L (only binding under (A'))
    std::vector<double> zero(m, 0.0);
    PathSummary s0{&ss, zero};
    std::vector<double> b(spec.dim_state), g(spec.dim_state * spec.dim_noise);
    for (double a : actions) {
        for (double t : {0.0, 1.0, 5.0}) {
            spec.drift(t, s0, a, b);
            spec.diffusion(t, s0, a, g);
            const double v = SummarySpec::norm(b) + SummarySpec::norm(g);
            rep.origin_bound = std::max(rep.origin_bound, v);
        }
    }
    if (!spec.regime.is_bounded() && rep.origin_bound > opt.slack * spec.lipschitz_L) rep.origin_ok = false;

    if (rep.message.empty() && (!rep.lipschitz_ok || !rep.origin_ok || !rep.reward_ok)) {
        rep.message = "probe failure";
        if (!rep.lipschitz_ok) rep.message += "; empirical L ~ " + std::to_string(rep.empirical_L);
        if (!rep.origin_ok) rep.message += "; |b(0,a)|+|sigma(0,a)| ~ " + std::to_string(rep.origin_bound);
        if (!rep.reward_ok) rep.message += "; reward exceeds its declared growth";
    }
    return rep;
}

inline void ensure_valid(const ProblemSpec& spec)
{
    auto rep = validate_problem(spec);
    if (rep.assumption_violation) throw AssumptionViolation(rep.message);
}

} // namespace rbsde
