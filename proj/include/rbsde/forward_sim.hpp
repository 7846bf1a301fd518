#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "rbsde/control_space.hpp"
#include "rbsde/errors.hpp"
#include "rbsde/parallel.hpp"
#include "rbsde/problem.hpp"
#include "rbsde/rng.hpp"
#include "rbsde/summary.hpp"

namespace rbsde {

class TimeGrid {
public:
    TimeGrid(double t_end, std::size_t n_steps) : t_end_(t_end), n_steps_(n_steps)
    {
        require(std::isfinite(t_end) && t_end > 0.0, "time grid: horizon must be > 0");
        require(n_steps > 0, "time grid: need at least one step");
        dt_ = t_end_ / static_cast<double>(n_steps_);
    }

    // Smallest uniform grid on [0, T] whose step does not exceed max_dt.
    static TimeGrid with_max_step(double t_end, double max_dt)
    {
        require(max_dt > 0.0, "time grid: step must be > 0");
        const auto n = static_cast<std::size_t>(std::ceil(t_end / max_dt - 1e-9));
        return TimeGrid(t_end, std::max<std::size_t>(1, n));
    }

    double t_end() const noexcept { return t_end_; }
    std::size_t n_steps() const noexcept { return n_steps_; }
    std::size_t n_nodes() const noexcept { return n_steps_ + 1; }
    double dt() const noexcept { return dt_; }
    double time(std::size_t k) const noexcept { return k == n_steps_ ? t_end_ : static_cast<double>(k) * dt_; }

    // Node index of time t (rounded); t must lie on the grid up to 1e-9 dt.
    std::size_t node_of(double t) const
    {
        const double k = t / dt_;
        const auto r = static_cast<std::size_t>(std::llround(k));
        require(std::abs(k - static_cast<double>(r)) < 1e-6 && r <= n_steps_, "time grid: time is not a grid node");
        return r;
    }

private:
    double t_end_;
    std::size_t n_steps_;
    double dt_;
};

// Marked point process (T_n, A_n) and the step process I_t = A_n on
// [T_n, T_{n+1}) with T_0 = 0, A_0 = a0.
struct JumpTrajectory {
    std::vector<double> jump_times;
    std::vector<double> marks;
    double a0 = 0.0;

    // Right-continuous value I_t.
    double action_at(double t) const
    {
        auto it = std::upper_bound(jump_times.begin(), jump_times.end(), t);
        if (it == jump_times.begin()) return a0;
        return marks[static_cast<std::size_t>(it - jump_times.begin()) - 1];
    }

    // Left limit I_{t-}.
    double action_before(double t) const
    {
        auto it = std::lower_bound(jump_times.begin(), jump_times.end(), t);
        if (it == jump_times.begin()) return a0;
        return marks[static_cast<std::size_t>(it - jump_times.begin()) - 1];
    }

    std::size_t count_up_to(double t) const
    {
        return static_cast<std::size_t>(std::upper_bound(jump_times.begin(), jump_times.end(), t) - jump_times.begin());
    }
};

// Poisson jump times of rate lambda(A) on [0, t_end], i.i.d. marks. Jump
// times are generated by successive exponential gaps so trajectories on
// nested horizons agree on their common part.
template <class Rng>
JumpTrajectory simulate_marked_point_process(const JumpMeasure& measure, double a0, double t_end, Rng& rng)
{
    require(t_end >= 0.0, "marked point process: horizon must be >= 0");
    JumpTrajectory jt;
    jt.a0 = a0;
    std::exponential_distribution<double> gap(measure.total());
    double t = 0.0;
    for (;;) {
        t += gap(rng);
        if (!(t <= t_end)) break;
        if (t <= 0.0) continue;
        jt.jump_times.push_back(t);
        jt.marks.push_back(measure.sample_mark(rng));
    }
    return jt;
}

inline JumpTrajectory simulate_marked_point_process(const JumpMeasure& measure, double a0, double t_end,
                                                    std::uint64_t seed, std::uint64_t path = 0)
{
    auto rng = make_stream(seed, path, StreamTag::jumps);
    return simulate_marked_point_process(measure, a0, t_end, rng);
}

// Monte-Carlo bundle on a uniform grid. Arrays are path-major.
class PathEnsemble {
public:
    PathEnsemble(TimeGrid grid, std::size_t n_paths, const ProblemSpec& spec, std::uint64_t seed)
        : grid_(grid), n_paths_(n_paths), dim_state_(spec.dim_state), dim_noise_(spec.dim_noise),
          summary_(spec.summary), seed_(seed)
    {
        require(n_paths > 0, "ensemble: need at least one path");
        states_.assign(n_paths_ * grid_.n_nodes() * dim_state_, 0.0);
        if (!summary_.markovian()) features_.assign(n_paths_ * grid_.n_nodes() * summary_.size(), 0.0);
        increments_.assign(n_paths_ * grid_.n_steps() * dim_noise_, 0.0);
        actions_.assign(n_paths_ * grid_.n_steps(), 0.0);
        divergent_.assign(n_paths_, 0);
    }

    const TimeGrid& grid() const noexcept { return grid_; }
    std::size_t n_paths() const noexcept { return n_paths_; }
    std::size_t dim_state() const noexcept { return dim_state_; }
    std::size_t dim_noise() const noexcept { return dim_noise_; }
    std::size_t feature_dim() const noexcept { return summary_.size(); }
    const SummarySpec& summary_spec() const noexcept { return summary_; }
    std::uint64_t seed() const noexcept { return seed_; }
    bool randomized() const noexcept { return measure.has_value(); }
    bool has_jump_trajectories() const noexcept { return !jumps_.empty(); }

    std::span<double> state(std::size_t p, std::size_t k)
    {
        return {states_.data() + (p * grid_.n_nodes() + k) * dim_state_, dim_state_};
    }
    std::span<const double> state(std::size_t p, std::size_t k) const
    {
        return {states_.data() + (p * grid_.n_nodes() + k) * dim_state_, dim_state_};
    }
    std::span<double> features(std::size_t p, std::size_t k)
    {
        if (summary_.markovian()) return state(p, k);
        const std::size_t m = summary_.size();
        return {features_.data() + (p * grid_.n_nodes() + k) * m, m};
    }
    std::span<const double> features(std::size_t p, std::size_t k) const
    {
        if (summary_.markovian()) return state(p, k);
        const std::size_t m = summary_.size();
        return {features_.data() + (p * grid_.n_nodes() + k) * m, m};
    }
    PathSummary summary(std::size_t p, std::size_t k) const { return PathSummary{&summary_, features(p, k)}; }

    std::span<double> increment(std::size_t p, std::size_t k)
    {
        return {increments_.data() + (p * grid_.n_steps() + k) * dim_noise_, dim_noise_};
    }
    std::span<const double> increment(std::size_t p, std::size_t k) const
    {
        return {increments_.data() + (p * grid_.n_steps() + k) * dim_noise_, dim_noise_};
    }

    // Action used on step k (held on [t_k, t_{k+1})).
    double action(std::size_t p, std::size_t k) const { return actions_[p * grid_.n_steps() + k]; }
    void set_action(std::size_t p, std::size_t k, double a) { actions_[p * grid_.n_steps() + k] = a; }

    const std::vector<JumpTrajectory>& jumps() const noexcept { return jumps_; }
    const JumpTrajectory& jump(std::size_t p) const { return jumps_.at(p); }
    std::vector<JumpTrajectory>& mutable_jumps() { return jumps_; }

    bool divergent(std::size_t p) const { return divergent_[p] != 0; }
    void mark_divergent(std::size_t p) { divergent_[p] = 1; }
    std::size_t n_divergent() const
    {
        return static_cast<std::size_t>(std::count(divergent_.begin(), divergent_.end(), std::uint8_t{1}));
    }

    double a0 = 0.0;
    std::optional<JumpMeasure> measure;

private:
    TimeGrid grid_;
    std::size_t n_paths_;
    std::size_t dim_state_;
    std::size_t dim_noise_;
    SummarySpec summary_;
    std::uint64_t seed_;
    std::vector<double> states_;
    std::vector<double> features_;
    std::vector<double> increments_;
    std::vector<double> actions_;
    std::vector<JumpTrajectory> jumps_;
    std::vector<std::uint8_t> divergent_;
};

// One Euler-Maruyama step with left-point coefficients.
// scratch must hold n + n*d doubles.
inline void euler_step(const ProblemSpec& spec, double t, const PathSummary& s, double a, double dt,
                       std::span<const double> dw, std::span<double> x_next, std::span<double> scratch)
{
    const std::size_t n = spec.dim_state, d = spec.dim_noise;
    auto b = scratch.first(n);
    auto sig = scratch.subspan(n, n * d);
    spec.drift(t, s, a, b);
    spec.diffusion(t, s, a, sig);
    for (std::size_t i = 0; i < n; ++i) {
        double v = s.x(i) + b[i] * dt;
        for (std::size_t j = 0; j < d; ++j) v += sig[i * d + j] * dw[j];
        x_next[i] = v;
    }
}

// How an intensity control acts on the grid in direct simulation: `thinning`
// switches to a' at a node with probability dt nu(a') lambda(a') (needs
// dt n lambda(A) <= 1); `implicit` repeats switch attempts at the node, each
// taken with probability sum/(1 + sum) where sum = dt sum_{a'} nu(a') lambda(a').
enum class SwitchRule { thinning, implicit };

struct SimulationOptions {
    std::size_t threads = 1;
    double max_divergent_fraction = 1e-3;
    bool insert_jump_nodes = false;
    bool keep_jumps = true; // keep the jump trajectories of randomized ensembles
    SwitchRule switch_rule = SwitchRule::thinning;
};

using Policy = std::function<double(double t, const PathSummary& s)>;

namespace detail {

inline bool all_finite(std::span<const double> v)
{
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Integrates one path given a per-step action source. With jump insertion the
// step is split at the jump times of the trajectory.
template <class ActionAt>
void integrate_path(const ProblemSpec& spec, PathEnsemble& ens, std::size_t p, ActionAt&& action_for_step,
                    const JumpTrajectory* jumps, bool insert_jump_nodes)
{
    const TimeGrid& g = ens.grid();
    const std::size_t n = spec.dim_state, d = spec.dim_noise;
    const SummarySpec& ss = spec.summary;
    auto rng = make_stream(ens.seed(), p, StreamTag::brownian);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double sqdt = std::sqrt(g.dt());
    std::vector<double> scratch(n + n * d), sub_x(n), sub_feat(ss.size()), dw_sub(d);

    std::copy(spec.x0.begin(), spec.x0.end(), ens.state(p, 0).begin());
    if (!ss.markovian()) ss.initialize(spec.x0, ens.features(p, 0));
    auto history = [&](std::size_t j) { return std::span<const double>(ens.state(p, j)); };

    bool diverged = false;
    for (std::size_t k = 0; k < g.n_steps(); ++k) {
        const double t = g.time(k);
        const double a = action_for_step(k, t, ens.summary(p, k));
        ens.set_action(p, k, a);
        auto dw = ens.increment(p, k);
        auto x_next = ens.state(p, k + 1);

        std::vector<double> cuts;
        if (insert_jump_nodes && jumps) {
            auto lo = std::upper_bound(jumps->jump_times.begin(), jumps->jump_times.end(), t);
            for (auto it = lo; it != jumps->jump_times.end() && *it < g.time(k + 1); ++it) cuts.push_back(*it);
        }

        if (cuts.empty() || diverged) {
            for (std::size_t j = 0; j < d; ++j) dw[j] = sqdt * normal(rng);
            if (diverged) {
                std::copy(ens.state(p, k).begin(), ens.state(p, k).end(), x_next.begin());
            } else {
                euler_step(spec, t, ens.summary(p, k), a, g.dt(), dw, x_next, scratch);
            }
        } else {
            // sub-steps at the jump times; the summary is frozen at the node
            std::fill(dw.begin(), dw.end(), 0.0);
            std::vector<double> feat(ens.features(p, k).begin(), ens.features(p, k).end());
            double s0 = t, act = a;
            cuts.push_back(g.time(k + 1));
            for (double s1 : cuts) {
                const double h = s1 - s0;
                for (std::size_t j = 0; j < d; ++j) {
                    dw_sub[j] = std::sqrt(h) * normal(rng);
                    dw[j] += dw_sub[j];
                }
                PathSummary sv{&ss, feat};
                euler_step(spec, s0, sv, act, h, dw_sub, sub_x, scratch);
                std::copy(sub_x.begin(), sub_x.end(), feat.begin());
                s0 = s1;
                act = jumps->action_at(s1);
            }
            std::copy(sub_x.begin(), sub_x.end(), x_next.begin());
        }

        if (!diverged && !all_finite(x_next)) {
            diverged = true;
            ens.mark_divergent(p);
            std::copy(ens.state(p, k).begin(), ens.state(p, k).end(), x_next.begin());
        }
        if (!ss.markovian()) ss.advance(ens.features(p, k), x_next, k + 1, g.dt(), history, ens.features(p, k + 1));
    }
}

inline void check_divergence(const PathEnsemble& ens, const SimulationOptions& opt)
{
    const double frac = static_cast<double>(ens.n_divergent()) / static_cast<double>(ens.n_paths());
    if (frac > opt.max_divergent_fraction)
        throw NumericalFailure("simulation: " + std::to_string(ens.n_divergent()) + " of "
                               + std::to_string(ens.n_paths()) + " paths diverged");
}

} // namespace detail

// Euler-Maruyama paths of the controlled SDE under a feedback policy.
inline PathEnsemble simulate_controlled_paths(const ProblemSpec& spec, const Policy& policy, const TimeGrid& grid,
                                              std::size_t n_paths, std::uint64_t seed,
                                              const SimulationOptions& opt = {})
{
    spec.check_structure();
    PathEnsemble ens(grid, n_paths, spec, seed);
    ens.a0 = policy(0.0, PathSummary{&spec.summary, spec.x0});
    parallel_for(n_paths, opt.threads, [&](std::size_t p) {
        detail::integrate_path(
            spec, ens, p, [&](std::size_t, double t, const PathSummary& s) { return policy(t, s); }, nullptr, false);
    });
    detail::check_divergence(ens, opt);
    return ens;
}

// Randomized pair (X, I): per path, a jump trajectory of intensity lambda(da)dt
// is drawn first; the action on step k is the left limit I_{t_k-}.
inline PathEnsemble simulate_randomized_pair(const ProblemSpec& spec, const JumpMeasure& measure, double a0,
                                             const TimeGrid& grid, std::size_t n_paths, std::uint64_t seed,
                                             const SimulationOptions& opt = {})
{
    spec.check_structure();
    require(measure.space().contains(a0), "randomized pair: a0 must belong to A");
    PathEnsemble ens(grid, n_paths, spec, seed);
    ens.a0 = a0;
    ens.measure = measure;
    auto& jumps = ens.mutable_jumps();
    jumps.resize(n_paths);
    parallel_for(n_paths, opt.threads, [&](std::size_t p) {
        jumps[p] = simulate_marked_point_process(measure, a0, grid.t_end(), seed, p);
        const JumpTrajectory& jt = jumps[p];
        detail::integrate_path(
            spec, ens, p, [&](std::size_t, double t, const PathSummary&) { return jt.action_before(t); }, &jt,
            opt.insert_jump_nodes);
        if (!opt.keep_jumps) jumps[p] = JumpTrajectory{};
    });
    if (!opt.keep_jumps) {
        jumps.clear();
        jumps.shrink_to_fit();
    }
    detail::check_divergence(ens, opt);
    return ens;
}

// ---------------------------------------------------------------------------
// Empirical check of the sup-moment estimate at t = 0
// ---------------------------------------------------------------------------

struct MomentReport {
    double p = 2.0;
    GrowthConstants constants;
    std::vector<double> times;
    std::vector<double> empirical; // E[sup_{s<=t_k}|X_s|^p]
    std::vector<double> std_error;
    std::vector<double> bound;     // C_bar e^{beta_bar t_k} (1 + |x0|^p)
    bool pass = true;
    std::optional<std::size_t> first_failure;
};

inline MomentReport check_moment_bound(const PathEnsemble& ens, double p, const GrowthConstants& constants,
                                       std::span<const double> x0)
{
    require(ens.n_paths() > 0, "moment bound: empty ensemble");
    MomentReport rep;
    rep.p = p;
    rep.constants = constants;
    const TimeGrid& g = ens.grid();
    std::vector<double> running(ens.n_paths(), 0.0);
    std::vector<double> vals;
    vals.reserve(ens.n_paths());
    const double x0p = std::pow(SummarySpec::norm(x0), p);
    for (std::size_t k = 0; k < g.n_nodes(); ++k) {
        vals.clear();
        for (std::size_t q = 0; q < ens.n_paths(); ++q) {
            if (ens.divergent(q)) continue;
            running[q] = std::max(running[q], std::pow(SummarySpec::norm(ens.state(q, k)), p));
            vals.push_back(running[q]);
        }
        const auto st = sample_stats(vals);
        const double t = g.time(k);
        const double bound = constants.c_bar * std::exp(constants.beta_bar * t) * (1.0 + x0p);
        rep.times.push_back(t);
        rep.empirical.push_back(st.mean);
        rep.std_error.push_back(st.std_error);
        rep.bound.push_back(bound);
        if (!(st.mean <= bound + 3.0 * st.std_error) && rep.pass) {
            rep.pass = false;
            rep.first_failure = k;
        }
    }
    return rep;
}

// Uses the generic constants for order p built from the declared L.
inline MomentReport check_moment_bound(const PathEnsemble& ens, double p, const ProblemSpec& spec)
{
    const double c = spec.bdg_constant && p >= 2.0 ? *spec.bdg_constant : default_bdg_constant(std::max(p, 2.0));
    return check_moment_bound(ens, p, growth_constants(p, spec.lipschitz_L, c), spec.x0);
}

} // namespace rbsde
