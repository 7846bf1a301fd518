#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rbsde/control_space.hpp"
#include "rbsde/errors.hpp"
#include "rbsde/forward_sim.hpp"
#include "rbsde/parallel.hpp"
#include "rbsde/problem.hpp"

namespace rbsde {

// Grid-indexed lookup of an intensity field: rows are time nodes, columns are
// cells of the first state coordinate, then (current action, candidate action)
// for a finite control set.
struct FeedbackTable {
    double dt = 1.0;
    std::vector<double> cell_edges; // increasing; cells are [e_i, e_{i+1}), clamped at the ends
    std::vector<double> actions;
    std::vector<double> values; // [node][cell][current][candidate]

    std::size_t n_nodes() const
    {
        const std::size_t per = n_cells() * actions.size() * actions.size();
        return per == 0 ? 0 : values.size() / per;
    }
    std::size_t n_cells() const { return cell_edges.size() < 2 ? 1 : cell_edges.size() - 1; }

    std::size_t cell_of(double x) const
    {
        if (cell_edges.size() < 2) return 0;
        auto it = std::upper_bound(cell_edges.begin(), cell_edges.end(), x);
        std::size_t i = it == cell_edges.begin() ? 0 : static_cast<std::size_t>(it - cell_edges.begin()) - 1;
        return std::min(i, n_cells() - 1);
    }

    std::size_t action_index(double a) const
    {
        for (std::size_t i = 0; i < actions.size(); ++i)
            if (actions[i] == a) return i;
        throw InvalidArgument("feedback table: action not in table");
    }

    double& at(std::size_t node, std::size_t cell, std::size_t cur, std::size_t cand)
    {
        const std::size_t na = actions.size();
        return values[((node * n_cells() + cell) * na + cur) * na + cand];
    }
    double at(std::size_t node, std::size_t cell, std::size_t cur, std::size_t cand) const
    {
        const std::size_t na = actions.size();
        return values[((node * n_cells() + cell) * na + cur) * na + cand];
    }

    double lookup(double t, double x, double cur, double cand) const
    {
        const std::size_t nn = n_nodes();
        auto node = static_cast<std::size_t>(std::floor(t / dt + 1e-9));
        node = std::min(node, nn - 1);
        return at(node, cell_of(x), action_index(cur), action_index(cand));
    }
};

// Bounded positive intensity field nu_t(a) of the randomized problem, bounded
// by n (membership in V_n). Rates are evaluated at predictable inputs only:
// the summary at the last grid node and the action before the jump.
class IntensityControl {
public:
    using RateFn = std::function<double(double t, const PathSummary& s, double current, double candidate)>;

    IntensityControl(double bound_n, RateFn rate, std::string label = "custom")
        : bound_n_(bound_n), rate_(std::move(rate)), label_(std::move(label)),
          clamps_(std::make_shared<std::atomic<std::size_t>>(0))
    {
        require(std::isfinite(bound_n) && bound_n > 0.0, "intensity: bound n must be > 0");
    }

    static IntensityControl constant(double value, double bound_n)
    {
        require(value > 0.0 && value <= bound_n, "intensity: constant must lie in (0, n]");
        return IntensityControl(
            bound_n, [value](double, const PathSummary&, double, double) { return value; },
            "constant(" + std::to_string(value) + ")");
    }

    // `high` on candidate actions in `targets`, `low` elsewhere.
    static IntensityControl two_level(double high, double low, std::vector<double> targets, double bound_n)
    {
        require(high > 0.0 && low > 0.0 && high <= bound_n && low <= bound_n, "intensity: levels must lie in (0, n]");
        return IntensityControl(
            bound_n,
            [=](double, const PathSummary&, double, double cand) {
                for (double a : targets)
                    if (a == cand) return high;
                return low;
            },
            "two_level");
    }

    static IntensityControl from_table(std::shared_ptr<const FeedbackTable> table, double bound_n)
    {
        return IntensityControl(
            bound_n, [table](double t, const PathSummary& s, double cur, double cand) {
                return table->lookup(t, s.x(0), cur, cand);
            },
            "feedback_table");
    }

    double bound() const noexcept { return bound_n_; }
    const std::string& label() const noexcept { return label_; }

    // Checked evaluation: rates outside (0, n] are a constraint violation.
    double operator()(double t, const PathSummary& s, double current, double candidate) const
    {
        const double v = rate_(t, s, current, candidate);
        if (!(v > 0.0 && v <= bound_n_ * (1.0 + 1e-12)))
            throw ConstraintViolation("intensity " + label_ + " evaluated to " + std::to_string(v) + " outside (0, "
                                      + std::to_string(bound_n_) + "]");
        return v;
    }

    // Number of evaluations that were clamped from below (see optimal_intensity).
    std::size_t clamp_count() const noexcept { return clamps_->load(); }
    std::shared_ptr<std::atomic<std::size_t>> clamp_counter() const { return clamps_; }
    void share_clamp_counter(std::shared_ptr<std::atomic<std::size_t>> c) { clamps_ = std::move(c); }

private:
    double bound_n_;
    RateFn rate_;
    std::string label_;
    std::shared_ptr<std::atomic<std::size_t>> clamps_;
};

// ---------------------------------------------------------------------------
// Doleans-Dade exponential
// ---------------------------------------------------------------------------

// kappa_T = exp(int_0^T int_A (1 - nu_s(a)) lambda(da) ds) * prod_{T_n <= T} nu_{T_n}(A_n),
// evaluated exactly for a field that is frozen between grid nodes and between
// jumps. summary(k) is the path summary at grid node k.
inline double log_doleans_exponential(const IntensityControl& nu, const JumpTrajectory& jumps,
                                      const std::function<PathSummary(std::size_t)>& summary,
                                      const JumpMeasure& measure, const TimeGrid& grid, double T)
{
    require(T > 0.0 && T <= grid.t_end() * (1.0 + 1e-12), "doleans: horizon must lie in (0, grid end]");
    for (double tj : jumps.jump_times) require(tj > 0.0, "doleans: jump times must be > 0");
    const auto& quad = measure.quadrature();
    double log_kappa = 0.0;

    auto compensator_rate = [&](double t_node, const PathSummary& s, double current) {
        double acc = 0.0;
        for (const auto& q : quad) acc += (1.0 - nu(t_node, s, current, q.action)) * q.mass;
        return acc;
    };

    std::size_t next_jump = 0;
    double current = jumps.a0;
    for (std::size_t k = 0; k < grid.n_steps(); ++k) {
        const double t0 = grid.time(k);
        if (t0 >= T) break;
        const double t1 = std::min(grid.time(k + 1), T);
        const PathSummary s = summary(k);
        double seg_start = t0;
        while (next_jump < jumps.jump_times.size() && jumps.jump_times[next_jump] <= t1) {
            const double tj = jumps.jump_times[next_jump];
            log_kappa += (tj - seg_start) * compensator_rate(t0, s, current);
            log_kappa += std::log(nu(t0, s, current, jumps.marks[next_jump]));
            current = jumps.marks[next_jump];
            seg_start = tj;
            ++next_jump;
        }
        log_kappa += (t1 - seg_start) * compensator_rate(t0, s, current);
    }
    return log_kappa;
}

inline double doleans_exponential(const IntensityControl& nu, const JumpTrajectory& jumps,
                                  const std::function<PathSummary(std::size_t)>& summary,
                                  const JumpMeasure& measure, const TimeGrid& grid, double T)
{
    return std::exp(log_doleans_exponential(nu, jumps, summary, measure, grid, T));
}

// ---------------------------------------------------------------------------
// Reward estimators
// ---------------------------------------------------------------------------

struct ValueEstimate {
    double value = 0.0;
    double std_error = 0.0;
    double truncation_bound = 0.0;
    double horizon = 0.0;
    std::size_t n_paths = 0;
    double effective_sample_size = 0.0;
    bool degenerate_weights = false;
    std::size_t excluded_divergent = 0;
};

// Weight of the left-point reward on [t_k, t_{k+1}): the discount is
// integrated exactly, e^{-beta t_k} (1 - e^{-beta dt}) / beta.
inline double discount_weight(double beta, double dt) { return -std::expm1(-beta * dt) / beta; }

inline std::size_t horizon_steps(const TimeGrid& grid, double T)
{
    require(T > 0.0 && T <= grid.t_end() * (1.0 + 1e-12), "reward: horizon must lie in (0, grid end]");
    return std::min(grid.n_steps(), static_cast<std::size_t>(std::llround(T / grid.dt())));
}

// Discounted left-point reward of one path on [0, T).
inline double path_reward(const PathEnsemble& ens, const ProblemSpec& spec, std::size_t p, std::size_t steps)
{
    const TimeGrid& g = ens.grid();
    const double w = discount_weight(spec.beta, g.dt());
    const double rho = std::exp(-spec.beta * g.dt());
    double disc = 1.0, acc = 0.0;
    for (std::size_t k = 0; k < steps; ++k) {
        acc += disc * w * spec.reward(g.time(k), ens.summary(p, k), ens.action(p, k));
        disc *= rho;
    }
    return acc;
}

inline ValueEstimate estimate_reward(const PathEnsemble& ens, const ProblemSpec& spec, double T,
                                     std::size_t threads = 1)
{
    const std::size_t steps = horizon_steps(ens.grid(), T);
    std::vector<double> per(ens.n_paths(), 0.0);
    parallel_for(ens.n_paths(), threads, [&](std::size_t p) {
        if (!ens.divergent(p)) per[p] = path_reward(ens, spec, p, steps);
    });
    std::vector<double> kept;
    kept.reserve(per.size());
    for (std::size_t p = 0; p < per.size(); ++p)
        if (!ens.divergent(p)) kept.push_back(per[p]);
    const auto st = sample_stats(kept);
    ValueEstimate v;
    v.value = st.mean;
    v.std_error = st.std_error;
    v.horizon = T;
    v.n_paths = kept.size();
    v.truncation_bound = truncation_bound(spec, T);
    v.effective_sample_size = static_cast<double>(kept.size());
    v.excluded_divergent = ens.n_divergent();
    return v;
}

// Importance-sampling estimate of the randomized reward J^R_T(nu) from an
// ensemble simulated under the nominal intensity lambda(da)dt.
inline ValueEstimate estimate_randomized_reward(const PathEnsemble& ens, const IntensityControl& nu,
                                                const ProblemSpec& spec, double T, std::size_t threads = 1)
{
    require(ens.randomized() && ens.has_jump_trajectories(),
            "randomized reward: ensemble must be randomized with its jump trajectories kept");
    const std::size_t steps = horizon_steps(ens.grid(), T);
    const double T_eff = ens.grid().time(steps);
    std::vector<double> weights(ens.n_paths(), 0.0), rewards(ens.n_paths(), 0.0);
    parallel_for(ens.n_paths(), threads, [&](std::size_t p) {
        if (ens.divergent(p)) return;
        auto summary = [&](std::size_t k) { return ens.summary(p, k); };
        weights[p] = doleans_exponential(nu, ens.jump(p), summary, *ens.measure, ens.grid(), T_eff);
        rewards[p] = path_reward(ens, spec, p, steps);
    });
    std::vector<double> weighted;
    CompensatedSum sw, sw2;
    for (std::size_t p = 0; p < ens.n_paths(); ++p) {
        if (ens.divergent(p)) continue;
        weighted.push_back(weights[p] * rewards[p]);
        sw.add(weights[p]);
        sw2.add(weights[p] * weights[p]);
    }
    const auto st = sample_stats(weighted);
    ValueEstimate v;
    v.value = st.mean;
    v.std_error = st.std_error;
    v.horizon = T;
    v.n_paths = weighted.size();
    v.truncation_bound = truncation_bound(spec, T);
    v.effective_sample_size = sw2.value() > 0.0 ? sw.value() * sw.value() / sw2.value() : 0.0;
    v.degenerate_weights = v.effective_sample_size < 50.0;
    v.excluded_divergent = ens.n_divergent();
    return v;
}

// ---------------------------------------------------------------------------
// Direct simulation under an intensity control
// ---------------------------------------------------------------------------

// Simulates (X, I) with the intensity field nu acting on the grid chain, so no
// likelihood weights are needed (see SwitchRule). With thinning, a candidate
// jump occurs at a node with probability dt n lambda(A), its mark is drawn from
// the mark distribution and accepted with probability nu/n. The action recorded
// for step k is the action after the switch decision at node k.
inline PathEnsemble simulate_under_intensity(const ProblemSpec& spec, const JumpMeasure& measure, double a0,
                                             const IntensityControl& nu, const TimeGrid& grid, std::size_t n_paths,
                                             std::uint64_t seed, const SimulationOptions& opt = {})
{
    spec.check_structure();
    const bool implicit = opt.switch_rule == SwitchRule::implicit;
    const double p_candidate = grid.dt() * nu.bound() * measure.total();
    if (!implicit && p_candidate > 1.0 + 1e-12)
        throw NumericalFailure("direct simulation: dt * n * lambda(A) = " + std::to_string(p_candidate)
                               + " exceeds 1; refine the grid or use the implicit switch rule");
    require(!implicit || measure.space().is_finite(), "direct simulation: implicit switching needs a finite A");
    PathEnsemble ens(grid, n_paths, spec, seed);
    ens.a0 = a0;
    ens.measure = measure;
    const auto& quad = measure.quadrature();
    parallel_for(n_paths, opt.threads, [&](std::size_t p) {
        auto rng = make_stream(seed, p, StreamTag::thinning);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::vector<double> rates(quad.size());
        double current = a0;
        detail::integrate_path(
            spec, ens, p,
            [&](std::size_t, double t, const PathSummary& s) {
                if (!implicit) {
                    const double u = unit(rng);
                    const double mark = measure.sample_mark(rng);
                    const double acc = unit(rng);
                    if (u < p_candidate && acc * nu.bound() < nu(t, s, current, mark)) current = mark;
                    return current;
                }
                for (int attempt = 0; attempt < 10000; ++attempt) {
                    double sum = 0.0;
                    for (std::size_t j = 0; j < quad.size(); ++j) {
                        rates[j] = quad[j].action == current ? 0.0
                                                              : grid.dt() * nu(t, s, current, quad[j].action) * quad[j].mass;
                        sum += rates[j];
                    }
                    if (unit(rng) * (1.0 + sum) >= sum) break;
                    double pick = unit(rng) * sum;
                    std::size_t j = 0;
                    while (j + 1 < quad.size() && pick >= rates[j]) pick -= rates[j++];
                    while (rates[j] == 0.0 && j > 0) --j;
                    current = quad[j].action;
                }
                return current;
            },
            nullptr, false);
    });
    detail::check_divergence(ens, opt);
    return ens;
}

} // namespace rbsde
