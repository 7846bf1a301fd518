#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rbsde/control_space.hpp"
#include "rbsde/errors.hpp"
#include "rbsde/forward_sim.hpp"
#include "rbsde/parallel.hpp"
#include "rbsde/problem.hpp"
#include "rbsde/randomization.hpp"
#include "rbsde/regression.hpp"
#include "rbsde/rng.hpp"

namespace rbsde {

struct BSDEOptions {
    // Penalty and discount evaluated on the node's own values (fixed point per
    // state) instead of the regressed continuation. Finite A only.
    bool implicit_scheme = false;
    std::size_t threads = 1;
    bool compute_z = true;
};

inline double legendre(int degree, double x)
{
    if (degree == 0) return 1.0;
    double p0 = 1.0, p1 = x;
    for (int j = 1; j < degree; ++j) {
        const double p2 = ((2.0 * j + 1.0) * x * p1 - j * p0) / (j + 1.0);
        p0 = p1;
        p1 = p2;
    }
    return p1;
}

// Least-squares fits at one time node.
struct NodeFit {
    FeatureBasis basis;
    Eigen::MatrixXd c_coeffs; // finite A: p x |A|; interval A: p (D+1) x 1
    Eigen::MatrixXd z_coeffs; // p x d
    double condition = 1.0;
    bool regularized = false;
    double residual_rms = 0.0;
    std::size_t n_samples = 0;
};

// Grid value y(t_k, s, a) of the penalized equation. With
//   G_k(s, a) = w f(t_k, s, a) + rho C_k(s, a),   C_k(s, a) = E[y_{k+1} | S_k = s, action a on step k],
// rho = e^{-beta dt}, w = (1 - rho)/beta, the explicit update is
//   y_k(s, a) = G_k(s, a) + n dt sum_{a'} lambda(a') (U_k(s, a'; a))^+,   U_k(s, a'; a) = G_k(s, a') - G_k(s, a),
// and y_N = 0. The action argument is the one in force before the node.
struct BSDESolution {
    BSDESolution(ProblemSpec spec_, TimeGrid grid_, JumpMeasure measure_, double n, double a0_, std::uint64_t seed_)
        : spec(std::move(spec_)), grid(grid_), measure(std::move(measure_)), n_penalty(n), a0(a0_), seed(seed_)
    {
        quad = measure.quadrature();
        finite = measure.space().is_finite();
        rho = std::exp(-spec.beta * grid.dt());
        w = discount_weight(spec.beta, grid.dt());
    }

    ProblemSpec spec;
    TimeGrid grid;
    JumpMeasure measure;
    double n_penalty;
    double a0;
    std::uint64_t seed;
    bool implicit_scheme = false;
    int action_degree = 2;
    bool finite = true;
    std::vector<QuadratureNode> quad;
    double rho = 1.0;
    double w = 0.0;
    std::vector<NodeFit> nodes; // nodes[k] holds C_k, k < N

    // Summary results on the simulation ensemble.
    double y0 = 0.0;
    double y0_stderr = 0.0;
    double pathwise_mean = 0.0; // mean of the pathwise functional whose spread gives y0_stderr
    double k_mean = 0.0;
    double k_stderr = 0.0;
    double constraint_violation = 0.0;
    double constraint_violation_stderr = 0.0;
    double noise_floor = 0.0;
    double max_condition = 1.0;
    std::size_t regularized_nodes = 0;
    std::size_t n_paths = 0;
    std::size_t excluded_divergent = 0;

    static constexpr std::size_t max_quadrature = 64;

    struct Local {
        std::size_t m = 0;
        std::array<double, max_quadrature> g;
        std::array<double, max_quadrature> base; // values whose differences give U
        double g_cur = 0.0;
        double base_cur = 0.0;
    };

    std::size_t n_steps() const noexcept { return grid.n_steps(); }

    std::size_t action_index(double a) const
    {
        for (std::size_t j = 0; j < quad.size(); ++j)
            if (quad[j].action == a) return j;
        throw InvalidArgument("bsde solution: action " + std::to_string(a) + " not in A");
    }

    double scaled_action(double a) const
    {
        const double lo = measure.space().lo(), hi = measure.space().hi();
        return 2.0 * (a - lo) / (hi - lo) - 1.0;
    }

    // Continuation values at node k for every quadrature action, and for `cur`.
    void continuation(std::size_t k, std::span<const double> feat, double cur, std::span<double> out,
                      double& c_cur) const
    {
        const NodeFit& nf = nodes[k];
        thread_local std::vector<std::size_t> idx;
        thread_local std::vector<double> val;
        idx.resize(nf.basis.max_nonzeros());
        val.resize(nf.basis.max_nonzeros());
        const std::size_t nnz = nf.basis.eval(feat, idx.data(), val.data());
        if (finite) {
            for (std::size_t j = 0; j < quad.size(); ++j) {
                double c = 0.0;
                for (std::size_t i = 0; i < nnz; ++i)
                    c += val[i] * nf.c_coeffs(static_cast<Eigen::Index>(idx[i]), static_cast<Eigen::Index>(j));
                out[j] = c;
            }
            c_cur = out[action_index(cur)];
            return;
        }
        const auto D = static_cast<std::size_t>(action_degree);
        auto eval_at = [&](double a) {
            std::array<double, 8> pl{};
            const double z = scaled_action(a);
            for (std::size_t l = 0; l <= D; ++l) pl[l] = legendre(static_cast<int>(l), z);
            double c = 0.0;
            for (std::size_t i = 0; i < nnz; ++i) {
                double inner = 0.0;
                for (std::size_t l = 0; l <= D; ++l)
                    inner += nf.c_coeffs(static_cast<Eigen::Index>(idx[i] * (D + 1) + l), 0) * pl[l];
                c += val[i] * inner;
            }
            return c;
        };
        for (std::size_t j = 0; j < quad.size(); ++j) out[j] = eval_at(quad[j].action);
        c_cur = eval_at(cur);
    }

    void local(std::size_t k, std::span<const double> feat, double cur, Local& L) const
    {
        L.m = quad.size();
        if (k >= nodes.size()) {
            std::fill(L.g.begin(), L.g.begin() + static_cast<std::ptrdiff_t>(L.m), 0.0);
            std::fill(L.base.begin(), L.base.begin() + static_cast<std::ptrdiff_t>(L.m), 0.0);
            L.g_cur = L.base_cur = 0.0;
            return;
        }
        const double t = grid.time(k);
        const PathSummary s{&spec.summary, feat};
        std::array<double, max_quadrature> c;
        double c_cur = 0.0;
        continuation(k, feat, cur, std::span<double>(c.data(), L.m), c_cur);
        for (std::size_t j = 0; j < L.m; ++j) L.g[j] = w * spec.reward(t, s, quad[j].action) + rho * c[j];
        std::size_t ci = 0;
        if (finite) {
            ci = action_index(cur);
            L.g_cur = L.g[ci];
        } else {
            L.g_cur = w * spec.reward(t, s, cur) + rho * c_cur;
        }
        if (!implicit_scheme) {
            std::copy(L.g.begin(), L.g.begin() + static_cast<std::ptrdiff_t>(L.m), L.base.begin());
            L.base_cur = L.g_cur;
            return;
        }
        // y_i (1 + c sum_{y_j > y_i} m_j) = G_i + c sum_{y_j > y_i} m_j y_j. The solution map is
        // increasing in G_i, so y is ordered like G and is solved from the largest G downwards.
        const double cpen = grid.dt() * n_penalty;
        std::array<std::size_t, max_quadrature> order;
        for (std::size_t i = 0; i < L.m; ++i) order[i] = i;
        std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(L.m),
                  [&](std::size_t l, std::size_t r) { return L.g[l] > L.g[r]; });
        std::array<double, max_quadrature> y;
        double num = 0.0, den = 0.0;
        for (std::size_t q = 0; q < L.m;) {
            std::size_t e = q;
            while (e < L.m && L.g[order[e]] == L.g[order[q]]) ++e;
            for (std::size_t r = q; r < e; ++r) y[order[r]] = (L.g[order[r]] + num) / (1.0 + den);
            for (std::size_t r = q; r < e; ++r) {
                num += cpen * quad[order[r]].mass * y[order[r]];
                den += cpen * quad[order[r]].mass;
            }
            q = e;
        }
        std::copy(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(L.m), L.base.begin());
        L.base_cur = L.base[ci];
    }

    // sum_{a'} lambda(a') (U(a'; cur))^+
    static double positive_part_mass(const Local& L, const std::vector<QuadratureNode>& q)
    {
        double acc = 0.0;
        for (std::size_t j = 0; j < L.m; ++j) acc += q[j].mass * std::max(0.0, L.base[j] - L.base_cur);
        return acc;
    }

    double value(std::size_t k, std::span<const double> feat, double cur) const
    {
        if (k >= nodes.size()) return 0.0;
        Local L;
        local(k, feat, cur, L);
        return L.g_cur + grid.dt() * n_penalty * positive_part_mass(L, quad);
    }

    double jump(std::size_t k, std::span<const double> feat, double cur, double cand) const
    {
        if (k >= nodes.size()) return 0.0;
        Local L;
        local(k, feat, cand, L);
        const double to = L.base_cur;
        local(k, feat, cur, L);
        return to - L.base_cur;
    }

    double k_increment(std::size_t k, std::span<const double> feat, double cur) const
    {
        if (k >= nodes.size()) return 0.0;
        Local L;
        local(k, feat, cur, L);
        return grid.dt() * n_penalty * positive_part_mass(L, quad);
    }

    std::vector<double> z(std::size_t k, std::span<const double> feat) const
    {
        std::vector<double> out(spec.dim_noise, 0.0);
        if (k >= nodes.size() || nodes[k].z_coeffs.size() == 0) return out;
        const NodeFit& nf = nodes[k];
        std::vector<std::size_t> idx(nf.basis.max_nonzeros());
        std::vector<double> val(nf.basis.max_nonzeros());
        const std::size_t nnz = nf.basis.eval(feat, idx.data(), val.data());
        for (std::size_t j = 0; j < out.size(); ++j)
            for (std::size_t i = 0; i < nnz; ++i)
                out[j] += val[i] * nf.z_coeffs(static_cast<Eigen::Index>(idx[i]), static_cast<Eigen::Index>(j));
        return out;
    }

    // argmax_a G_k(s, a) over the quadrature actions; ties go to the lowest index.
    double greedy_action(std::size_t k, std::span<const double> feat) const
    {
        Local L;
        local(std::min(k, nodes.size() - 1), feat, quad.front().action, L);
        std::size_t best = 0;
        for (std::size_t j = 1; j < L.m; ++j)
            if (L.g[j] > L.g[best]) best = j;
        return quad[best].action;
    }

    // Action in force just before node k on path p of an ensemble.
    static double action_before_node(const PathEnsemble& ens, std::size_t p, std::size_t k)
    {
        return k == 0 ? ens.a0 : ens.action(p, k - 1);
    }

    // Realized Y_{t_k} = y(t_k, S_k, I_{t_k-}) on an ensemble with the same grid.
    double realized_y(const PathEnsemble& ens, std::size_t p, std::size_t k) const
    {
        return value(k, ens.features(p, k), action_before_node(ens, p, k));
    }
};

namespace detail {

inline std::vector<std::size_t> alive_paths(const PathEnsemble& ens)
{
    std::vector<std::size_t> alive;
    alive.reserve(ens.n_paths());
    for (std::size_t p = 0; p < ens.n_paths(); ++p)
        if (!ens.divergent(p)) alive.push_back(p);
    return alive;
}

// Features at node k+1 if step k were taken with action a and the path's own
// Brownian increment.
struct Counterfactual {
    std::vector<double> scratch, x_next, feat_next;

    explicit Counterfactual(const ProblemSpec& spec)
        : scratch(spec.dim_state + spec.dim_state * spec.dim_noise), x_next(spec.dim_state),
          feat_next(spec.summary.size())
    {}

    std::span<const double> step(const ProblemSpec& spec, const PathEnsemble& ens, std::size_t p, std::size_t k,
                                 double a)
    {
        const TimeGrid& g = ens.grid();
        euler_step(spec, g.time(k), ens.summary(p, k), a, g.dt(), ens.increment(p, k), x_next, scratch);
        if (spec.summary.markovian()) return x_next;
        auto history = [&](std::size_t j) { return ens.state(p, j); };
        spec.summary.advance(ens.features(p, k), x_next, k + 1, g.dt(), history, feat_next);
        return feat_next;
    }
};

} // namespace detail

// Backward least-squares recursion for the penalized equation on a randomized
// ensemble. Conditional expectations are regressed on the node features of
// all paths, with the one-step transition under every action of A
// (counterfactual Euler steps sharing the path's Brownian increment).
inline BSDESolution solve_penalized_bsde(const ProblemSpec& spec, const PathEnsemble& ens, double n_penalty,
                                         const RegressionBasis& basis, const BSDEOptions& opt = {})
{
    require(std::isfinite(n_penalty) && n_penalty > 0.0, "bsde: n_penalty must be > 0");
    require(ens.randomized(), "bsde: ensemble must be simulated in randomized mode");
    spec.check_structure();
    require(ens.feature_dim() == spec.summary.size(), "bsde: ensemble and problem summaries differ");
    const JumpMeasure& measure = *ens.measure;
    require(measure.quadrature().size() <= BSDESolution::max_quadrature, "bsde: at most 64 actions are supported");
    const TimeGrid& g = ens.grid();
    const double stab = g.dt() * n_penalty * measure.total();
    if (opt.implicit_scheme) {
        require(measure.space().is_finite(), "bsde: the implicit scheme needs a finite control set");
    } else if (stab > 1.0 + 1e-12) {
        throw InvalidArgument("bsde: explicit scheme needs dt * n * lambda(A) <= 1 (got " + std::to_string(stab)
                              + "); refine the grid or use the implicit scheme");
    }

    BSDESolution sol(spec, g, measure, n_penalty, ens.a0, ens.seed());
    sol.implicit_scheme = opt.implicit_scheme;
    sol.action_degree = std::clamp(basis.action_degree, 0, 6);
    const std::size_t N = g.n_steps();
    sol.nodes.resize(N);

    const auto alive = detail::alive_paths(ens);
    require(!alive.empty(), "bsde: every path diverged");
    const std::size_t m = alive.size();
    const std::size_t d = spec.dim_noise;
    const bool finite = sol.finite;
    const std::size_t n_act = finite ? sol.quad.size() : 1;
    const auto D = static_cast<std::size_t>(sol.action_degree);
    const std::size_t fdim = ens.feature_dim();
    const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, m));
    double worst_noise = 0.0;

    for (std::size_t kk = N; kk-- > 0;) {
        const std::size_t k = kk;
        NodeFit fit;
        fit.basis = FeatureBasis::fit(basis, m, fdim, [&](std::size_t i) { return ens.features(alive[i], k); });
        const std::size_t nb = fit.basis.size();
        const std::size_t p_main = finite ? nb : nb * (D + 1);

        std::vector<LeastSquares> ls_main(threads, LeastSquares(p_main, n_act));
        std::vector<LeastSquares> ls_z(threads, LeastSquares(nb, opt.compute_z ? d : 0));
        const std::size_t chunk = (m + threads - 1) / threads;
        parallel_for(threads, threads, [&](std::size_t w) {
            detail::Counterfactual cf(spec);
            std::vector<std::size_t> idx(fit.basis.max_nonzeros()), tidx(fit.basis.max_nonzeros() * (D + 1));
            std::vector<double> val(fit.basis.max_nonzeros()), tval(fit.basis.max_nonzeros() * (D + 1));
            std::vector<double> targets(n_act), ztargets(d);
            const std::size_t lo = w * chunk, hi = std::min(m, lo + chunk);
            for (std::size_t i = lo; i < hi; ++i) {
                const std::size_t p = alive[i];
                const std::size_t nnz = fit.basis.eval(ens.features(p, k), idx.data(), val.data());
                if (finite) {
                    for (std::size_t j = 0; j < n_act; ++j) {
                        const double a = sol.quad[j].action;
                        targets[j] = sol.value(k + 1, cf.step(spec, ens, p, k, a), a);
                    }
                    ls_main[w].add(idx.data(), val.data(), nnz, targets);
                } else {
                    const double lo_a = measure.space().lo(), hi_a = measure.space().hi();
                    const double e = lo_a + (hi_a - lo_a) * uniform_at(ens.seed(), p, StreamTag::explore, k);
                    targets[0] = sol.value(k + 1, cf.step(spec, ens, p, k, e), e);
                    const double z = sol.scaled_action(e);
                    std::size_t c = 0;
                    for (std::size_t q = 0; q < nnz; ++q)
                        for (std::size_t l = 0; l <= D; ++l) {
                            tidx[c] = idx[q] * (D + 1) + l;
                            tval[c] = val[q] * legendre(static_cast<int>(l), z);
                            ++c;
                        }
                    ls_main[w].add(tidx.data(), tval.data(), c, targets);
                }
                if (opt.compute_z) {
                    const double y_next = sol.value(k + 1, ens.features(p, k + 1), ens.action(p, k));
                    auto dw = ens.increment(p, k);
                    for (std::size_t j = 0; j < d; ++j) ztargets[j] = y_next * dw[j] / g.dt();
                    ls_z[w].add(idx.data(), val.data(), nnz, ztargets);
                }
            }
        });
        for (std::size_t w = 1; w < threads; ++w) {
            ls_main[0].merge(ls_main[w]);
            ls_z[0].merge(ls_z[w]);
        }
        const auto res = ls_main[0].solve(basis.max_condition);
        fit.c_coeffs = res.coeffs;
        fit.condition = res.condition;
        fit.regularized = res.regularized;
        fit.n_samples = m;
        for (double r : res.residual_rms) fit.residual_rms = std::max(fit.residual_rms, r);
        if (opt.compute_z && d > 0) fit.z_coeffs = ls_z[0].solve(basis.max_condition).coeffs;
        worst_noise = std::max(worst_noise, fit.residual_rms * std::sqrt(static_cast<double>(p_main)
                                                                          / static_cast<double>(m)));
        sol.max_condition = std::max(sol.max_condition, fit.condition);
        if (fit.regularized) ++sol.regularized_nodes;
        sol.nodes[k] = std::move(fit);
    }
    sol.noise_floor = 10.0 * worst_noise;

    // Pathwise quantities on the simulation ensemble: K_T, the squared
    // constraint violation, and the functional
    //   P = sum_k rho^k [w f(S_k, I_k) + dt sum lambda(a') (n U^+ - U)(a'; I_{k-1})]
    // whose mean reproduces y_0 when I switches at the nominal rates.
    std::vector<double> P(m), KT(m), V(m);
    parallel_for(m, opt.threads, [&](std::size_t i) {
        const std::size_t p = alive[i];
        BSDESolution::Local L;
        double disc = 1.0, acc = 0.0, kacc = 0.0, vacc = 0.0;
        for (std::size_t k = 0; k < N; ++k) {
            const double pre = BSDESolution::action_before_node(ens, p, k);
            const double post = ens.action(p, k);
            sol.local(k, ens.features(p, k), pre, L);
            double pos = 0.0, lin = 0.0, sq = 0.0;
            for (std::size_t j = 0; j < L.m; ++j) {
                const double u = L.base[j] - L.base_cur;
                pos += sol.quad[j].mass * std::max(0.0, u);
                lin += sol.quad[j].mass * u;
                sq += sol.quad[j].mass * std::max(0.0, u) * std::max(0.0, u);
            }
            const double t = g.time(k);
            const double f_post = spec.reward(t, ens.summary(p, k), post);
            acc += disc * (sol.w * f_post + g.dt() * (n_penalty * pos - lin));
            kacc += g.dt() * n_penalty * pos;
            vacc += g.dt() * sq;
            disc *= sol.rho;
        }
        P[i] = acc;
        KT[i] = kacc;
        V[i] = vacc;
    });
    const auto sp = sample_stats(P);
    const auto sk = sample_stats(KT);
    const auto sv = sample_stats(V);
    sol.y0 = sol.value(0, ens.features(alive.front(), 0), ens.a0);
    sol.y0_stderr = sp.std_error;
    sol.pathwise_mean = sp.mean;
    sol.k_mean = sk.mean;
    sol.k_stderr = sk.std_error;
    sol.constraint_violation = sv.mean;
    sol.constraint_violation_stderr = sv.std_error;
    sol.n_paths = m;
    sol.excluded_divergent = ens.n_divergent();
    return sol;
}

// Empirical E int_0^T int_A ((U_t(a))^+)^2 lambda(da) dt along the ensemble,
// with lambda given by `measure` (defaults to the solution's).
inline double constraint_violation(const BSDESolution& sol, const PathEnsemble& ens,
                                   const std::optional<JumpMeasure>& measure = std::nullopt)
{
    const auto& q = measure ? measure->quadrature() : sol.quad;
    require(q.size() == sol.quad.size(), "constraint violation: measure must share the quadrature actions");
    CompensatedSum total;
    std::size_t count = 0;
    BSDESolution::Local L;
    for (std::size_t p = 0; p < ens.n_paths(); ++p) {
        if (ens.divergent(p)) continue;
        double acc = 0.0;
        for (std::size_t k = 0; k < sol.n_steps(); ++k) {
            sol.local(k, ens.features(p, k), BSDESolution::action_before_node(ens, p, k), L);
            for (std::size_t j = 0; j < L.m; ++j) {
                const double u = std::max(0.0, L.base[j] - L.base_cur);
                acc += sol.grid.dt() * q[j].mass * u * u;
            }
        }
        total.add(acc);
        ++count;
    }
    return count ? total.value() / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Bounds on realized values
// ---------------------------------------------------------------------------

struct BoundCheck {
    std::size_t checked = 0;
    std::size_t violations = 0;
    double worst_excess = -std::numeric_limits<double>::infinity(); // max |Y| - bound
    double noise_floor = 0.0;
    bool pass = true;
};

// |Y_{t_k}| <= ||f||/beta under (A), <= 2M(1+C_bar)/(beta-beta_bar)(1 + sup_{s<=t_k}|X_s|^r)
// under (A'), both up to the regression noise floor.
inline BoundCheck check_value_bound(const BSDESolution& sol, const PathEnsemble& ens)
{
    BoundCheck bc;
    bc.noise_floor = sol.noise_floor;
    for (std::size_t p = 0; p < ens.n_paths(); ++p) {
        if (ens.divergent(p)) continue;
        double sup_x = 0.0;
        for (std::size_t k = 0; k < ens.grid().n_nodes(); ++k) {
            sup_x = std::max(sup_x, SummarySpec::norm(ens.state(p, k)));
            const double y = sol.realized_y(ens, p, k);
            const double bound = value_bound(sol.spec, sup_x);
            const double excess = std::abs(y) - bound;
            bc.worst_excess = std::max(bc.worst_excess, excess);
            ++bc.checked;
            if (excess > sol.noise_floor) ++bc.violations;
        }
    }
    bc.pass = bc.violations == 0;
    return bc;
}

// ---------------------------------------------------------------------------
// epsilon-optimal intensity
// ---------------------------------------------------------------------------

inline constexpr double intensity_floor = 1e-6;

// n where U >= 0; eps/(T lambda(A)) where -1 <= U < 0; eps/(T lambda(A) |U|)
// where U < -1. Results are capped at n and floored at 1e-6 (`clamped` set).
inline double epsilon_optimal_rate(double U, double n, double eps, double T, double lambda_total, bool& clamped)
{
    clamped = false;
    double v;
    if (U >= 0.0)
        v = n;
    else if (U >= -1.0)
        v = eps / (T * lambda_total);
    else
        v = eps / (T * lambda_total * std::abs(U));
    v = std::min(v, n);
    if (v < intensity_floor) {
        clamped = true;
        v = intensity_floor;
    }
    return v;
}

// Feedback intensity evaluated directly from the solution's regressions.
inline IntensityControl optimal_intensity(const BSDESolution& solution, double epsilon)
{
    require(epsilon > 0.0 && epsilon < 1.0, "optimal intensity: epsilon must lie in (0, 1)");
    auto sol = std::make_shared<const BSDESolution>(solution);
    auto counter = std::make_shared<std::atomic<std::size_t>>(0);
    const double n = sol->n_penalty, T = sol->grid.t_end(), lam = sol->measure.total();
    IntensityControl nu(
        n,
        [sol, counter, n, T, lam, epsilon](double t, const PathSummary& s, double cur, double cand) {
            auto k = static_cast<std::size_t>(std::llround(t / sol->grid.dt()));
            k = std::min(k, sol->n_steps() - 1);
            const double U = sol->jump(k, s.features, cur, cand);
            bool clamped = false;
            const double v = epsilon_optimal_rate(U, n, epsilon, T, lam, clamped);
            if (clamped) counter->fetch_add(1);
            return v;
        },
        "optimal(eps=" + std::to_string(epsilon) + ")");
    nu.share_clamp_counter(counter);
    return nu;
}

// The same field tabulated over (node, cell of the first state coordinate,
// current action, candidate action) for export. Finite A, Markovian features.
inline FeedbackTable to_feedback_table(const BSDESolution& sol, double epsilon, std::vector<double> cell_edges)
{
    require(sol.finite, "feedback table: finite control set required");
    require(sol.spec.markovian(), "feedback table: Markovian problems only");
    require(cell_edges.size() >= 2 && std::is_sorted(cell_edges.begin(), cell_edges.end()),
            "feedback table: need increasing cell edges");
    FeedbackTable tab;
    tab.dt = sol.grid.dt();
    tab.cell_edges = std::move(cell_edges);
    for (const auto& q : sol.quad) tab.actions.push_back(q.action);
    const std::size_t na = tab.actions.size(), nc = tab.n_cells(), N = sol.n_steps();
    tab.values.assign(N * nc * na * na, 0.0);
    std::vector<double> x(sol.spec.dim_state, 0.0);
    for (std::size_t k = 0; k < N; ++k)
        for (std::size_t c = 0; c < nc; ++c) {
            x[0] = 0.5 * (tab.cell_edges[c] + tab.cell_edges[c + 1]);
            for (std::size_t i = 0; i < na; ++i)
                for (std::size_t j = 0; j < na; ++j) {
                    bool clamped = false;
                    const double U = sol.jump(k, x, tab.actions[i], tab.actions[j]);
                    tab.at(k, c, i, j) = epsilon_optimal_rate(U, sol.n_penalty, epsilon, sol.grid.t_end(),
                                                              sol.measure.total(), clamped);
                }
        }
    return tab;
}

inline std::string feedback_table_csv(const FeedbackTable& tab)
{
    std::ostringstream os;
    os.precision(17);
    os << "node,t,cell_lo,cell_hi,current,candidate,nu\n";
    for (std::size_t k = 0; k < tab.n_nodes(); ++k)
        for (std::size_t c = 0; c < tab.n_cells(); ++c)
            for (std::size_t i = 0; i < tab.actions.size(); ++i)
                for (std::size_t j = 0; j < tab.actions.size(); ++j)
                    os << k << ',' << static_cast<double>(k) * tab.dt << ',' << tab.cell_edges[c] << ','
                       << tab.cell_edges[c + 1] << ',' << tab.actions[i] << ',' << tab.actions[j] << ','
                       << tab.at(k, c, i, j) << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Dual representation and dynamic programming checks
// ---------------------------------------------------------------------------

struct CheckOptions {
    std::size_t n_paths = 20000;
    std::optional<std::uint64_t> seed; // fresh paths; derived from the solution seed by default
    std::size_t threads = 1;
    double z = 3.0;
};

inline std::uint64_t fresh_seed(const BSDESolution& sol, const CheckOptions& opt)
{
    return opt.seed.value_or(stream_key(sol.seed, 0, StreamTag::probe));
}

// J^R_T(nu) on fresh paths simulated directly under nu.
inline ValueEstimate evaluate_intensity(const BSDESolution& sol, const IntensityControl& nu,
                                        const CheckOptions& opt = {})
{
    SimulationOptions so;
    so.threads = opt.threads;
    so.switch_rule = sol.implicit_scheme ? SwitchRule::implicit : SwitchRule::thinning;
    const auto ens =
        simulate_under_intensity(sol.spec, sol.measure, sol.a0, nu, sol.grid, opt.n_paths, fresh_seed(sol, opt), so);
    return estimate_reward(ens, sol.spec, sol.grid.t_end(), opt.threads);
}

struct IntensityCheck {
    std::string label;
    double value = 0.0;
    double std_error = 0.0;
    double margin = 0.0; // signed slack of the tested inequality; >= 0 passes
    bool ok = true;
};

struct DualReport {
    double y0 = 0.0;
    double y0_stderr = 0.0;
    double epsilon = 0.0;
    std::vector<IntensityCheck> samples; // J(nu) <= Y0 + z se
    IntensityCheck optimal;              // J(nu*) >= Y0 - eps - z se
    double gap = 0.0;                    // Y0 - J(nu*)
    bool lower_ok = true;
    bool upper_ok = true;
    bool pass = true;
    std::vector<std::string> offenders;
};

inline DualReport dual_value_check(const BSDESolution& sol, const std::vector<IntensityControl>& nu_samples,
                                   double epsilon = 0.05, const CheckOptions& opt = {})
{
    DualReport rep;
    rep.y0 = sol.y0;
    rep.y0_stderr = sol.y0_stderr;
    rep.epsilon = epsilon;
    for (const auto& nu : nu_samples) {
        require(nu.bound() <= sol.n_penalty * (1.0 + 1e-12), "dual check: sampled intensities must lie in V_n");
        const auto est = evaluate_intensity(sol, nu, opt);
        IntensityCheck c;
        c.label = nu.label();
        c.value = est.value;
        c.std_error = est.std_error;
        const double se = std::hypot(est.std_error, sol.y0_stderr);
        c.margin = sol.y0 + opt.z * se - est.value;
        c.ok = c.margin >= 0.0;
        if (!c.ok) {
            rep.lower_ok = false;
            rep.offenders.push_back(c.label + ": J = " + std::to_string(c.value) + " exceeds Y0 by "
                                    + std::to_string(c.value - sol.y0));
        }
        rep.samples.push_back(c);
    }
    const auto star = optimal_intensity(sol, epsilon);
    const auto est = evaluate_intensity(sol, star, opt);
    rep.optimal.label = star.label();
    rep.optimal.value = est.value;
    rep.optimal.std_error = est.std_error;
    const double se = std::hypot(est.std_error, sol.y0_stderr);
    rep.optimal.margin = est.value - (sol.y0 - epsilon - opt.z * se);
    rep.optimal.ok = rep.optimal.margin >= 0.0;
    rep.upper_ok = rep.optimal.ok;
    if (!rep.upper_ok)
        rep.offenders.push_back(star.label() + ": J = " + std::to_string(est.value) + " below Y0 - eps by "
                                + std::to_string(sol.y0 - epsilon - est.value));
    rep.gap = sol.y0 - est.value;
    rep.pass = rep.lower_ok && rep.upper_ok;
    return rep;
}

// Stopping rule realizable on the grid: a deterministic time, or the first
// node where the state leaves a box, optionally capped at a time.
struct StoppingRule {
    std::optional<double> time;
    std::vector<std::pair<double, double>> box;
    std::optional<double> cap;

    static StoppingRule at(double t) { return {t, {}, std::nullopt}; }
    static StoppingRule exit_box(std::vector<std::pair<double, double>> b, std::optional<double> c)
    {
        return {std::nullopt, std::move(b), c};
    }
};

struct DPPEntry {
    std::string label;
    double residual = 0.0;
    double std_error = 0.0;
    double mean_stop_time = 0.0;
};

struct DPPReport {
    std::vector<DPPEntry> samples;
    std::optional<DPPEntry> optimal;
    double max_residual = -std::numeric_limits<double>::infinity();
    bool samples_ok = true; // residual <= z se for every sampled nu
    bool optimal_ok = true; // |residual(nu*)| <= z_opt se
    bool pass = true;
};

namespace detail {

inline bool inside_box(std::span<const double> x, const std::vector<std::pair<double, double>>& box)
{
    for (std::size_t i = 0; i < box.size() && i < x.size(); ++i)
        if (x[i] < box[i].first || x[i] > box[i].second) return false;
    return true;
}

} // namespace detail

// E^nu[ sum_{k<tau} rho^k w f(S_k, I_k) + rho^tau y_tau(S_tau, I_{tau-}) ] - Y_0 for one intensity,
// on fresh paths simulated directly under nu.
inline DPPEntry dpp_entry(const BSDESolution& sol, const StoppingRule& rule, const IntensityControl& nu,
                          const CheckOptions& opt)
{
    const TimeGrid& g = sol.grid;
    std::size_t cap_node = g.n_steps();
    if (rule.time) cap_node = g.node_of(*rule.time);
    if (rule.cap) cap_node = std::min(cap_node, g.node_of(*rule.cap));
    SimulationOptions so;
    so.threads = opt.threads;
    so.switch_rule = sol.implicit_scheme ? SwitchRule::implicit : SwitchRule::thinning;
    const auto ens = simulate_under_intensity(sol.spec, sol.measure, sol.a0, nu, g, opt.n_paths, fresh_seed(sol, opt), so);
    std::vector<double> vals(ens.n_paths(), 0.0), stops(ens.n_paths(), 0.0);
    std::vector<std::uint8_t> unexited(ens.n_paths(), 0);
    parallel_for(ens.n_paths(), opt.threads, [&](std::size_t p) {
        if (ens.divergent(p)) return;
        double disc = 1.0, acc = 0.0;
        std::size_t tau = cap_node;
        for (std::size_t k = 0; k < cap_node; ++k) {
            if (!rule.box.empty() && !detail::inside_box(ens.state(p, k), rule.box)) {
                tau = k;
                break;
            }
            acc += disc * sol.w * sol.spec.reward(g.time(k), ens.summary(p, k), ens.action(p, k));
            disc *= sol.rho;
        }
        if (tau == cap_node && !rule.box.empty() && !rule.cap && !rule.time
            && detail::inside_box(ens.state(p, tau), rule.box))
            unexited[p] = 1;
        acc += disc * sol.value(tau, ens.features(p, tau), BSDESolution::action_before_node(ens, p, tau));
        vals[p] = acc;
        stops[p] = g.time(tau);
    });
    std::vector<double> kept, kept_stop;
    std::size_t n_unexited = 0;
    for (std::size_t p = 0; p < ens.n_paths(); ++p) {
        if (ens.divergent(p)) continue;
        kept.push_back(vals[p]);
        kept_stop.push_back(stops[p]);
        n_unexited += unexited[p];
    }
    if (static_cast<double>(n_unexited) > 0.01 * static_cast<double>(kept.size()))
        throw InvalidArgument("dpp: stopping rule not attained before T on more than 1% of paths; add a cap");
    const auto st = sample_stats(kept);
    DPPEntry e;
    e.label = nu.label();
    e.residual = st.mean - sol.y0;
    e.std_error = std::hypot(st.std_error, sol.y0_stderr);
    e.mean_stop_time = sample_stats(kept_stop).mean;
    return e;
}

// Residual of the dynamic programming principle at t = 0 for each sampled
// intensity and, if epsilon > 0, for the epsilon-optimal one.
inline DPPReport dpp_residual(const BSDESolution& sol, const StoppingRule& rule,
                              const std::vector<IntensityControl>& nu_samples, double epsilon = 0.05,
                              const CheckOptions& opt = {}, double z_optimal = 5.0)
{
    DPPReport rep;
    for (const auto& nu : nu_samples) {
        auto e = dpp_entry(sol, rule, nu, opt);
        rep.max_residual = std::max(rep.max_residual, e.residual);
        if (e.residual > opt.z * e.std_error) rep.samples_ok = false;
        rep.samples.push_back(std::move(e));
    }
    if (epsilon > 0.0) {
        auto e = dpp_entry(sol, rule, optimal_intensity(sol, epsilon), opt);
        rep.max_residual = std::max(rep.max_residual, e.residual);
        rep.optimal_ok = std::abs(e.residual) <= z_optimal * e.std_error;
        rep.optimal = std::move(e);
    }
    rep.pass = rep.samples_ok && rep.optimal_ok;
    return rep;
}

// Random bounded intensities in V_n: piecewise constant in time (random
// block length), with levels drawn per (time block, unit cell of x_0,
// current action, candidate action) in [lo, hi] subset of (0, n].
inline std::vector<IntensityControl> random_intensities(double n, std::size_t count, std::uint64_t seed)
{
    std::vector<IntensityControl> out;
    for (std::size_t i = 0; i < count; ++i) {
        const double lo = 0.05 * n * uniform_at(seed, i, StreamTag::probe, 0) + 1e-3 * n;
        const double hi = n * (0.2 + 0.8 * uniform_at(seed, i, StreamTag::probe, 1));
        const double block = 0.5 + 2.0 * uniform_at(seed, i, StreamTag::probe, 2);
        const std::uint64_t key = stream_key(seed, i, StreamTag::probe);
        out.emplace_back(
            n,
            [lo, hi, block, key](double t, const PathSummary& s, double cur, double cand) {
                const auto b = static_cast<std::uint64_t>(std::floor(t / block));
                const auto cell = static_cast<std::uint64_t>(std::llround(std::floor(s.x(0))) + (1 << 20));
                const auto ia = static_cast<std::uint64_t>(std::llround(cur * 64.0) + 4096);
                const auto ja = static_cast<std::uint64_t>(std::llround(cand * 64.0) + 4096);
                const double u = uniform_at(key, b, StreamTag::probe, (cell * 1000003ULL + ia) * 8191ULL + ja);
                return lo + (hi - lo) * u;
            },
            "random#" + std::to_string(i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// The (T, n) double limit
// ---------------------------------------------------------------------------

struct ScheduleEntry {
    double T = 5.0;
    double n = 2.0;
    std::size_t n_paths = 10000;
};

inline std::vector<ScheduleEntry> default_schedule()
{
    std::vector<ScheduleEntry> s;
    const std::array<std::pair<double, std::size_t>, 3> horizons{{{5.0, 10000}, {10.0, 10000}, {20.0, 100000}}};
    for (const auto& [T, paths] : horizons)
        for (double n : {2.0, 5.0, 10.0, 20.0}) s.push_back({T, n, paths});
    return s;
}

struct LimitOptions {
    double lambda_total = 1.0;
    std::vector<double> mark_weights;
    std::optional<double> a0;  // defaults to the first action of A
    std::optional<double> max_dt; // the grid step is min(max_dt, 1/(n_max lambda(A)))
    std::uint64_t seed = 1;
    BSDEOptions bsde;
    double z = 3.0;
};

struct StageResult {
    double T = 0.0;
    double n = 0.0;
    std::size_t n_paths = 0;
    double dt = 0.0;
    double y0 = 0.0;
    double std_error = 0.0;
    double t_tail = 0.0;
    double n_gap = 0.0;
    double constraint_violation = 0.0;
    double constraint_violation_stderr = 0.0;
    double k_mean = 0.0;
    double k_stderr = 0.0;
    double noise_floor = 0.0;
    double max_condition = 1.0;
    std::size_t regularized_nodes = 0;
    std::size_t excluded_divergent = 0;
};

struct ValueCertificate {
    double y0 = 0.0;
    double mc_error = 0.0;
    double t_tail = 0.0;
    double n_gap = 0.0;
    double total = 0.0;
    bool converged = false;
    bool monotone_ok = true;
    bool tail_ok = true;
    double T = 0.0;
    double n = 0.0;
    std::vector<StageResult> stages;
    std::vector<std::string> diagnostics;
    std::shared_ptr<const BSDESolution> solution; // final stage
};

inline TimeGrid limit_grid(double T, double n_max, double lambda_total, const LimitOptions& opt)
{
    double dt = opt.bsde.implicit_scheme ? std::numeric_limits<double>::infinity() : 1.0 / (n_max * lambda_total);
    if (opt.max_dt) dt = std::min(dt, *opt.max_dt);
    require(std::isfinite(dt), "limit: max_dt is required with the implicit scheme");
    return TimeGrid::with_max_step(T, dt);
}

// Solves along the schedule (grouped by T, every n on a common ensemble),
// checks monotonicity in n and tail contraction in T, and certifies the last
// stage with total = mc_error + t_tail + n_gap.
inline ValueCertificate solve_constrained_limit(const ProblemSpec& spec, const std::vector<ScheduleEntry>& schedule,
                                                const RegressionBasis& basis, double target_tol,
                                                const LimitOptions& opt = {})
{
    require(!schedule.empty(), "limit: empty schedule");
    for (std::size_t i = 1; i < schedule.size(); ++i)
        require(schedule[i].T > schedule[i - 1].T
                    || (schedule[i].T == schedule[i - 1].T && schedule[i].n > schedule[i - 1].n),
                "limit: schedule must increase in T, then in n");
    spec.check_structure();
    const JumpMeasure measure(spec.control_space, opt.lambda_total, opt.mark_weights);
    const double a0 = opt.a0.value_or(spec.control_space.is_finite() ? spec.control_space.actions().front()
                                                                     : spec.control_space.lo());
    double n_max = 0.0;
    for (const auto& e : schedule) n_max = std::max(n_max, e.n);

    ValueCertificate cert;
    std::vector<std::pair<double, StageResult>> last_per_T;
    std::size_t i = 0;
    while (i < schedule.size()) {
        const double T = schedule[i].T;
        std::size_t j = i, paths = 0;
        while (j < schedule.size() && schedule[j].T == T) paths = std::max(paths, schedule[j++].n_paths);
        const TimeGrid grid = limit_grid(T, n_max, measure.total(), opt);
        SimulationOptions so;
        so.threads = opt.bsde.threads;
        so.keep_jumps = false;
        std::optional<StageResult> prev;
        std::shared_ptr<const BSDESolution> last;
        {
            const auto ens = simulate_randomized_pair(spec, measure, a0, grid, paths, opt.seed, so);
            for (std::size_t s = i; s < j; ++s) {
                BSDEOptions bo = opt.bsde;
                bo.compute_z = bo.compute_z && s + 1 == schedule.size(); // diagnostics for the final stage only
                auto sol = std::make_shared<BSDESolution>(solve_penalized_bsde(spec, ens, schedule[s].n, basis, bo));
                StageResult r;
                r.T = T;
                r.n = schedule[s].n;
                r.n_paths = sol->n_paths;
                r.dt = grid.dt();
                r.y0 = sol->y0;
                r.std_error = sol->y0_stderr;
                r.t_tail = tail_bound(spec, T);
                r.n_gap = prev ? std::abs(r.y0 - prev->y0) : std::numeric_limits<double>::quiet_NaN();
                r.constraint_violation = sol->constraint_violation;
                r.constraint_violation_stderr = sol->constraint_violation_stderr;
                r.k_mean = sol->k_mean;
                r.k_stderr = sol->k_stderr;
                r.noise_floor = sol->noise_floor;
                r.max_condition = sol->max_condition;
                r.regularized_nodes = sol->regularized_nodes;
                r.excluded_divergent = sol->excluded_divergent;
                if (prev && r.y0 < prev->y0 - opt.z * std::hypot(r.std_error, prev->std_error)) {
                    cert.monotone_ok = false;
                    cert.diagnostics.push_back("monotonicity in n violated at T=" + std::to_string(T) + ": Y0(n="
                                               + std::to_string(prev->n) + ")=" + std::to_string(prev->y0)
                                               + " > Y0(n=" + std::to_string(r.n) + ")=" + std::to_string(r.y0)
                                               + " (regression bias suspected)");
                }
                if (sol->regularized_nodes > 0)
                    cert.diagnostics.push_back("ridge regularization applied at " + std::to_string(sol->regularized_nodes)
                                               + " nodes (T=" + std::to_string(T) + ", n=" + std::to_string(r.n) + ")");
                cert.stages.push_back(r);
                prev = r;
                last = sol;
            }
        }
        if (!last_per_T.empty()) {
            const auto& [Tp, rp] = last_per_T.back();
            const double tol = tail_bound(spec, Tp) + opt.z * std::hypot(rp.std_error, prev->std_error);
            if (std::abs(prev->y0 - rp.y0) > tol) {
                cert.tail_ok = false;
                cert.diagnostics.push_back("tail contraction violated between T=" + std::to_string(Tp) + " and T="
                                           + std::to_string(T));
            }
        }
        last_per_T.emplace_back(T, *prev);
        cert.solution = last;
        i = j;
    }
    const StageResult& fin = cert.stages.back();
    cert.y0 = fin.y0;
    cert.mc_error = fin.std_error;
    cert.t_tail = fin.t_tail;
    cert.n_gap = std::isnan(fin.n_gap) ? 0.0 : fin.n_gap;
    cert.total = cert.mc_error + cert.t_tail + cert.n_gap;
    cert.T = fin.T;
    cert.n = fin.n;
    cert.converged = cert.total <= target_tol;
    if (!cert.converged)
        cert.diagnostics.push_back("schedule exhausted before reaching target tolerance " + std::to_string(target_tol));
    return cert;
}

// Per-stage table: T, n, Y0, stderr, t_tail, n_gap, constraint violation, mean K_T.
inline std::string stage_csv(const ValueCertificate& cert)
{
    std::ostringstream os;
    os.precision(17);
    os << "T,n,n_paths,dt,Y0,stderr,t_tail,n_gap,constraint_violation,K_T_mean\n";
    for (const auto& s : cert.stages) {
        os << s.T << ',' << s.n << ',' << s.n_paths << ',' << s.dt << ',' << s.y0 << ',' << s.std_error << ','
           << s.t_tail << ',';
        if (std::isnan(s.n_gap))
            os << "";
        else
            os << s.n_gap;
        os << ',' << s.constraint_violation << ',' << s.k_mean << '\n';
    }
    return os.str();
}

} // namespace rbsde
