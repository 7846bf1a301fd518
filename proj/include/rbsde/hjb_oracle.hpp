#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "rbsde/errors.hpp"
#include "rbsde/problem.hpp"

namespace rbsde {

class SpatialGrid {
public:
    SpatialGrid(std::vector<std::pair<double, double>> box, std::vector<double> dx) : box_(std::move(box)), dx_(std::move(dx))
    {
        require(box_.size() == 1 || box_.size() == 2, "spatial grid: dims must be 1 or 2");
        require(dx_.size() == box_.size(), "spatial grid: one dx per dimension");
        for (std::size_t i = 0; i < box_.size(); ++i) {
            require(box_[i].first < box_[i].second, "spatial grid: box needs lo < hi");
            require(dx_[i] > 0.0, "spatial grid: dx must be > 0");
            const double cells = (box_[i].second - box_[i].first) / dx_[i];
            const auto nc = static_cast<std::size_t>(std::llround(cells));
            require(nc >= 2 && std::abs(cells - static_cast<double>(nc)) < 1e-6 * cells,
                    "spatial grid: dx must divide the box width");
            counts_.push_back(nc + 1);
        }
    }

    static SpatialGrid uniform(std::vector<std::pair<double, double>> box, double dx)
    {
        std::vector<double> d(box.size(), dx);
        return SpatialGrid(std::move(box), std::move(d));
    }

    std::size_t dims() const noexcept { return box_.size(); }
    const std::vector<std::pair<double, double>>& box() const noexcept { return box_; }
    const std::vector<double>& dx() const noexcept { return dx_; }
    std::size_t count(std::size_t dim) const { return counts_[dim]; }
    std::size_t size() const
    {
        std::size_t s = 1;
        for (auto c : counts_) s *= c;
        return s;
    }

    double coordinate(std::size_t dim, std::size_t i) const
    {
        return i + 1 == counts_[dim] ? box_[dim].second : box_[dim].first + static_cast<double>(i) * dx_[dim];
    }

    // Flat index; the last dimension varies fastest.
    std::size_t index(std::size_t i0, std::size_t i1 = 0) const { return dims() == 1 ? i0 : i0 * counts_[1] + i1; }
    std::pair<std::size_t, std::size_t> unflatten(std::size_t idx) const
    {
        if (dims() == 1) return {idx, 0};
        return {idx / counts_[1], idx % counts_[1]};
    }

    std::vector<double> point(std::size_t idx) const
    {
        const auto [i0, i1] = unflatten(idx);
        if (dims() == 1) return {coordinate(0, i0)};
        return {coordinate(0, i0), coordinate(1, i1)};
    }

    bool on_boundary(std::size_t idx) const
    {
        const auto [i0, i1] = unflatten(idx);
        if (i0 == 0 || i0 + 1 == counts_[0]) return true;
        return dims() == 2 && (i1 == 0 || i1 + 1 == counts_[1]);
    }

    // x0 must sit inside the box with a margin of at least `fraction` of the width on each side.
    bool has_margin(std::span<const double> x0, double fraction = 0.2) const
    {
        if (x0.size() != dims()) return false;
        for (std::size_t i = 0; i < dims(); ++i) {
            const double w = box_[i].second - box_[i].first;
            if (x0[i] - box_[i].first < fraction * w || box_[i].second - x0[i] < fraction * w) return false;
        }
        return true;
    }

private:
    std::vector<std::pair<double, double>> box_;
    std::vector<double> dx_;
    std::vector<std::size_t> counts_;
};

struct HJBOptions {
    std::size_t max_iters = 100;
    double tol = 1e-10;
    // Cross-derivative stencils that are not diagonally dominant are an error
    // unless this is false, in which case a central stencil is used and flagged.
    bool strict_monotone = true;
    std::size_t interval_actions = 33;
};

struct GridValue {
    SpatialGrid grid;
    std::vector<double> values;
    std::vector<double> policy;
    std::vector<double> actions;
    double residual_sup = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    bool monotone = true;
    std::vector<double> objective_history; // mean node value after each policy evaluation

    double at(std::size_t i0, std::size_t i1 = 0) const { return values[grid.index(i0, i1)]; }
};

namespace detail {

struct StencilEntry {
    std::size_t col;
    double coef;
};

// Entries of the discrete generator L^a at interior node idx (upwind first
// derivatives, central second derivatives, 7-point cross stencil).
inline bool generator_stencil(const ProblemSpec& spec, const SpatialGrid& g, std::size_t idx, double a, bool strict,
                              std::vector<StencilEntry>& out)
{
    out.clear();
    const std::size_t n = spec.dim_state, d = spec.dim_noise;
    const auto x = g.point(idx);
    const PathSummary s{&spec.summary, x};
    std::vector<double> b(n), sig(n * d);
    spec.drift(0.0, s, a, b);
    spec.diffusion(0.0, s, a, sig);
    double diff[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < d; ++k) diff[i][j] += 0.5 * sig[i * d + k] * sig[j * d + k];
    const auto [i0, i1] = g.unflatten(idx);
    double center = 0.0;
    auto neighbor = [&](std::size_t dim, int step) {
        if (g.dims() == 1) return g.index(i0 + static_cast<std::size_t>(static_cast<long>(step)));
        if (dim == 0) return g.index(static_cast<std::size_t>(static_cast<long>(i0) + step), i1);
        return g.index(i0, static_cast<std::size_t>(static_cast<long>(i1) + step));
    };
    bool monotone = true;
    double cross = n == 2 ? diff[0][1] : 0.0;
    const bool have_cross = std::abs(cross) > 0.0;
    double h[2] = {g.dx()[0], n == 2 ? g.dx()[1] : 1.0};
    if (have_cross) {
        const double hh = h[0] * h[1];
        monotone = diff[0][0] / (h[0] * h[0]) - std::abs(cross) / hh >= -1e-14
                   && diff[1][1] / (h[1] * h[1]) - std::abs(cross) / hh >= -1e-14;
        if (!monotone && strict)
            throw NumericalFailure("hjb: cross-derivative stencil is not diagonally dominant at x = ("
                                   + std::to_string(x[0]) + ", " + std::to_string(x[1])
                                   + "); use a smaller/anisotropic dx or set strict_monotone = false");
    }
    for (std::size_t dim = 0; dim < n; ++dim) {
        const double hd = h[dim];
        const double bp = std::max(b[dim], 0.0), bm = std::max(-b[dim], 0.0);
        double second = diff[dim][dim] / (hd * hd);
        if (have_cross && monotone) second -= std::abs(cross) / (h[0] * h[1]);
        const double up = bp / hd + second, down = bm / hd + second;
        out.push_back({neighbor(dim, +1), up});
        out.push_back({neighbor(dim, -1), down});
        center -= up + down;
    }
    if (have_cross) {
        const double c = cross / (h[0] * h[1]);
        auto diag = [&](int s0, int s1) {
            return g.index(static_cast<std::size_t>(static_cast<long>(i0) + s0),
                           static_cast<std::size_t>(static_cast<long>(i1) + s1));
        };
        if (monotone) {
            // 2 a12 u_xy with the 7-point form oriented by the sign of a12
            if (cross > 0.0) {
                out.push_back({diag(1, 1), c});
                out.push_back({diag(-1, -1), c});
            } else {
                out.push_back({diag(1, -1), -c});
                out.push_back({diag(-1, 1), -c});
            }
            center -= 2.0 * std::abs(c);
        } else {
            const double q = 0.5 * c; // central 4-point: 2 a12 (u_pp - u_pm - u_mp + u_mm)/(4 h0 h1)
            out.push_back({diag(1, 1), q});
            out.push_back({diag(-1, -1), q});
            out.push_back({diag(1, -1), -q});
            out.push_back({diag(-1, 1), -q});
        }
    }
    out.push_back({idx, center});
    return monotone;
}

inline double apply_stencil(const std::vector<StencilEntry>& st, const std::vector<double>& u)
{
    double acc = 0.0;
    for (const auto& e : st) acc += e.coef * u[e.col];
    return acc;
}

inline double reward_at(const ProblemSpec& spec, const std::vector<double>& x, double a)
{
    return spec.reward(0.0, PathSummary{&spec.summary, x}, a);
}

inline std::size_t myopic_index(const ProblemSpec& spec, const std::vector<double>& x, const std::vector<double>& acts)
{
    std::size_t best = 0;
    double fb = reward_at(spec, x, acts[0]);
    for (std::size_t j = 1; j < acts.size(); ++j) {
        const double fj = reward_at(spec, x, acts[j]);
        if (fj > fb) {
            fb = fj;
            best = j;
        }
    }
    return best;
}

} // namespace detail

// Policy iteration for beta u - sup_a [L^a u + f(., a)] = 0 on the box, with
// Dirichlet data u = f(x, argmax_a f(x, a)) / beta on its boundary.
inline GridValue solve_hjb_fd(const ProblemSpec& spec, const SpatialGrid& grid, const HJBOptions& opt = {})
{
    spec.check_structure();
    require(spec.markovian(), "hjb: Markovian problems only");
    require(spec.dim_state == grid.dims(), "hjb: grid and state dimensions differ");
    require(grid.has_margin(spec.x0), "hjb: the box must contain x0 with a margin of 20% of its width");

    GridValue gv{grid, {}, {}, spec.control_space.enumerate(opt.interval_actions)};
    const auto& acts = gv.actions;
    const std::size_t N = grid.size();
    std::vector<std::size_t> pol(N);
    std::vector<double> boundary(N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        const auto x = grid.point(i);
        pol[i] = detail::myopic_index(spec, x, acts);
        if (grid.on_boundary(i)) boundary[i] = detail::reward_at(spec, x, acts[pol[i]]) / spec.beta;
    }

    std::vector<double> u(N, 0.0);
    std::vector<detail::StencilEntry> st;
    Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
    for (std::size_t it = 0; it < opt.max_iters; ++it) {
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(N * (grid.dims() == 1 ? 3 : 9));
        Eigen::VectorXd rhs(static_cast<Eigen::Index>(N));
        for (std::size_t i = 0; i < N; ++i) {
            const auto ii = static_cast<int>(i);
            if (grid.on_boundary(i)) {
                trip.emplace_back(ii, ii, 1.0);
                rhs(ii) = boundary[i];
                continue;
            }
            gv.monotone &= detail::generator_stencil(spec, grid, i, acts[pol[i]], opt.strict_monotone, st);
            trip.emplace_back(ii, ii, spec.beta);
            for (const auto& e : st) trip.emplace_back(ii, static_cast<int>(e.col), -e.coef);
            rhs(ii) = detail::reward_at(spec, grid.point(i), acts[pol[i]]);
        }
        Eigen::SparseMatrix<double> A(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(N));
        A.setFromTriplets(trip.begin(), trip.end());
        lu.compute(A);
        if (lu.info() != Eigen::Success) throw NumericalFailure("hjb: sparse factorization failed");
        Eigen::VectorXd sol = lu.solve(rhs);
        for (int r = 0; r < 2; ++r) sol += lu.solve(rhs - A * sol); // iterative refinement
        std::vector<double> u_new(sol.data(), sol.data() + N);
        double change = 0.0;
        for (std::size_t i = 0; i < N; ++i) change = std::max(change, std::abs(u_new[i] - u[i]));
        u = std::move(u_new);
        double mean = 0.0;
        for (double v : u) mean += v;
        gv.objective_history.push_back(mean / static_cast<double>(N));
        gv.iterations = it + 1;

        // improvement: switch only on a strict gain
        bool changed = false;
        for (std::size_t i = 0; i < N; ++i) {
            if (grid.on_boundary(i)) continue;
            const auto x = grid.point(i);
            detail::generator_stencil(spec, grid, i, acts[pol[i]], opt.strict_monotone, st);
            double best = detail::apply_stencil(st, u) + detail::reward_at(spec, x, acts[pol[i]]);
            std::size_t arg = pol[i];
            for (std::size_t j = 0; j < acts.size(); ++j) {
                if (j == pol[i]) continue;
                detail::generator_stencil(spec, grid, i, acts[j], opt.strict_monotone, st);
                const double q = detail::apply_stencil(st, u) + detail::reward_at(spec, x, acts[j]);
                if (q > best + 1e-13 * (1.0 + std::abs(best))) {
                    best = q;
                    arg = j;
                }
            }
            if (arg != pol[i]) {
                pol[i] = arg;
                changed = true;
            }
        }
        if (!changed || (it > 0 && change <= opt.tol)) {
            gv.converged = true;
            break;
        }
    }
    gv.values = std::move(u);
    gv.policy.resize(N);
    for (std::size_t i = 0; i < N; ++i) gv.policy[i] = acts[pol[i]];
    return gv;
}

// sup over interior nodes of |beta u - max_a (L^a u + f)|.
inline double hjb_residual(const GridValue& gv, const ProblemSpec& spec, bool strict_monotone = true)
{
    const SpatialGrid& g = gv.grid;
    std::vector<detail::StencilEntry> st;
    double worst = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (g.on_boundary(i)) continue;
        const auto x = g.point(i);
        double best = -std::numeric_limits<double>::infinity();
        for (double a : gv.actions) {
            detail::generator_stencil(spec, g, i, a, strict_monotone, st);
            best = std::max(best, detail::apply_stencil(st, gv.values) + detail::reward_at(spec, x, a));
        }
        worst = std::max(worst, std::abs(spec.beta * gv.values[i] - best));
    }
    return worst;
}

// Multilinear interpolation of the grid values.
inline double interpolate(const GridValue& gv, std::span<const double> x)
{
    const SpatialGrid& g = gv.grid;
    require(x.size() == g.dims(), "interpolate: dimension mismatch");
    std::size_t lo[2] = {0, 0};
    double wt[2] = {0.0, 0.0};
    for (std::size_t d = 0; d < g.dims(); ++d) {
        const double lo_b = g.box()[d].first;
        const double v = std::clamp(x[d], lo_b, g.box()[d].second);
        double pos = (v - lo_b) / g.dx()[d];
        auto i = static_cast<std::size_t>(std::floor(pos));
        i = std::min(i, g.count(d) - 2);
        lo[d] = i;
        wt[d] = std::clamp(pos - static_cast<double>(i), 0.0, 1.0);
    }
    if (g.dims() == 1) return (1.0 - wt[0]) * gv.at(lo[0]) + wt[0] * gv.at(lo[0] + 1);
    return (1.0 - wt[0]) * ((1.0 - wt[1]) * gv.at(lo[0], lo[1]) + wt[1] * gv.at(lo[0], lo[1] + 1))
           + wt[0] * ((1.0 - wt[1]) * gv.at(lo[0] + 1, lo[1]) + wt[1] * gv.at(lo[0] + 1, lo[1] + 1));
}

struct ComparisonReport {
    double u_x0 = 0.0;
    double y0 = 0.0;
    double abs_gap = 0.0;
    double rel_gap = 0.0;
    double tolerance = 0.0; // certificate total + boundary allowance
    bool within_certificate = false;
};

inline ComparisonReport compare_value(const GridValue& gv, double y0, double certificate_total,
                                      std::span<const double> x0, double boundary_allowance = 0.0)
{
    const SpatialGrid& g = gv.grid;
    for (std::size_t d = 0; d < g.dims(); ++d)
        require(x0[d] > g.box()[d].first && x0[d] < g.box()[d].second, "compare: x0 must be interior to the box");
    ComparisonReport r;
    r.u_x0 = interpolate(gv, x0);
    r.y0 = y0;
    r.abs_gap = std::abs(r.u_x0 - y0);
    r.rel_gap = r.abs_gap / std::max(std::abs(r.u_x0), 1e-300);
    r.tolerance = certificate_total + boundary_allowance;
    r.within_certificate = r.abs_gap <= r.tolerance;
    return r;
}

inline std::string grid_value_csv(const GridValue& gv)
{
    std::ostringstream os;
    os.precision(17);
    const SpatialGrid& g = gv.grid;
    os << (g.dims() == 1 ? "x" : "x0,x1") << ",value,action\n";
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto x = g.point(i);
        for (double c : x) os << c << ',';
        os << gv.values[i] << ',' << gv.policy[i] << '\n';
    }
    return os.str();
}

struct GridConvergence {
    std::vector<double> dx;
    std::vector<double> u_x0;
    double ratio = 0.0; // |u(dx/2) - u(dx/4)| / |u(dx) - u(dx/2)|
};

// u(x0) at dx, dx/2, dx/4 and the ratio of successive differences.
inline GridConvergence grid_convergence(const ProblemSpec& spec, const std::vector<std::pair<double, double>>& box,
                                        double dx, const HJBOptions& opt = {})
{
    GridConvergence gc;
    for (double h : {dx, dx / 2.0, dx / 4.0}) {
        const auto gv = solve_hjb_fd(spec, SpatialGrid::uniform(box, h), opt);
        gc.dx.push_back(h);
        gc.u_x0.push_back(interpolate(gv, spec.x0));
    }
    const double d1 = gc.u_x0[0] - gc.u_x0[1], d2 = gc.u_x0[1] - gc.u_x0[2];
    gc.ratio = std::abs(d1) > 0.0 ? std::abs(d2) / std::abs(d1) : std::numeric_limits<double>::quiet_NaN();
    return gc;
}

} // namespace rbsde
