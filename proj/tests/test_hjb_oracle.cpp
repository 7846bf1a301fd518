#include <cmath>

#include <gtest/gtest.h>

#include "rbsde/rbsde.hpp"

using namespace rbsde;

namespace {

// b = a in {-1, 1}, no noise, f = -|x|: the state is driven to the origin.
ProblemSpec deterministic_pursuit()
{
    ProblemSpec s;
    s.name = "pursuit";
    s.drift = zoo::action_drift();
    s.diffusion = zoo::constant_diffusion(0.0);
    s.reward = [](double, const PathSummary& p, double) { return -std::abs(p.x(0)); };
    s.beta = 1.0;
    s.control_space = ControlSpace::finite({-1.0, 1.0});
    s.regime = Regime::polynomial(1.0, 1.0);
    s.lipschitz_L = 1.0;
    s.declared_growth = GrowthConstants{1.0, 2.0, 0.5, 2.0};
    return s;
}

ProblemSpec ou_2d(double rho_noise = 0.0)
{
    ProblemSpec s;
    s.name = "ou2";
    s.dim_state = 2;
    s.dim_noise = 2;
    s.summary.dim_state = 2;
    s.x0 = {0.0, 0.0};
    s.drift = [](double, const PathSummary& p, double, std::span<double> o) {
        o[0] = -p.x(0);
        o[1] = -p.x(1);
    };
    const double c = std::sqrt(1.0 - rho_noise * rho_noise);
    s.diffusion = [rho_noise, c](double, const PathSummary&, double, std::span<double> o) {
        o[0] = 1.0;
        o[1] = 0.0;
        o[2] = rho_noise;
        o[3] = c;
    };
    s.reward = [](double, const PathSummary& p, double) { return -(p.x(0) * p.x(0) + p.x(1) * p.x(1)); };
    s.beta = 1.0;
    s.control_space = ControlSpace::finite({0.0});
    s.regime = Regime::polynomial(2.0, 1.0);
    s.lipschitz_L = 1.0;
    s.declared_growth = GrowthConstants{2.0, 10.0, 0.5, 2.0};
    return s;
}

} // namespace

TEST(HJB, ConstantRewardGivesConstantValue)
{
    const auto z = zoo::constant_reward(1.0, 0.5);
    const auto gv = solve_hjb_fd(z.spec, SpatialGrid::uniform({{-3.0, 3.0}}, 0.01));
    EXPECT_TRUE(gv.converged);
    for (double v : gv.values) EXPECT_NEAR(v, 2.0, 1e-12);
}

TEST(HJB, DeterministicPursuitMatchesItsClosedForm)
{
    const auto spec = deterministic_pursuit();
    const auto gv = solve_hjb_fd(spec, SpatialGrid::uniform({{-3.0, 3.0}}, 0.005));
    EXPECT_TRUE(gv.converged);
    for (double x : {-1.5, -0.5, 0.25, 1.0, 2.0}) {
        const double r = std::abs(x);
        const std::vector<double> p{x};
        EXPECT_NEAR(interpolate(gv, p), -(r - 1.0 + std::exp(-r)), 0.01) << x;
    }
    // policy points at the origin
    for (std::size_t i = 1; i + 1 < gv.grid.size(); ++i) {
        const double x = gv.grid.point(i)[0];
        if (std::abs(x) > 0.05) EXPECT_EQ(gv.policy[i], x > 0 ? -1.0 : 1.0) << x;
    }
}

TEST(HJB, ResidualIsSmallAndDetectsPerturbations)
{
    const auto z = zoo::bangbang_1d();
    auto gv = solve_hjb_fd(z.spec, SpatialGrid::uniform({{-6.0, 6.0}}, 0.02));
    EXPECT_LT(hjb_residual(gv, z.spec), 1e-8);
    gv.values[gv.grid.size() / 3] += 0.01;
    EXPECT_GT(hjb_residual(gv, z.spec), 1e-3);
}

TEST(HJB, ComparisonPrinciple)
{
    const auto z = zoo::bangbang_1d();
    auto raised = z.spec;
    raised.reward = [](double, const PathSummary& p, double a) {
        return -std::abs(p.x(0)) + 0.1 * std::exp(-p.x(0) * p.x(0)) * (a > 0 ? 1.0 : 0.5);
    };
    const auto grid = SpatialGrid::uniform({{-6.0, 6.0}}, 0.02);
    const auto lo = solve_hjb_fd(z.spec, grid);
    const auto hi = solve_hjb_fd(raised, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_GE(hi.values[i], lo.values[i] - 1e-12);
}

TEST(HJB, PolicyIterationImprovesMonotonically)
{
    // the myopic start ties at -1 everywhere, so half the line has to switch
    const auto z = zoo::bangbang_1d();
    const auto gv = solve_hjb_fd(z.spec, SpatialGrid::uniform({{-6.0, 6.0}}, 0.02));
    EXPECT_TRUE(gv.converged);
    ASSERT_GE(gv.objective_history.size(), 2u);
    for (std::size_t i = 1; i < gv.objective_history.size(); ++i)
        EXPECT_GE(gv.objective_history[i], gv.objective_history[i - 1] - 1e-12);
}

TEST(HJB, OrnsteinUhlenbeckClosedForm)
{
    const auto z = zoo::singleton_ou();
    const auto gv = solve_hjb_fd(z.spec, SpatialGrid::uniform({{-6.0, 6.0}}, 0.01));
    for (double x : {-1.0, 0.0, 0.5, 1.0, 2.0}) {
        const std::vector<double> p{x};
        const double exact = -(x * x / 3.0 + 1.0 / 3.0);
        EXPECT_NEAR(interpolate(gv, p), exact, 0.01 * std::abs(exact)) << x;
    }
    const auto cmp = compare_value(gv, *z.known.value, 0.01, z.spec.x0);
    EXPECT_TRUE(cmp.within_certificate);
    EXPECT_LT(cmp.rel_gap, 0.01);
}

TEST(HJB, FirstOrderGridConvergence)
{
    const auto z = zoo::singleton_ou();
    const auto gc = grid_convergence(z.spec, {{-6.0, 6.0}}, 0.04);
    ASSERT_EQ(gc.u_x0.size(), 3u);
    EXPECT_GE(gc.ratio, 0.3);
    EXPECT_LE(gc.ratio, 0.7);
}

TEST(HJB, TwoDimensionalSeparableProblem)
{
    // upwind error is first order: extrapolate from h and h/2
    const auto spec = ou_2d();
    const std::vector<double> p{1.0, 0.0};
    const double coarse = interpolate(solve_hjb_fd(spec, SpatialGrid::uniform({{-4.0, 4.0}, {-4.0, 4.0}}, 0.1)), p);
    const double fine = interpolate(solve_hjb_fd(spec, SpatialGrid::uniform({{-4.0, 4.0}, {-4.0, 4.0}}, 0.05)), p);
    EXPECT_LT(std::abs(fine + 1.0), std::abs(coarse + 1.0));
    EXPECT_NEAR(2.0 * fine - coarse, -1.0, 0.01);
}

TEST(HJB, CorrelatedNoiseNeedsADiagonallyDominantStencil)
{
    const auto spec = ou_2d(0.9);
    const auto grid = SpatialGrid({{-4.0, 4.0}, {-4.0, 4.0}}, {0.1, 0.4});
    EXPECT_THROW(solve_hjb_fd(spec, grid), NumericalFailure);
    HJBOptions o;
    o.strict_monotone = false;
    const auto gv = solve_hjb_fd(spec, grid, o);
    EXPECT_FALSE(gv.monotone);
    // moderate correlation on a square grid is fine
    const auto ok = solve_hjb_fd(ou_2d(0.5), SpatialGrid::uniform({{-4.0, 4.0}, {-4.0, 4.0}}, 0.1));
    EXPECT_TRUE(ok.monotone);
    const auto ok2 = solve_hjb_fd(ou_2d(0.5), SpatialGrid::uniform({{-4.0, 4.0}, {-4.0, 4.0}}, 0.05));
    const std::vector<double> p{1.0, 0.0};
    // the value only depends on E|X_t|^2, which the correlation does not change
    EXPECT_NEAR(2.0 * interpolate(ok2, p) - interpolate(ok, p), -1.0, 0.015);
}

TEST(HJB, RejectsPathDependentProblemsAndBadBoxes)
{
    EXPECT_THROW(solve_hjb_fd(zoo::memory_drift().spec, SpatialGrid::uniform({{-6.0, 6.0}}, 0.1)), InvalidArgument);
    EXPECT_THROW(solve_hjb_fd(zoo::singleton_ou().spec, SpatialGrid::uniform({{0.8, 3.0}}, 0.1)), InvalidArgument);
    EXPECT_THROW(SpatialGrid::uniform({{0.0, 1.0}}, 0.3), InvalidArgument);
}

TEST(HJB, GridCsv)
{
    const auto z = zoo::bangbang_1d();
    const auto gv = solve_hjb_fd(z.spec, SpatialGrid::uniform({{-6.0, 6.0}}, 0.5));
    const std::string csv = grid_value_csv(gv);
    EXPECT_EQ(csv.rfind("x,value,action\n", 0), 0u);
    EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), gv.grid.size() + 1);
}
