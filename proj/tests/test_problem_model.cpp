#include <cmath>

#include <gtest/gtest.h>

#include "rbsde/rbsde.hpp"

using namespace rbsde;

namespace {

ProblemSpec linear_problem(double drift_slope, double L)
{
    ProblemSpec s;
    s.name = "linear";
    s.drift = [drift_slope](double, const PathSummary& p, double, std::span<double> out) { out[0] = drift_slope * p.x(0); };
    s.diffusion = zoo::constant_diffusion(0.0);
    s.reward = [](double, const PathSummary&, double) { return 1.0; };
    s.beta = 0.1;
    s.regime = Regime::bounded(1.0);
    s.lipschitz_L = L;
    return s;
}

} // namespace

TEST(GrowthConstants, ZeroLipschitzAtOrderTwo)
{
    const auto g = growth_constants(2.0, 0.0, 2.0);
    EXPECT_DOUBLE_EQ(g.c_bar, 4.0);
    EXPECT_DOUBLE_EQ(g.beta_bar, 1.0);
}

TEST(GrowthConstants, UnitLipschitzAtOrderTwo)
{
    const auto g = growth_constants(2.0, 1.0, 2.0);
    EXPECT_DOUBLE_EQ(g.c_bar, 36.0);
    EXPECT_DOUBLE_EQ(g.beta_bar, 21.0);
}

TEST(GrowthConstants, OrderOneUsesTheOrderTwoConstant)
{
    const auto g = growth_constants(1.0, 1.0);
    EXPECT_DOUBLE_EQ(g.bdg_constant, 2.0);
    EXPECT_DOUBLE_EQ(g.c_bar, 6.0);
    EXPECT_DOUBLE_EQ(g.beta_bar, 10.5);
}

TEST(GrowthConstants, DefaultBdgConstants)
{
    EXPECT_DOUBLE_EQ(default_bdg_constant(2.0), 2.0);
    EXPECT_DOUBLE_EQ(default_bdg_constant(1.0), 2.0);
    EXPECT_NEAR(default_bdg_constant(4.0), std::pow(4.0 / 3.0, 4) * 16.0, 1e-12);
}

TEST(GrowthConstants, BetaBarAtZeroLipschitzIsHalfP)
{
    for (double p : {2.0, 3.0, 4.0, 6.5}) EXPECT_DOUBLE_EQ(growth_constants(p, 0.0).beta_bar, p / 2.0) << p;
}

TEST(GrowthConstants, ContinuousInL)
{
    for (double p : {1.0, 2.0, 4.0}) {
        const auto a = growth_constants(p, 0.7);
        const auto b = growth_constants(p, 0.7 + 1e-9);
        EXPECT_NEAR(a.beta_bar, b.beta_bar, 1e-6 * a.beta_bar);
        EXPECT_NEAR(a.c_bar, b.c_bar, 1e-6 * a.c_bar);
        const auto c = growth_constants(p, 0.7);
        EXPECT_EQ(a.c_bar, c.c_bar);
    }
}

TEST(GrowthConstants, RejectsBadInput)
{
    EXPECT_THROW(growth_constants(0.0, 1.0), InvalidArgument);
    EXPECT_THROW(growth_constants(2.0, -1.0), InvalidArgument);
    EXPECT_THROW(growth_constants(2.0, 1.0, 0.0), InvalidArgument);
}

TEST(Validate, DegenerateBoundedProblemIsValid)
{
    ProblemSpec s = linear_problem(0.0, 0.0);
    const auto rep = validate_problem(s);
    EXPECT_TRUE(rep.valid);
    EXPECT_TRUE(rep.lipschitz_ok);
    EXPECT_DOUBLE_EQ(value_bound(s), 10.0);
}

TEST(Validate, BetaBelowBetaBarIsAnAssumptionViolation)
{
    ProblemSpec s = zoo::bangbang_1d().spec;
    s.regime = Regime::polynomial(2.0, 1.0);
    s.lipschitz_L = 1.0;
    s.declared_growth.reset();
    s.beta = 10.0;
    const auto rep = validate_problem(s);
    EXPECT_FALSE(rep.valid);
    EXPECT_TRUE(rep.assumption_violation);
    EXPECT_DOUBLE_EQ(rep.used_growth.beta_bar, 21.0);
    EXPECT_THROW(ensure_valid(s), AssumptionViolation);
}

TEST(Validate, LipschitzProbeCatchesUnderstatedConstant)
{
    ProblemSpec s = linear_problem(1.0, 0.0);
    const auto rep = validate_problem(s);
    EXPECT_FALSE(rep.lipschitz_ok);
    EXPECT_NEAR(rep.empirical_L, 1.0, 1e-6);
    ASSERT_TRUE(rep.lipschitz_offender.has_value());
}

TEST(Validate, ZooProblemsAreValid)
{
    for (const auto& z : zoo_list()) EXPECT_TRUE(validate_problem(z.spec).valid) << z.name;
}

TEST(Bounds, BoundedRegime)
{
    const auto s = zoo::bangbang_capped_1d().spec;
    EXPECT_DOUBLE_EQ(value_bound(s), 1.0);
    EXPECT_DOUBLE_EQ(tail_bound(s, 10.0), std::exp(-10.0));
    EXPECT_DOUBLE_EQ(s.tail_decay_rate(), s.beta);
}

TEST(Bounds, PolynomialRegimeExposesDecayRate)
{
    const auto s = zoo::singleton_ou().spec;
    const auto g = s.growth();
    EXPECT_DOUBLE_EQ(s.tail_decay_rate(), s.beta - g.beta_bar);
    EXPECT_GT(s.tail_decay_rate(), 0.0);
    // 2M(1+C)/(beta-beta_bar) (1+|x0|^r) e^{-(beta-beta_bar)T}
    const double expect = 2.0 * 1.0 * (1.0 + g.c_bar) / (s.beta - g.beta_bar) * 2.0 * std::exp(-0.5 * 10.0);
    EXPECT_NEAR(tail_bound(s, 10.0), expect, 1e-12 * expect);
}

TEST(Structure, RejectsMalformedSpecs)
{
    ProblemSpec s = linear_problem(0.0, 0.0);
    s.beta = 0.0;
    EXPECT_THROW(s.check_structure(), InvalidArgument);
    s = linear_problem(0.0, 0.0);
    s.x0 = {0.0, 1.0};
    EXPECT_THROW(s.check_structure(), InvalidArgument);
    s = linear_problem(0.0, 0.0);
    s.regime = Regime::polynomial(0.0, 1.0);
    EXPECT_THROW(s.check_structure(), InvalidArgument);
}

TEST(ControlSpaceTest, FiniteAndInterval)
{
    EXPECT_THROW(ControlSpace::finite({}), InvalidArgument);
    EXPECT_THROW(ControlSpace::finite({1.0, 1.0}), InvalidArgument);
    EXPECT_THROW(ControlSpace::interval(1.0, 1.0), InvalidArgument);
    const auto a = ControlSpace::interval(-1.0, 2.0);
    EXPECT_TRUE(a.contains(0.5));
    EXPECT_FALSE(a.contains(2.5));
    const JumpMeasure m(a, 3.0);
    double mass = 0.0, first = 0.0;
    for (const auto& q : m.quadrature()) {
        mass += q.mass;
        first += q.mass * q.action;
    }
    EXPECT_NEAR(mass, 3.0, 1e-12);
    EXPECT_NEAR(first / mass, 0.5, 1e-12);
}
