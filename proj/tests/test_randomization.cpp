#include <cmath>

#include <gtest/gtest.h>

#include "rbsde/rbsde.hpp"

using namespace rbsde;

namespace {

PathSummary origin_summary()
{
    static const SummarySpec ss;
    static const std::vector<double> zero{0.0};
    return PathSummary{&ss, zero};
}

double log_kappa(const IntensityControl& nu, const JumpTrajectory& jt, const JumpMeasure& mu, const TimeGrid& g,
                 double T)
{
    return log_doleans_exponential(nu, jt, [](std::size_t) { return origin_summary(); }, mu, g, T);
}

ProblemSpec two_state_chain()
{
    ProblemSpec s;
    s.name = "chain";
    s.drift = zoo::constant_drift(0.0);
    s.diffusion = zoo::constant_diffusion(0.0);
    s.reward = [](double, const PathSummary&, double a) { return a; };
    s.control_space = ControlSpace::finite({0.0, 1.0});
    s.regime = Regime::bounded(1.0);
    return s;
}

} // namespace

TEST(Doleans, UnitIntensityGivesUnitWeight)
{
    const JumpMeasure mu(ControlSpace::finite({-1.0, 1.0}), 2.5);
    const TimeGrid g(4.0, 40);
    for (std::uint64_t p = 0; p < 20; ++p) {
        const auto jt = simulate_marked_point_process(mu, -1.0, 4.0, 8, p);
        EXPECT_EQ(log_kappa(IntensityControl::constant(1.0, 3.0), jt, mu, g, 4.0), 0.0);
    }
}

TEST(Doleans, ConstantIntensityWithOneJump)
{
    const JumpMeasure mu(ControlSpace::finite({-1.0, 1.0}), 1.0);
    const TimeGrid g(2.0, 20);
    JumpTrajectory jt;
    jt.a0 = -1.0;
    jt.jump_times = {0.73};
    jt.marks = {1.0};
    const double k = std::exp(log_kappa(IntensityControl::constant(2.0, 2.0), jt, mu, g, 2.0));
    EXPECT_NEAR(k, 2.0 * std::exp(-2.0), 1e-14);
}

TEST(Doleans, ClosedFormForTwoLevelField)
{
    // kappa = exp(T sum_a (1 - nu(a)) lambda(a)) prod nu(A_n)
    const JumpMeasure mu(ControlSpace::finite({-1.0, 1.0}), 2.0);
    const TimeGrid g(3.0, 30);
    const auto nu = IntensityControl::two_level(2.5, 0.4, {1.0}, 3.0);
    JumpTrajectory jt;
    jt.a0 = -1.0;
    jt.jump_times = {0.5, 1.0, 2.2};
    jt.marks = {1.0, -1.0, 1.0};
    const double expect = 3.0 * ((1.0 - 2.5) + (1.0 - 0.4)) + std::log(2.5) + std::log(0.4) + std::log(2.5);
    EXPECT_NEAR(log_kappa(nu, jt, mu, g, 3.0), expect, 1e-13);
    // truncated at T = 1 only the first two jumps count
    EXPECT_NEAR(log_kappa(nu, jt, mu, g, 1.0), 1.0 * (-0.9) + std::log(2.5) + std::log(0.4), 1e-13);
}

TEST(Doleans, MartingaleMeanIsOne)
{
    const auto z = zoo::bangbang_1d();
    const JumpMeasure mu(z.spec.control_space, 1.0);
    const TimeGrid g(3.0, 60);
    const auto ens = simulate_randomized_pair(z.spec, mu, -1.0, g, 20000, 41);
    for (const auto& nu : random_intensities(3.0, 3, 5)) {
        std::vector<double> k(ens.n_paths());
        for (std::size_t p = 0; p < ens.n_paths(); ++p)
            k[p] = doleans_exponential(nu, ens.jump(p), [&](std::size_t j) { return ens.summary(p, j); }, mu, g, 3.0);
        const auto st = sample_stats(k);
        EXPECT_NEAR(st.mean, 1.0, 4.0 * st.std_error) << nu.label();
    }
}

TEST(Doleans, RejectsJumpAtTimeZero)
{
    const JumpMeasure mu(ControlSpace::finite({0.0, 1.0}), 1.0);
    JumpTrajectory jt;
    jt.jump_times = {0.0};
    jt.marks = {1.0};
    EXPECT_THROW(log_kappa(IntensityControl::constant(1.0, 1.0), jt, mu, TimeGrid(1.0, 10), 1.0), InvalidArgument);
}

TEST(RandomizedReward, UnitIntensityMatchesThePlainEstimator)
{
    const auto z = zoo::bangbang_capped_1d();
    const JumpMeasure mu(z.spec.control_space, 1.0);
    const auto ens = simulate_randomized_pair(z.spec, mu, -1.0, TimeGrid(5.0, 100), 2000, 3);
    const auto plain = estimate_reward(ens, z.spec, 5.0);
    const auto weighted = estimate_randomized_reward(ens, IntensityControl::constant(1.0, 4.0), z.spec, 5.0);
    EXPECT_EQ(plain.value, weighted.value);
    EXPECT_EQ(plain.std_error, weighted.std_error);
    EXPECT_NEAR(weighted.effective_sample_size, 2000.0, 1e-9);
}

TEST(RandomizedReward, ConstantRewardIsExact)
{
    const auto z = zoo::constant_reward(2.0, 0.5);
    const JumpMeasure mu(z.spec.control_space, 1.0);
    const auto ens = simulate_randomized_pair(z.spec, mu, -1.0, TimeGrid(6.0, 60), 50, 3);
    const auto v = estimate_reward(ens, z.spec, 6.0);
    const double exact = 2.0 * (1.0 - std::exp(-3.0)) / 0.5;
    EXPECT_NEAR(v.value, exact, 1e-12);
    EXPECT_NEAR(v.std_error, 0.0, 1e-12);
    EXPECT_NEAR(v.truncation_bound, 2.0 * std::exp(-3.0) / 0.5, 1e-15);
    EXPECT_NEAR(exact + v.truncation_bound, 4.0, 1e-12);
    const auto half = estimate_reward(ens, z.spec, 3.0);
    EXPECT_NEAR(half.value, 2.0 * (1.0 - std::exp(-1.5)) / 0.5, 1e-12);
}

TEST(RandomizedReward, RequiresJumpTrajectories)
{
    const auto z = zoo::bangbang_1d();
    const JumpMeasure mu(z.spec.control_space, 1.0);
    SimulationOptions o;
    o.keep_jumps = false;
    const auto ens = simulate_randomized_pair(z.spec, mu, -1.0, TimeGrid(1.0, 10), 10, 3, o);
    EXPECT_THROW(estimate_randomized_reward(ens, IntensityControl::constant(1.0, 1.0), z.spec, 1.0), InvalidArgument);
}

TEST(IntensityControlTest, ConstraintViolations)
{
    EXPECT_THROW(IntensityControl::constant(2.0, 1.0), InvalidArgument);
    EXPECT_THROW(IntensityControl::constant(0.0, 1.0), InvalidArgument);
    EXPECT_THROW(IntensityControl(0.0, [](double, const PathSummary&, double, double) { return 1.0; }),
                 InvalidArgument);
    const IntensityControl zero(1.0, [](double, const PathSummary&, double, double) { return 0.0; }, "zero");
    EXPECT_THROW(zero(0.0, origin_summary(), 0.0, 1.0), ConstraintViolation);
    const IntensityControl big(1.0, [](double, const PathSummary&, double, double) { return 1.5; }, "big");
    EXPECT_THROW(big(0.0, origin_summary(), 0.0, 1.0), ConstraintViolation);
    const IntensityControl nan(1.0, [](double, const PathSummary&, double, double) { return std::nan(""); });
    EXPECT_THROW(nan(0.0, origin_summary(), 0.0, 1.0), ConstraintViolation);
}

TEST(IntensityControlTest, RandomIntensitiesStayInBounds)
{
    const auto nus = random_intensities(5.0, 6, 99);
    ASSERT_EQ(nus.size(), 6u);
    SummarySpec ss;
    for (const auto& nu : nus) {
        EXPECT_EQ(nu.bound(), 5.0);
        for (double t : {0.0, 0.7, 3.3, 9.9})
            for (double x : {-4.2, -0.1, 0.0, 2.5}) {
                std::vector<double> f{x};
                const double v = nu(t, PathSummary{&ss, f}, -1.0, 1.0);
                EXPECT_GT(v, 0.0);
                EXPECT_LE(v, 5.0);
                EXPECT_EQ(v, nu(t, PathSummary{&ss, f}, -1.0, 1.0));
            }
    }
}

TEST(FeedbackTableTest, LookupClampsCells)
{
    FeedbackTable tab;
    tab.dt = 0.5;
    tab.cell_edges = {-1.0, 0.0, 1.0};
    tab.actions = {-1.0, 1.0};
    tab.values.assign(3 * 2 * 2 * 2, 0.0);
    for (std::size_t i = 0; i < tab.values.size(); ++i) tab.values[i] = static_cast<double>(i + 1);
    EXPECT_EQ(tab.n_nodes(), 3u);
    EXPECT_EQ(tab.lookup(0.0, -5.0, -1.0, 1.0), tab.at(0, 0, 0, 1));
    EXPECT_EQ(tab.lookup(0.6, 0.5, 1.0, -1.0), tab.at(1, 1, 1, 0));
    EXPECT_EQ(tab.lookup(9.0, 7.0, 1.0, 1.0), tab.at(2, 1, 1, 1));
    EXPECT_THROW(tab.lookup(0.0, 0.0, 0.5, 1.0), InvalidArgument);
}

// Under a constant field c the chain on {0, 1} flips at a node with
// probability q; P(I = a0 after j decisions) = (1 + (1 - 2q)^j) / 2.
TEST(DirectSimulation, TwoStateOccupationThinning)
{
    const auto spec = two_state_chain();
    const JumpMeasure mu(spec.control_space, 2.0);
    const TimeGrid g(1.0, 100);
    const std::size_t m = 20000;
    const auto ens = simulate_under_intensity(spec, mu, 0.0, IntensityControl::constant(1.0, 1.0), g, m, 12);
    const double q = g.dt() * 1.0 * 1.0;
    for (std::size_t k : {9u, 49u, 99u}) {
        double same = 0.0;
        for (std::size_t p = 0; p < m; ++p) same += ens.action(p, k) == 0.0 ? 1.0 : 0.0;
        const double frac = same / static_cast<double>(m);
        const double oracle = 0.5 * (1.0 + std::pow(1.0 - 2.0 * q, static_cast<double>(k + 1)));
        EXPECT_NEAR(frac, oracle, 4.0 * std::sqrt(oracle * (1.0 - oracle) / static_cast<double>(m))) << k;
    }
}

TEST(DirectSimulation, TwoStateOccupationImplicit)
{
    const auto spec = two_state_chain();
    const JumpMeasure mu(spec.control_space, 20.0);
    const TimeGrid g(1.0, 20);
    const std::size_t m = 20000;
    SimulationOptions o;
    o.switch_rule = SwitchRule::implicit;
    const auto ens = simulate_under_intensity(spec, mu, 0.0, IntensityControl::constant(3.0, 5.0), g, m, 12, o);
    const double s = g.dt() * 3.0 * 10.0;
    const double q = s / (1.0 + 2.0 * s);
    for (std::size_t k : {0u, 4u, 19u}) {
        double same = 0.0;
        for (std::size_t p = 0; p < m; ++p) same += ens.action(p, k) == 0.0 ? 1.0 : 0.0;
        const double frac = same / static_cast<double>(m);
        const double oracle = 0.5 * (1.0 + std::pow(1.0 - 2.0 * q, static_cast<double>(k + 1)));
        EXPECT_NEAR(frac, oracle, 4.0 * std::sqrt(oracle * (1.0 - oracle) / static_cast<double>(m))) << k;
    }
}

TEST(DirectSimulation, ThinningNeedsASmallStep)
{
    const auto spec = two_state_chain();
    const JumpMeasure mu(spec.control_space, 20.0);
    EXPECT_THROW(simulate_under_intensity(spec, mu, 0.0, IntensityControl::constant(1.0, 1.0), TimeGrid(1.0, 10), 5, 1),
                 NumericalFailure);
}

TEST(DirectSimulation, AgreesWithImportanceSampling)
{
    const auto z = zoo::bangbang_capped_1d();
    const JumpMeasure mu(z.spec.control_space, 1.0);
    const TimeGrid g(3.0, 300);
    const auto nu = IntensityControl::two_level(3.0, 0.2, {1.0}, 3.0);
    const auto direct = estimate_reward(simulate_under_intensity(z.spec, mu, -1.0, nu, g, 20000, 5), z.spec, 3.0);
    SimulationOptions o;
    o.insert_jump_nodes = true;
    const auto nominal = simulate_randomized_pair(z.spec, mu, -1.0, g, 20000, 6, o);
    const auto is = estimate_randomized_reward(nominal, nu, z.spec, 3.0);
    EXPECT_FALSE(is.degenerate_weights);
    // the grid chain and the continuous-time chain differ at O(dt)
    EXPECT_NEAR(direct.value, is.value, 4.0 * std::hypot(direct.std_error, is.std_error) + 0.01);
}
