#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "rbsde/rbsde.hpp"

using namespace rbsde;

namespace {

struct Design {
    std::size_t dim;
    std::vector<double> flat;
    std::size_t size() const { return flat.size() / dim; }
    std::span<const double> operator[](std::size_t i) const { return {flat.data() + i * dim, dim}; }
};

Design uniform_design(std::size_t n, std::size_t dim, double lo, double hi, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Design d{dim, std::vector<double>(n * dim)};
    for (double& v : d.flat) v = u(rng);
    return d;
}

template <class F>
std::pair<FeatureBasis, LeastSquares::Result> fit(const RegressionBasis& cfg, const Design& d, F target)
{
    auto fb = FeatureBasis::fit(cfg, d.size(), d.dim, [&](std::size_t i) { return d[i]; });
    LeastSquares ls(fb.size(), 1);
    std::vector<std::size_t> idx(fb.max_nonzeros());
    std::vector<double> val(fb.max_nonzeros());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const std::size_t nnz = fb.eval(d[i], idx.data(), val.data());
        const double y = target(d[i]);
        ls.add(idx.data(), val.data(), nnz, std::span<const double>(&y, 1));
    }
    return {fb, ls.solve(cfg.max_condition)};
}

double predict(const FeatureBasis& fb, const Eigen::MatrixXd& c, std::span<const double> x)
{
    std::vector<std::size_t> idx(fb.max_nonzeros());
    std::vector<double> val(fb.max_nonzeros());
    const std::size_t nnz = fb.eval(x, idx.data(), val.data());
    double acc = 0.0;
    for (std::size_t i = 0; i < nnz; ++i) acc += val[i] * c(static_cast<Eigen::Index>(idx[i]), 0);
    return acc;
}

} // namespace

TEST(TentBasis, PartitionOfUnity)
{
    const auto d = uniform_design(500, 1, -3.0, 3.0, 1);
    const auto fb = FeatureBasis::fit(RegressionBasis{}, d.size(), 1, [&](std::size_t i) { return d[i]; });
    std::vector<std::size_t> idx(fb.max_nonzeros());
    std::vector<double> val(fb.max_nonzeros());
    for (double x : {-10.0, -2.9, 0.0, 1.234, 2.99, 50.0}) {
        const std::size_t nnz = fb.eval(std::span<const double>(&x, 1), idx.data(), val.data());
        double s = 0.0;
        for (std::size_t i = 0; i < nnz; ++i) {
            EXPECT_GE(val[i], 0.0);
            s += val[i];
        }
        EXPECT_NEAR(s, 1.0, 1e-15);
    }
}

TEST(TentBasis, ReproducesConstants)
{
    const auto d = uniform_design(2000, 1, -2.0, 2.0, 2);
    const auto [fb, res] = fit(RegressionBasis{}, d, [](auto) { return 3.5; });
    for (double x : {-5.0, -1.0, 0.3, 1.9, 7.0}) EXPECT_NEAR(predict(fb, res.coeffs, std::span<const double>(&x, 1)), 3.5, 1e-12);
    EXPECT_LT(res.residual_rms[0], 1e-10);
}

TEST(TentBasis, ReproducesLinearFunctionsOnABox)
{
    RegressionBasis cfg;
    cfg.box = std::vector<std::pair<double, double>>{{-1.0, 1.0}};
    const auto d = uniform_design(2000, 1, -1.0, 1.0, 3);
    const auto [fb, res] = fit(cfg, d, [](auto x) { return 2.0 * x[0] + 1.0; });
    for (double x : {-1.0, -0.41, 0.0, 0.77, 1.0}) EXPECT_NEAR(predict(fb, res.coeffs, std::span<const double>(&x, 1)), 2.0 * x + 1.0, 1e-10);
}

TEST(TentBasis, ReproducesBilinearFunctionsInTwoDimensions)
{
    RegressionBasis cfg;
    cfg.knots = 6;
    cfg.box = std::vector<std::pair<double, double>>{{-1.0, 1.0}, {0.0, 2.0}};
    auto d = uniform_design(4000, 2, -1.0, 1.0, 4);
    for (std::size_t i = 0; i < d.size(); ++i) d.flat[2 * i + 1] += 1.0;
    const auto [fb, res] = fit(cfg, d, [](auto x) { return 1.0 + x[0] - 2.0 * x[1] + 0.5 * x[0] * x[1]; });
    EXPECT_EQ(fb.size(), 36u);
    EXPECT_EQ(fb.max_nonzeros(), 4u);
    const std::vector<double> x{0.3, 1.7};
    EXPECT_NEAR(predict(fb, res.coeffs, x), 1.0 + 0.3 - 3.4 + 0.5 * 0.51, 1e-10);
}

TEST(TentBasis, OuterKnotsSitInsideTheSample)
{
    const auto d = uniform_design(10000, 1, 0.0, 1.0, 5);
    RegressionBasis cfg;
    const auto [fb, res] = fit(cfg, d, [](auto x) { return x[0]; });
    // flat beyond the outer knots: the prediction at the sample extremes equals the outer knot value
    const double lo = 0.0, hi = 1.0;
    const double at_lo = predict(fb, res.coeffs, std::span<const double>(&lo, 1));
    const double at_hi = predict(fb, res.coeffs, std::span<const double>(&hi, 1));
    EXPECT_NEAR(at_lo, cfg.outer_quantile, 0.01);
    EXPECT_NEAR(at_hi, 1.0 - cfg.outer_quantile, 0.01);
}

TEST(TentBasis, RejectsThreeVaryingFeatures)
{
    const auto d = uniform_design(100, 3, 0.0, 1.0, 6);
    EXPECT_THROW(FeatureBasis::fit(RegressionBasis{}, d.size(), 3, [&](std::size_t i) { return d[i]; }), InvalidArgument);
}

TEST(FeatureBasisTest, ConstantFeaturesAreDropped)
{
    Design d{2, {}};
    for (int i = 0; i < 50; ++i) {
        d.flat.push_back(0.1 * i);
        d.flat.push_back(4.0);
    }
    const auto fb = FeatureBasis::fit(RegressionBasis{}, d.size(), 2, [&](std::size_t i) { return d[i]; });
    EXPECT_EQ(fb.active_features(), 1u);
    Design c{1, std::vector<double>(20, 2.0)};
    const auto fc = FeatureBasis::fit(RegressionBasis{}, c.size(), 1, [&](std::size_t i) { return c[i]; });
    EXPECT_TRUE(fc.constant_only());
    EXPECT_EQ(fc.size(), 1u);
}

TEST(PolynomialBasis, SizeIsTheNumberOfMonomials)
{
    RegressionBasis cfg;
    cfg.kind = RegressionBasis::Kind::polynomial;
    for (std::size_t dim : {1u, 2u, 3u}) {
        const auto d = uniform_design(200, dim, -1.0, 1.0, 7 + dim);
        const auto fb = FeatureBasis::fit(cfg, d.size(), dim, [&](std::size_t i) { return d[i]; });
        const std::size_t expect = dim == 1 ? 4 : dim == 2 ? 10 : 20; // C(3 + dim, dim)
        EXPECT_EQ(fb.size(), expect) << dim;
    }
}

TEST(PolynomialBasis, ReproducesCubics)
{
    RegressionBasis cfg;
    cfg.kind = RegressionBasis::Kind::polynomial;
    const auto d = uniform_design(1000, 1, 2.0, 5.0, 9);
    const auto [fb, res] = fit(cfg, d, [](auto x) { return x[0] * x[0] * x[0] - x[0]; });
    const double x = 3.3;
    EXPECT_NEAR(predict(fb, res.coeffs, std::span<const double>(&x, 1)), x * x * x - x, 1e-8);
}

TEST(LeastSquaresTest, RidgeIsAppliedPastTheConditionLimit)
{
    // three distinct design points for sixteen hats: the Gram matrix is singular
    RegressionBasis cfg;
    cfg.box = std::vector<std::pair<double, double>>{{0.0, 3.0}};
    Design d{1, {}};
    for (int i = 0; i < 300; ++i) d.flat.push_back(static_cast<double>(i % 3));
    const auto [fb, res] = fit(cfg, d, [](auto x) { return x[0]; });
    EXPECT_TRUE(res.regularized);
    EXPECT_TRUE(res.coeffs.allFinite());

    const auto wide = uniform_design(2000, 1, 0.0, 3.0, 10);
    const auto [fb2, res2] = fit(cfg, wide, [](auto x) { return x[0]; });
    EXPECT_FALSE(res2.regularized);
    EXPECT_LT(res2.condition, cfg.max_condition);
}

TEST(LeastSquaresTest, MergeEqualsSequentialAccumulation)
{
    const auto d = uniform_design(400, 1, -1.0, 1.0, 11);
    const auto fb = FeatureBasis::fit(RegressionBasis{}, d.size(), 1, [&](std::size_t i) { return d[i]; });
    LeastSquares all(fb.size(), 1), a(fb.size(), 1), b(fb.size(), 1);
    std::vector<std::size_t> idx(2);
    std::vector<double> val(2);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const std::size_t nnz = fb.eval(d[i], idx.data(), val.data());
        const double y = std::sin(3.0 * d[i][0]);
        all.add(idx.data(), val.data(), nnz, std::span<const double>(&y, 1));
        (i < 200 ? a : b).add(idx.data(), val.data(), nnz, std::span<const double>(&y, 1));
    }
    a.merge(b);
    EXPECT_EQ(a.count(), all.count());
    const auto r1 = all.solve(1e8), r2 = a.solve(1e8);
    EXPECT_LT((r1.coeffs - r2.coeffs).cwiseAbs().maxCoeff(), 1e-10);
}
