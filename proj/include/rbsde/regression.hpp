#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rbsde/errors.hpp"

namespace rbsde {

// Configuration of the least-squares basis used for conditional expectations.
//  - polynomial: monomials of total degree <= degree in standardized features;
//  - tent: piecewise-linear hat functions (tensor product for two features)
//    with knots at empirical quantiles of the node's design, or uniform on a
//    declared box. Hats form a partition of unity, so constants are exact.
struct RegressionBasis {
    enum class Kind { polynomial, tent };
    Kind kind = Kind::tent;
    int degree = 3;
    int knots = 16;
    // quantile levels of the knots: uniform, or cosine-spaced (denser in the tails)
    bool tail_dense_knots = true;
    double outer_quantile = 0.002;
    std::optional<std::vector<std::pair<double, double>>> box;
    int action_degree = 2; // interval control sets: Legendre degree in the action
    double max_condition = 1e8;
};

// Basis fitted to the design of one regression (one time node): knots or
// standardization are data-dependent, then frozen.
class FeatureBasis {
public:
    using DesignFn = std::function<std::span<const double>(std::size_t)>;

    static FeatureBasis fit(const RegressionBasis& cfg, std::size_t n_points, std::size_t dim, const DesignFn& point)
    {
        require(n_points > 0, "regression: empty design");
        FeatureBasis fb;
        fb.kind_ = cfg.kind;
        fb.dim_ = dim;
        // drop features that do not vary on the design
        std::vector<double> lo(dim, std::numeric_limits<double>::infinity()), hi(dim, -lo[0]);
        std::vector<double> mean(dim, 0.0), sq(dim, 0.0);
        for (std::size_t i = 0; i < n_points; ++i) {
            auto x = point(i);
            for (std::size_t j = 0; j < dim; ++j) {
                lo[j] = std::min(lo[j], x[j]);
                hi[j] = std::max(hi[j], x[j]);
                mean[j] += x[j];
            }
        }
        for (std::size_t j = 0; j < dim; ++j) mean[j] /= static_cast<double>(n_points);
        for (std::size_t j = 0; j < dim; ++j) {
            const double spread = hi[j] - lo[j];
            if (spread > 1e-10 * (1.0 + std::abs(mean[j]))) fb.active_.push_back(j);
        }

        if (fb.kind_ == RegressionBasis::Kind::tent && fb.active_.size() > 2)
            throw InvalidArgument("regression: tent basis supports at most two varying features");

        if (fb.kind_ == RegressionBasis::Kind::polynomial) {
            for (std::size_t i = 0; i < n_points; ++i) {
                auto x = point(i);
                for (std::size_t j : fb.active_) sq[j] += (x[j] - mean[j]) * (x[j] - mean[j]);
            }
            for (std::size_t j : fb.active_) {
                fb.center_.push_back(mean[j]);
                fb.scale_.push_back(std::sqrt(sq[j] / static_cast<double>(n_points)));
            }
            fb.build_exponents(cfg.degree);
            fb.size_ = fb.active_.empty() ? 1 : fb.exponents_.size() / fb.active_.size();
            return fb;
        }

        // tent knots
        std::vector<double> scratch(n_points);
        for (std::size_t ai = 0; ai < fb.active_.size(); ++ai) {
            const std::size_t j = fb.active_[ai];
            std::vector<double> k;
            const auto nk = static_cast<std::size_t>(std::max(2, cfg.knots));
            if (cfg.box && j < cfg.box->size()) {
                const auto [a, b] = (*cfg.box)[j];
                for (std::size_t q = 0; q < nk; ++q)
                    k.push_back(a + (b - a) * static_cast<double>(q) / static_cast<double>(nk - 1));
            } else {
                for (std::size_t i = 0; i < n_points; ++i) scratch[i] = point(i)[j];
                for (std::size_t q = 0; q < nk; ++q) {
                    double level = static_cast<double>(q) / static_cast<double>(nk - 1);
                    if (cfg.tail_dense_knots) level = 0.5 * (1.0 - std::cos(std::numbers::pi * level));
                    // outer knots sit inside the sample; hats are flat beyond them
                    level = cfg.outer_quantile + (1.0 - 2.0 * cfg.outer_quantile) * level;
                    const auto pos = static_cast<std::size_t>(std::llround(level * static_cast<double>(n_points - 1)));
                    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(pos), scratch.end());
                    k.push_back(scratch[pos]);
                }
                std::sort(k.begin(), k.end());
            }
            const double tol = 1e-9 * (hi[j] - lo[j]);
            std::vector<double> dedup;
            for (double v : k)
                if (dedup.empty() || v - dedup.back() > tol) dedup.push_back(v);
            if (dedup.size() < 2) dedup = {lo[j], hi[j]};
            fb.knots_.push_back(std::move(dedup));
        }
        fb.size_ = 1;
        for (const auto& k : fb.knots_) fb.size_ *= k.size();
        return fb;
    }

    std::size_t size() const noexcept { return size_; }
    std::size_t max_nonzeros() const noexcept
    {
        if (kind_ == RegressionBasis::Kind::polynomial) return size_;
        return std::size_t{1} << knots_.size();
    }
    std::size_t active_features() const noexcept { return active_.size(); }
    bool constant_only() const noexcept { return active_.empty(); }

    // Sparse evaluation: writes (index, value) pairs, returns their count.
    std::size_t eval(std::span<const double> x, std::size_t* idx, double* val) const
    {
        if (kind_ == RegressionBasis::Kind::polynomial) {
            std::array<std::array<double, 16>, 8> pw{};
            const std::size_t na = active_.size();
            for (std::size_t a = 0; a < na; ++a) {
                const double z = (x[active_[a]] - center_[a]) / scale_[a];
                pw[a][0] = 1.0;
                for (std::size_t e = 1; e <= max_degree_; ++e) pw[a][e] = pw[a][e - 1] * z;
            }
            for (std::size_t i = 0; i < size_; ++i) {
                double v = 1.0;
                for (std::size_t a = 0; a < na; ++a) v *= pw[a][exponents_[i * na + a]];
                idx[i] = i;
                val[i] = v;
            }
            return size_;
        }
        if (knots_.empty()) {
            idx[0] = 0;
            val[0] = 1.0;
            return 1;
        }
        std::array<std::size_t, 2> lo_i{};
        std::array<double, 2> w_hi{};
        for (std::size_t a = 0; a < knots_.size(); ++a) {
            const auto& k = knots_[a];
            const double v = std::clamp(x[active_[a]], k.front(), k.back());
            auto it = std::upper_bound(k.begin(), k.end(), v);
            std::size_t i = it == k.begin() ? 0 : static_cast<std::size_t>(it - k.begin()) - 1;
            i = std::min(i, k.size() - 2);
            lo_i[a] = i;
            w_hi[a] = (v - k[i]) / (k[i + 1] - k[i]);
        }
        if (knots_.size() == 1) {
            idx[0] = lo_i[0];
            val[0] = 1.0 - w_hi[0];
            idx[1] = lo_i[0] + 1;
            val[1] = w_hi[0];
            return 2;
        }
        const std::size_t n1 = knots_[1].size();
        std::size_t c = 0;
        for (std::size_t d0 = 0; d0 < 2; ++d0)
            for (std::size_t d1 = 0; d1 < 2; ++d1) {
                idx[c] = (lo_i[0] + d0) * n1 + (lo_i[1] + d1);
                val[c] = (d0 ? w_hi[0] : 1.0 - w_hi[0]) * (d1 ? w_hi[1] : 1.0 - w_hi[1]);
                ++c;
            }
        return c;
    }

private:
    void build_exponents(int degree)
    {
        const std::size_t na = active_.size();
        max_degree_ = static_cast<std::size_t>(std::clamp(degree, 0, 15));
        require(na <= 8, "regression: polynomial basis supports at most 8 varying features");
        std::vector<std::size_t> e(na, 0);
        std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t pos, std::size_t left) {
            if (pos == na) {
                exponents_.insert(exponents_.end(), e.begin(), e.end());
                return;
            }
            for (std::size_t k = 0; k <= left; ++k) {
                e[pos] = k;
                rec(pos + 1, left - k);
            }
        };
        if (na == 0) return;
        rec(0, max_degree_);
    }

    RegressionBasis::Kind kind_ = RegressionBasis::Kind::tent;
    std::size_t dim_ = 0;
    std::size_t size_ = 1;
    std::vector<std::size_t> active_;
    std::vector<double> center_, scale_;
    std::vector<std::size_t> exponents_;
    std::size_t max_degree_ = 0;
    std::vector<std::vector<double>> knots_;
};

// Normal-equation accumulator for several targets sharing one design.
class LeastSquares {
public:
    LeastSquares(std::size_t n_basis, std::size_t n_targets)
        : gram_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_basis), static_cast<Eigen::Index>(n_basis))),
          rhs_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_basis), static_cast<Eigen::Index>(n_targets))),
          sum_sq_(static_cast<Eigen::Index>(n_targets)), n_targets_(n_targets)
    {
        sum_sq_.setZero();
    }

    void add(const std::size_t* idx, const double* val, std::size_t nnz, std::span<const double> targets)
    {
        for (std::size_t a = 0; a < nnz; ++a) {
            const auto ia = static_cast<Eigen::Index>(idx[a]);
            for (std::size_t b = 0; b < nnz; ++b) gram_(ia, static_cast<Eigen::Index>(idx[b])) += val[a] * val[b];
            for (std::size_t r = 0; r < n_targets_; ++r) rhs_(ia, static_cast<Eigen::Index>(r)) += val[a] * targets[r];
        }
        for (std::size_t r = 0; r < n_targets_; ++r)
            sum_sq_(static_cast<Eigen::Index>(r)) += targets[r] * targets[r];
        ++count_;
    }

    void merge(const LeastSquares& other)
    {
        gram_ += other.gram_;
        rhs_ += other.rhs_;
        sum_sq_ += other.sum_sq_;
        count_ += other.count_;
    }

    struct Result {
        Eigen::MatrixXd coeffs; // n_basis x n_targets
        double condition = 1.0;
        bool regularized = false;
        std::vector<double> residual_rms; // per target
    };

    // Solves the normal equations; past max_condition a ridge term brings the
    // condition number back to max_condition.
    Result solve(double max_condition) const
    {
        Result res;
        const auto p = gram_.rows();
        Eigen::MatrixXd g = gram_;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g, Eigen::EigenvaluesOnly);
        const double lmax = eig.eigenvalues().maxCoeff();
        const double lmin = std::max(eig.eigenvalues().minCoeff(), 0.0);
        res.condition = lmin > 0.0 ? lmax / lmin : std::numeric_limits<double>::infinity();
        if (res.condition > max_condition) {
            const double ridge = lmax / max_condition;
            g.diagonal().array() += ridge;
            res.regularized = true;
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
        res.coeffs = ldlt.solve(rhs_);
        for (int r = 0; r < 2; ++r) res.coeffs += ldlt.solve(rhs_ - g * res.coeffs); // iterative refinement
        res.residual_rms.resize(n_targets_);
        const double dof = std::max(1.0, static_cast<double>(count_) - static_cast<double>(p));
        for (std::size_t r = 0; r < n_targets_; ++r) {
            const auto c = res.coeffs.col(static_cast<Eigen::Index>(r));
            const double ss = sum_sq_(static_cast<Eigen::Index>(r)) - 2.0 * c.dot(rhs_.col(static_cast<Eigen::Index>(r)))
                              + c.dot(gram_ * c);
            res.residual_rms[r] = std::sqrt(std::max(0.0, ss) / dof);
        }
        return res;
    }

    std::size_t count() const noexcept { return count_; }

private:
    Eigen::MatrixXd gram_;
    Eigen::MatrixXd rhs_;
    Eigen::VectorXd sum_sq_;
    std::size_t n_targets_;
    std::size_t count_ = 0;
};

} // namespace rbsde
