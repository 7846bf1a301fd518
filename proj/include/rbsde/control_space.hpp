#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "rbsde/errors.hpp"

namespace rbsde {

// Scalar control set A: either a finite list of actions or a closed interval.
class ControlSpace {
public:
    enum class Kind { finite, interval };

    static ControlSpace finite(std::vector<double> actions, std::vector<std::string> labels = {})
    {
        require(!actions.empty(), "control space: finite action set must be nonempty");
        for (double a : actions) require(std::isfinite(a), "control space: actions must be finite");
        auto sorted = actions;
        std::sort(sorted.begin(), sorted.end());
        require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
                "control space: duplicate actions");
        require(labels.empty() || labels.size() == actions.size(),
                "control space: one label per action");
        ControlSpace cs;
        cs.kind_ = Kind::finite;
        cs.actions_ = std::move(actions);
        cs.labels_ = std::move(labels);
        return cs;
    }

    static ControlSpace interval(double lo, double hi)
    {
        require(std::isfinite(lo) && std::isfinite(hi), "control space: interval bounds must be finite");
        require(lo < hi, "control space: interval requires lo < hi");
        ControlSpace cs;
        cs.kind_ = Kind::interval;
        cs.lo_ = lo;
        cs.hi_ = hi;
        return cs;
    }

    Kind kind() const noexcept { return kind_; }
    bool is_finite() const noexcept { return kind_ == Kind::finite; }
    const std::vector<double>& actions() const noexcept { return actions_; }
    const std::vector<std::string>& labels() const noexcept { return labels_; }
    std::size_t size() const noexcept { return actions_.size(); }
    double lo() const noexcept { return is_finite() ? *std::min_element(actions_.begin(), actions_.end()) : lo_; }
    double hi() const noexcept { return is_finite() ? *std::max_element(actions_.begin(), actions_.end()) : hi_; }

    bool contains(double a) const
    {
        if (is_finite()) return index_of(a).has_value();
        return a >= lo_ && a <= hi_;
    }

    std::optional<std::size_t> index_of(double a) const
    {
        for (std::size_t i = 0; i < actions_.size(); ++i)
            if (actions_[i] == a) return i;
        return std::nullopt;
    }

    // Interval control sets are discretized uniformly with this many actions
    // wherever a finite enumeration is needed (finite-difference oracle).
    std::vector<double> enumerate(std::size_t interval_points = 33) const
    {
        if (is_finite()) return actions_;
        std::vector<double> out(interval_points);
        for (std::size_t i = 0; i < interval_points; ++i)
            out[i] = lo_ + (hi_ - lo_) * static_cast<double>(i) / static_cast<double>(interval_points - 1);
        return out;
    }

private:
    Kind kind_ = Kind::finite;
    std::vector<double> actions_;
    std::vector<std::string> labels_;
    double lo_ = 0.0;
    double hi_ = 0.0;
};

// A node of a quadrature rule over A for lambda(da): action and mass.
struct QuadratureNode {
    double action;
    double mass;
};

// lambda(da) = lambda_total * mark_dist(da). For finite A the mark distribution
// is a probability vector with strictly positive entries (full support); for
// an interval it is uniform.
class JumpMeasure {
public:
    JumpMeasure(ControlSpace space, double lambda_total, std::vector<double> mark_weights = {})
        : space_(std::move(space)), lambda_total_(lambda_total)
    {
        require(std::isfinite(lambda_total) && lambda_total > 0.0, "jump measure: lambda_total must be > 0");
        if (space_.is_finite()) {
            if (mark_weights.empty()) mark_weights.assign(space_.size(), 1.0);
            require(mark_weights.size() == space_.size(), "jump measure: one mark weight per action");
            for (double w : mark_weights)
                require(std::isfinite(w) && w > 0.0, "jump measure: mark weights must be > 0 (full support)");
            const double s = std::accumulate(mark_weights.begin(), mark_weights.end(), 0.0);
            for (double& w : mark_weights) w /= s;
            probs_ = std::move(mark_weights);
        } else {
            require(mark_weights.empty(), "jump measure: interval marks are uniform");
        }
        build_quadrature();
    }

    const ControlSpace& space() const noexcept { return space_; }
    double total() const noexcept { return lambda_total_; }
    const std::vector<double>& mark_probabilities() const noexcept { return probs_; }

    // Exact sum over finite A, 32-node Gauss-Legendre over an interval.
    const std::vector<QuadratureNode>& quadrature() const noexcept { return quad_; }

    template <class Rng>
    double sample_mark(Rng& rng) const
    {
        if (space_.is_finite()) {
            std::discrete_distribution<std::size_t> d(probs_.begin(), probs_.end());
            return space_.actions()[d(rng)];
        }
        std::uniform_real_distribution<double> u(space_.lo(), space_.hi());
        return u(rng);
    }

    JumpMeasure with_total(double lambda_total) const
    {
        JumpMeasure m = *this;
        require(std::isfinite(lambda_total) && lambda_total > 0.0, "jump measure: lambda_total must be > 0");
        m.lambda_total_ = lambda_total;
        m.build_quadrature();
        return m;
    }

private:
    void build_quadrature()
    {
        quad_.clear();
        if (space_.is_finite()) {
            for (std::size_t i = 0; i < space_.size(); ++i)
                quad_.push_back({space_.actions()[i], lambda_total_ * probs_[i]});
            return;
        }
        using rule = boost::math::quadrature::gauss<double, 32>;
        const double mid = 0.5 * (space_.lo() + space_.hi());
        const double half = 0.5 * (space_.hi() - space_.lo());
        // boost stores the nonnegative abscissae only; the rule is symmetric.
        const auto& x = rule::abscissa();
        const auto& w = rule::weights();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double mass = lambda_total_ * 0.5 * w[i]; // uniform density 1/(2 half) times half
            quad_.push_back({mid - half * x[i], mass});
            if (x[i] != 0.0) quad_.push_back({mid + half * x[i], mass});
        }
        std::sort(quad_.begin(), quad_.end(), [](auto& l, auto& r) { return l.action < r.action; });
    }

    ControlSpace space_;
    double lambda_total_;
    std::vector<double> probs_;
    std::vector<QuadratureNode> quad_;
};

} // namespace rbsde
