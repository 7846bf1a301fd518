#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "rbsde/errors.hpp"

namespace rbsde {

// Declares which finite features of the state history the coefficients may
// read. Layout of the flat feature vector:
//   [ x (n) | sup_{s<=t}|x_s| (1)? | time average (n)? | EWMA (n)? | lags (m*n) ]
// Every feature is 1-Lipschitz in the sup norm of the path.
struct SummarySpec {
    std::size_t dim_state = 1;
    bool running_sup = false;
    bool running_average = false;
    double ewma_rate = 0.0; // 0 disables the exponential moving average
    std::vector<double> lags;

    bool markovian() const noexcept
    {
        return !running_sup && !running_average && ewma_rate <= 0.0 && lags.empty();
    }

    std::size_t sup_offset() const noexcept { return dim_state; }
    std::size_t avg_offset() const noexcept { return dim_state + (running_sup ? 1 : 0); }
    std::size_t ewma_offset() const noexcept { return avg_offset() + (running_average ? dim_state : 0); }
    std::size_t lag_offset() const noexcept { return ewma_offset() + (ewma_rate > 0.0 ? dim_state : 0); }
    std::size_t size() const noexcept { return lag_offset() + lags.size() * dim_state; }

    void initialize(std::span<const double> x0, std::span<double> out) const
    {
        std::copy(x0.begin(), x0.end(), out.begin());
        if (running_sup) out[sup_offset()] = norm(x0);
        if (running_average) std::copy(x0.begin(), x0.end(), out.begin() + static_cast<std::ptrdiff_t>(avg_offset()));
        if (ewma_rate > 0.0) std::copy(x0.begin(), x0.end(), out.begin() + static_cast<std::ptrdiff_t>(ewma_offset()));
        for (std::size_t j = 0; j < lags.size(); ++j)
            std::copy(x0.begin(), x0.end(), out.begin() + static_cast<std::ptrdiff_t>(lag_offset() + j * dim_state));
    }

    // Features at node k+1 from features at node k and the new state.
    // history(j) returns the realized state at node j <= k.
    void advance(std::span<const double> prev, std::span<const double> x_next, std::size_t next_node, double dt,
                 const std::function<std::span<const double>(std::size_t)>& history, std::span<double> out) const
    {
        const std::size_t n = dim_state;
        std::copy(x_next.begin(), x_next.end(), out.begin());
        if (running_sup) out[sup_offset()] = std::max(prev[sup_offset()], norm(x_next));
        if (running_average) {
            const double tk = static_cast<double>(next_node - 1) * dt;
            const double tn = static_cast<double>(next_node) * dt;
            for (std::size_t i = 0; i < n; ++i)
                out[avg_offset() + i] = (prev[avg_offset() + i] * tk + prev[i] * dt) / tn;
        }
        if (ewma_rate > 0.0) {
            const double decay = std::exp(-ewma_rate * dt);
            for (std::size_t i = 0; i < n; ++i)
                out[ewma_offset() + i] = decay * prev[ewma_offset() + i] + (1.0 - decay) * prev[i];
        }
        for (std::size_t j = 0; j < lags.size(); ++j) {
            const auto back = static_cast<std::size_t>(std::llround(lags[j] / dt));
            const std::size_t node = next_node > back ? next_node - back : 0;
            std::span<const double> lagged = node == next_node ? x_next : history(node);
            std::copy(lagged.begin(), lagged.end(), out.begin() + static_cast<std::ptrdiff_t>(lag_offset() + j * n));
        }
    }

    static double norm(std::span<const double> x)
    {
        double s = 0.0;
        for (double v : x) s += v * v;
        return std::sqrt(s);
    }
};

// Read-only view of the summary of a path up to time t, handed to the
// coefficient functions.
struct PathSummary {
    const SummarySpec* spec = nullptr;
    std::span<const double> features;

    double x(std::size_t i = 0) const { return features[i]; }
    std::span<const double> state() const { return features.first(spec->dim_state); }
    double sup() const { return features[spec->sup_offset()]; }
    double average(std::size_t i = 0) const { return features[spec->avg_offset() + i]; }
    double ewma(std::size_t i = 0) const { return features[spec->ewma_offset() + i]; }
    double lag(std::size_t j, std::size_t i = 0) const { return features[spec->lag_offset() + j * spec->dim_state + i]; }
};

} // namespace rbsde
