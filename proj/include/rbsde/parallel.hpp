#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace rbsde {

// Runs fn(i) for i in [0, n) on up to `threads` workers in contiguous chunks.
// Callers keep per-index outputs and reduce them afterwards in index order,
// so results do not depend on the thread count.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn)
{
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
        const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// Mean and standard error with Neumaier-compensated sums, in index order.
struct SampleStats {
    double mean = 0.0;
    double std_error = 0.0;
    double variance = 0.0;
    std::size_t count = 0;
};

class CompensatedSum {
public:
    void add(double v) noexcept
    {
        const double t = sum_ + v;
        if (std::abs(sum_) >= std::abs(v))
            comp_ += (sum_ - t) + v;
        else
            comp_ += (v - t) + sum_;
        sum_ = t;
    }
    double value() const noexcept { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

template <class Range>
SampleStats sample_stats(const Range& values)
{
    SampleStats s;
    CompensatedSum sum;
    for (double v : values) {
        sum.add(v);
        ++s.count;
    }
    if (s.count == 0) return s;
    s.mean = sum.value() / static_cast<double>(s.count);
    CompensatedSum sq;
    for (double v : values) sq.add((v - s.mean) * (v - s.mean));
    if (s.count > 1) {
        s.variance = sq.value() / static_cast<double>(s.count - 1);
        s.std_error = std::sqrt(s.variance / static_cast<double>(s.count));
    }
    return s;
}

} // namespace rbsde
