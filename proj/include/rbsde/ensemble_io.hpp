#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>

#include "rbsde/errors.hpp"
#include "rbsde/forward_sim.hpp"

namespace rbsde {

inline constexpr std::array<char, 16> ensemble_magic{'R', 'B', 'S', 'D', 'E', '-', 'E', 'N',
                                                     'S', '-', 'v', '1', '\0', '\0', '\0', '\0'};

// One row per (path, node). action is the action held on the step leaving the
// node (the last step's action at t = T); jump_flag marks a change of action
// at the node.
inline void write_ensemble_csv(const PathEnsemble& ens, std::ostream& os,
                               std::size_t max_paths = std::numeric_limits<std::size_t>::max())
{
    const TimeGrid& g = ens.grid();
    const auto prec = os.precision(17);
    os << "path_id,t";
    for (std::size_t i = 0; i < ens.dim_state(); ++i) os << ",x" << i;
    os << ",action,jump_flag\n";
    for (std::size_t p = 0; p < std::min(max_paths, ens.n_paths()); ++p) {
        double prev = ens.a0;
        for (std::size_t k = 0; k < g.n_nodes(); ++k) {
            const double a = ens.action(p, std::min(k, g.n_steps() - 1));
            const bool jumped = k < g.n_steps() && a != prev;
            os << p << ',' << g.time(k);
            for (double x : ens.state(p, k)) os << ',' << x;
            os << ',' << a << ',' << (jumped ? 1 : 0) << '\n';
            prev = a;
        }
    }
    os.precision(prec);
}

namespace detail {

template <class T>
void put(std::ostream& os, const T& v)
{
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is)
{
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw InvalidArgument("ensemble cache: truncated file");
    return v;
}

inline void put_doubles(std::ostream& os, std::span<const double> v)
{
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void get_doubles(std::istream& is, std::span<double> v)
{
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw InvalidArgument("ensemble cache: truncated file");
}

} // namespace detail

// Binary cache: magic, header, then per path the states, features (path
// dependent summaries only), increments, actions and divergence flag. Jump
// trajectories and the jump measure are not cached.
inline void write_ensemble_binary(const PathEnsemble& ens, std::ostream& os)
{
    const TimeGrid& g = ens.grid();
    os.write(ensemble_magic.data(), ensemble_magic.size());
    detail::put<std::uint64_t>(os, ens.n_paths());
    detail::put<std::uint64_t>(os, g.n_steps());
    detail::put<std::uint64_t>(os, ens.dim_state());
    detail::put<std::uint64_t>(os, ens.dim_noise());
    detail::put<std::uint64_t>(os, ens.feature_dim());
    detail::put<std::uint64_t>(os, ens.seed());
    detail::put<double>(os, g.t_end());
    detail::put<double>(os, ens.a0);
    const bool feats = !ens.summary_spec().markovian();
    for (std::size_t p = 0; p < ens.n_paths(); ++p) {
        for (std::size_t k = 0; k < g.n_nodes(); ++k) detail::put_doubles(os, ens.state(p, k));
        if (feats)
            for (std::size_t k = 0; k < g.n_nodes(); ++k) detail::put_doubles(os, ens.features(p, k));
        for (std::size_t k = 0; k < g.n_steps(); ++k) detail::put_doubles(os, ens.increment(p, k));
        for (std::size_t k = 0; k < g.n_steps(); ++k) detail::put<double>(os, ens.action(p, k));
        detail::put<std::uint8_t>(os, ens.divergent(p) ? 1 : 0);
    }
    if (!os) throw NumericalFailure("ensemble cache: write failed");
}

// spec supplies the summary layout and must match the cached dimensions.
inline PathEnsemble read_ensemble_binary(std::istream& is, const ProblemSpec& spec,
                                         std::optional<JumpMeasure> measure = std::nullopt)
{
    std::array<char, 16> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != ensemble_magic) throw InvalidArgument("ensemble cache: bad magic header");
    const auto n_paths = detail::get<std::uint64_t>(is);
    const auto n_steps = detail::get<std::uint64_t>(is);
    const auto dim_state = detail::get<std::uint64_t>(is);
    const auto dim_noise = detail::get<std::uint64_t>(is);
    const auto feat_dim = detail::get<std::uint64_t>(is);
    const auto seed = detail::get<std::uint64_t>(is);
    const auto t_end = detail::get<double>(is);
    const auto a0 = detail::get<double>(is);
    require(dim_state == spec.dim_state && dim_noise == spec.dim_noise && feat_dim == spec.summary.size(),
            "ensemble cache: dimensions do not match the problem");
    PathEnsemble ens(TimeGrid(t_end, n_steps), n_paths, spec, seed);
    ens.a0 = a0;
    ens.measure = std::move(measure);
    const bool feats = !spec.summary.markovian();
    for (std::size_t p = 0; p < n_paths; ++p) {
        for (std::size_t k = 0; k <= n_steps; ++k) detail::get_doubles(is, ens.state(p, k));
        if (feats)
            for (std::size_t k = 0; k <= n_steps; ++k) detail::get_doubles(is, ens.features(p, k));
        for (std::size_t k = 0; k < n_steps; ++k) detail::get_doubles(is, ens.increment(p, k));
        for (std::size_t k = 0; k < n_steps; ++k) ens.set_action(p, k, detail::get<double>(is));
        if (detail::get<std::uint8_t>(is)) ens.mark_divergent(p);
    }
    return ens;
}

} // namespace rbsde
