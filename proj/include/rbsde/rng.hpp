#pragma once

#include <cstdint>
#include <random>

namespace rbsde {

// Independent substreams: one per (master seed, path index, tag). Draws for a
// path never depend on how paths are scheduled across threads.
enum class StreamTag : std::uint64_t {
    brownian = 1,
    jumps = 2,
    explore = 3,
    probe = 4,
    thinning = 5,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t stream_key(std::uint64_t seed, std::uint64_t path, StreamTag tag) noexcept
{
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ (path + 0x632be59bd9b4e019ULL));
    h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
    return h;
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t path, StreamTag tag)
{
    return std::mt19937_64(stream_key(seed, path, tag));
}

// A single uniform draw in [0, 1) indexed by (seed, path, tag, k), for
// per-node draws that must not depend on evaluation order.
constexpr double uniform_at(std::uint64_t seed, std::uint64_t path, StreamTag tag, std::uint64_t k) noexcept
{
    const std::uint64_t h = splitmix64(stream_key(seed, path, tag) ^ splitmix64(k));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

} // namespace rbsde
