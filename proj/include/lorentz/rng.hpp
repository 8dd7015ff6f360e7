#pragma once

#include <cstdint>
#include <limits>

namespace lorentz {

/// SplitMix64 finalizer; bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z)
{
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Derive an independent stream key from a master seed and a list of counters.
constexpr std::uint64_t stream_key(std::uint64_t seed) { return mix64(seed); }

template <class... Rest>
constexpr std::uint64_t stream_key(std::uint64_t seed, std::uint64_t first, Rest... rest)
{
    return stream_key(mix64(seed ^ mix64(first + 0x632BE59BD9B4E019ull)), static_cast<std::uint64_t>(rest)...);
}

/*!
 * Counter-based generator: the n-th output is a pure function of (key, n).
 *
 * Streams obtained from stream_key(seed, trajectory, ...) are independent of
 * the order in which work items are scheduled, which is what keeps ensemble
 * results identical for any thread count. Satisfies
 * UniformRandomBitGenerator so the <random> distributions accept it.
 */
class CounterRng {
  public:
    using result_type = std::uint64_t;

    explicit constexpr CounterRng(std::uint64_t key) : key_(key) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    constexpr result_type operator()()
    {
        ++counter_;
        return mix64(key_ ^ mix64(counter_));
    }

    /// Uniform double in [0, 1).
    constexpr double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    constexpr double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    constexpr std::uint64_t counter() const { return counter_; }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace lorentz
