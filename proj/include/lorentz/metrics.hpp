#pragma once

#include "lorentz/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lorentz {

enum class Metric { L1, L2, KS, TV };

inline std::string metric_name(Metric m)
{
    switch (m) {
    case Metric::L1: return "L1";
    case Metric::L2: return "L2";
    case Metric::KS: return "KS";
    case Metric::TV: return "TV";
    }
    return "?";
}

/*!
 * A distribution on a fixed partition: bin masses and the common cell
 * measure. Monte Carlo inputs also keep the bin index of every sample so that
 * distances can carry a bootstrap error bar.
 */
struct Binned {
    std::vector<double> mass;
    double cell = 1.0;
    std::vector<std::size_t> sample_bins;

    bool monte_carlo() const { return !sample_bins.empty(); }
    std::size_t bins() const { return mass.size(); }

    static Binned from_masses(std::vector<double> mass, double cell = 1.0)
    {
        Binned b;
        b.mass = std::move(mass);
        b.cell = cell;
        return b;
    }

    static Binned from_samples(std::vector<std::size_t> bins_of_samples, std::size_t bins, double cell = 1.0)
    {
        if (bins_of_samples.empty()) throw std::invalid_argument("empty sample");
        Binned b;
        b.cell = cell;
        b.mass.assign(bins, 0.0);
        for (std::size_t i : bins_of_samples) {
            if (i >= bins) throw std::out_of_range("sample bin index out of range");
            b.mass[i] += 1.0;
        }
        for (double& m : b.mass) m /= static_cast<double>(bins_of_samples.size());
        b.sample_bins = std::move(bins_of_samples);
        return b;
    }
};

struct Distance {
    Metric metric = Metric::L1;
    double value = 0.0;
    double error = 0.0;  // bootstrap standard deviation, 0 for deterministic inputs
    std::size_t resamples = 0;
};

namespace detail {

inline double binned_metric(const std::vector<double>& a, const std::vector<double>& b, double cell, Metric m)
{
    double s = 0.0;
    switch (m) {
    case Metric::L1:
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
        return s;
    case Metric::TV:
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
        return 0.5 * s;
    case Metric::L2:
        // densities mass / cell, integrated over the cells
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(s / cell);
    case Metric::KS: {
        double ca = 0.0, cb = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            ca += a[i];
            cb += b[i];
            s = std::max(s, std::abs(ca - cb));
        }
        return s;
    }
    }
    return s;
}

// Multinomial resample of a Monte Carlo input.
inline std::vector<double> resample(const Binned& b, CounterRng& rng)
{
    std::vector<double> m(b.bins(), 0.0);
    const std::size_t n = b.sample_bins.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
        m[b.sample_bins[j]] += 1.0;
    }
    for (double& x : m) x /= static_cast<double>(n);
    return m;
}

}  // namespace detail

/*!
 * Distance between two distributions on the same partition.
 *
 * L1 and TV act on bin masses, L2 on densities mass / cell, KS on the
 * cumulative masses in bin order. If either input is Monte Carlo the error
 * bar is the standard deviation of the metric over bootstrap resamples.
 */
inline Distance compare_distributions(const Binned& a, const Binned& b, Metric metric, std::size_t resamples = 200,
                                      std::uint64_t seed = 1)
{
    if (a.bins() != b.bins() || a.bins() == 0) throw std::invalid_argument("distribution shapes differ");
    if (a.cell != b.cell) throw std::invalid_argument("distribution cells differ");
    Distance d;
    d.metric = metric;
    d.value = detail::binned_metric(a.mass, b.mass, a.cell, metric);
    if (!a.monte_carlo() && !b.monte_carlo()) return d;
    d.resamples = resamples;
    double s = 0.0, s2 = 0.0;
    for (std::size_t r = 0; r < resamples; ++r) {
        CounterRng rng(stream_key(seed, 0xb007ull, r));
        const auto ra = a.monte_carlo() ? detail::resample(a, rng) : a.mass;
        const auto rb = b.monte_carlo() ? detail::resample(b, rng) : b.mass;
        const double v = detail::binned_metric(ra, rb, a.cell, metric);
        s += v;
        s2 += v * v;
    }
    if (resamples > 1) {
        const double n = static_cast<double>(resamples);
        d.error = std::sqrt(std::max(0.0, (s2 - s * s / n) / (n - 1.0)));
    }
    return d;
}

/// Two-sample Kolmogorov-Smirnov statistic on raw values.
inline double ks_statistic(std::vector<double> a, std::vector<double> b)
{
    if (a.empty() || b.empty()) throw std::invalid_argument("empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= x) ++i;
        while (j < b.size() && b[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return d;
}

/// Asymptotic critical value of the two-sample KS statistic at the given level.
inline double ks_critical(std::size_t n, std::size_t m, double level = 0.01)
{
    if (n == 0 || m == 0 || !(level > 0.0 && level < 1.0)) throw std::invalid_argument("bad KS parameters");
    const double c = std::sqrt(-0.5 * std::log(level / 2.0));
    const double dn = static_cast<double>(n), dm = static_cast<double>(m);
    return c * std::sqrt((dn + dm) / (dn * dm));
}

}  // namespace lorentz
