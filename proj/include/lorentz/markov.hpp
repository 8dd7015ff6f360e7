#pragma once

#include "lorentz/coefficients.hpp"
#include "lorentz/parallel.hpp"
#include "lorentz/rng.hpp"
#include "lorentz/scattering.hpp"
#include "lorentz/vec2.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

namespace lorentz {

/// Collision law of the limiting jump process.
struct MarkovOptions {
    double mu = 1.0;
    /// Divide the rate by |log eps| (density mu eps^{-2a-1} / |log eps|).
    bool log_density = false;
    /// Replace every deflection by 0 (n = 1 collisions).
    bool transparent = false;
    /// Flip the sign of every deflection.
    bool mirror = false;
};

/// Poisson rate of collisions: 2 mu |v| eps^{-2a}, optionally over |log eps|.
inline double collision_rate(const ScatteringModel& m, const MarkovOptions& opt)
{
    if (!m.has_physics()) throw std::invalid_argument("collision rate needs a model built from (eps, alpha, phi0, |v|)");
    if (!(opt.mu >= 0.0)) throw std::invalid_argument("mu must be >= 0");
    double rate = 2.0 * opt.mu * m.speed() * std::pow(m.epsilon(), -2.0 * m.alpha());
    if (opt.log_density) rate /= std::abs(std::log(m.epsilon()));
    return rate;
}

/*!
 * One realization of the backward jump process started at (x, v).
 *
 * collision_times are t_1 > t_2 > ... > t_Q in (0, t); velocities[0] = v and
 * velocities[i] is velocities[i-1] rotated by theta(rho_i). The endpoint is
 * x - v (t - t_1) - v_1 (t_1 - t_2) - ... - v_Q t_Q.
 */
struct MarkovPath {
    double duration = 0.0;
    Vec2 start;
    std::vector<double> collision_times;
    std::vector<double> impact_params;
    std::vector<Vec2> velocities;
    Vec2 end_position;
    Vec2 end_velocity;

    std::size_t collisions() const { return collision_times.size(); }
};

namespace detail {

inline double markov_deflection(const ScatteringModel& m, const MarkovOptions& opt, double rho)
{
    if (opt.transparent) return 0.0;
    const double th = scattering_angle(m, rho).theta;
    return opt.mirror ? -th : th;
}

/// Draw epochs and deflections; calls step(elapsed_since_last, rho) per collision.
template <class Step>
void run_jumps(double rate, double duration, CounterRng& rng, Step&& step)
{
    if (rate <= 0.0) return;
    double s = 0.0;
    for (;;) {
        const double gap = -std::log1p(-rng.uniform()) / rate;
        if (s + gap >= duration) return;
        s += gap;
        step(s, rng.uniform(-1.0, 1.0));
    }
}

}  // namespace detail

/// Sample the backward path of the limiting process (x, v) -> (xi(-t), eta(-t)).
inline MarkovPath sample_path(const ScatteringModel& m, const MarkovOptions& opt, Vec2 x, Vec2 v, double duration,
                              std::uint64_t key)
{
    if (!(duration > 0.0)) throw std::invalid_argument("duration must be > 0");
    MarkovPath p;
    p.duration = duration;
    p.start = x;
    p.velocities.push_back(v);
    CounterRng rng(key);
    const double rate = collision_rate(m, opt);
    std::vector<double> elapsed;
    detail::run_jumps(rate, duration, rng, [&](double s, double rho) {
        elapsed.push_back(s);
        p.collision_times.push_back(duration - s);
        p.impact_params.push_back(rho);
        p.velocities.push_back(rotate(p.velocities.back(), detail::markov_deflection(m, opt, rho)));
    });
    // telescoping sum over the backward legs
    Vec2 xi = x;
    double prev = 0.0;
    for (std::size_t i = 0; i < elapsed.size(); ++i) {
        xi -= (elapsed[i] - prev) * p.velocities[i];
        prev = elapsed[i];
    }
    xi -= (duration - prev) * p.velocities.back();
    p.end_position = xi;
    p.end_velocity = p.velocities.back();
    return p;
}

/// Forward run of the same process: (x, v) at time 0 to the state at time t.
inline std::pair<Vec2, Vec2> simulate_forward(const ScatteringModel& m, const MarkovOptions& opt, Vec2 x, Vec2 v,
                                              double duration, std::uint64_t key, std::size_t* collisions = nullptr)
{
    CounterRng rng(key);
    double prev = 0.0;
    std::size_t q = 0;
    detail::run_jumps(collision_rate(m, opt), duration, rng, [&](double s, double rho) {
        x += (s - prev) * v;
        prev = s;
        v = rotate(v, detail::markov_deflection(m, opt, rho));
        ++q;
    });
    x += (duration - prev) * v;
    if (collisions) *collisions = q;
    return {x, v};
}

/// Angle of a velocity in [0, 2 pi).
inline double velocity_angle(Vec2 v)
{
    double a = std::atan2(v.y, v.x);
    if (a < 0.0) a += 2.0 * std::numbers::pi;
    return a >= 2.0 * std::numbers::pi ? 0.0 : a;
}

/// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a)
{
    a = std::remainder(a, 2.0 * std::numbers::pi);
    return a == -std::numbers::pi ? std::numbers::pi : a;
}

// ---------------------------------------------------------------------------
// Density estimates

struct DensityPoint {
    Vec2 x;
    double angle = 0.0;  // velocity direction, speed is the model's |v|
};

struct DensityEstimate {
    std::vector<DensityPoint> points;
    std::vector<double> value;
    std::vector<double> stderr_;
    std::size_t samples = 0;
};

/*!
 * h(x, v, t) = E f0(xi(-t), eta(-t)) at each requested point, by averaging
 * f0 over independent backward paths. F0 is called as f0(Vec2 x, Vec2 v).
 */
template <class F0>
DensityEstimate estimate_density(const ScatteringModel& m, const MarkovOptions& opt, F0&& f0,
                                 const std::vector<DensityPoint>& points, double t, std::size_t samples,
                                 std::uint64_t seed)
{
    if (samples < 2) throw std::invalid_argument("estimate_density needs at least 2 samples");
    DensityEstimate est;
    est.points = points;
    est.samples = samples;
    est.value.resize(points.size());
    est.stderr_.resize(points.size());
    parallel_for(points.size(), [&](std::size_t j) {
        const Vec2 v = from_polar(m.speed(), points[j].angle);
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < samples; ++i) {
            const auto p = sample_path(m, opt, points[j].x, v, t, stream_key(seed, j, i));
            const double f = f0(p.end_position, p.end_velocity);
            s += f;
            s2 += f * f;
        }
        const double n = static_cast<double>(samples);
        const double mean = s / n;
        est.value[j] = mean;
        est.stderr_[j] = std::sqrt(std::max(0.0, s2 / n - mean * mean) / (n - 1.0));
    });
    return est;
}

/// Final state of forward particles together with the number of collisions.
struct Endpoint {
    Vec2 x0, v0;
    Vec2 x, v;
    std::size_t collisions = 0;
};

/*!
 * Forward-evolve samples drawn from an initial law. Sampler is called as
 * sampler(CounterRng&) -> std::pair<Vec2, Vec2> (position, velocity).
 */
template <class Sampler>
std::vector<Endpoint> sample_endpoints(const ScatteringModel& m, const MarkovOptions& opt, Sampler&& sampler,
                                       double t, std::size_t samples, std::uint64_t seed)
{
    std::vector<Endpoint> out(samples);
    parallel_for(samples, [&](std::size_t i) {
        CounterRng init(stream_key(seed, 0x1417ull, i));
        auto [x0, v0] = sampler(init);
        auto& e = out[i];
        e.x0 = x0;
        e.v0 = v0;
        std::tie(e.x, e.v) = simulate_forward(m, opt, x0, v0, t, stream_key(seed, 0x3a5bull, i), &e.collisions);
    });
    return out;
}

/// Uniform binning on the periodic square [0, L)^2 and on angles [0, 2 pi).
struct HistogramSpec {
    double box = 1.0;
    std::size_t bins_x = 32;
    std::size_t bins_theta = 64;
};

/// Normalized marginals with binomial standard errors.
struct Marginals {
    HistogramSpec spec;
    std::size_t samples = 0;
    std::vector<double> spatial;  // density per unit area, row-major (ix * bins_x + iy)
    std::vector<double> spatial_se;
    std::vector<double> angular;  // density per radian
    std::vector<double> angular_se;
};

inline double wrap_periodic(double x, double L)
{
    double r = std::fmod(x, L);
    if (r < 0.0) r += L;
    return r >= L ? 0.0 : r;
}

inline Marginals histogram(const std::vector<Endpoint>& pts, const HistogramSpec& spec)
{
    if (spec.bins_x == 0 || spec.bins_theta == 0 || !(spec.box > 0.0)) throw std::invalid_argument("bad histogram spec");
    Marginals h;
    h.spec = spec;
    h.samples = pts.size();
    const std::size_t nx = spec.bins_x, nt = spec.bins_theta;
    std::vector<double> cs(nx * nx, 0.0), ca(nt, 0.0);
    for (const auto& p : pts) {
        auto bx = std::min(nx - 1, static_cast<std::size_t>(wrap_periodic(p.x.x, spec.box) / spec.box * nx));
        auto by = std::min(nx - 1, static_cast<std::size_t>(wrap_periodic(p.x.y, spec.box) / spec.box * nx));
        auto ba = std::min(nt - 1, static_cast<std::size_t>(velocity_angle(p.v) / (2.0 * std::numbers::pi) * nt));
        cs[bx * nx + by] += 1.0;
        ca[ba] += 1.0;
    }
    const double n = std::max<double>(1.0, static_cast<double>(pts.size()));
    const double cell = (spec.box / nx) * (spec.box / nx);
    const double arc = 2.0 * std::numbers::pi / nt;
    auto fill = [n](const std::vector<double>& c, double width, std::vector<double>& d, std::vector<double>& se) {
        d.resize(c.size());
        se.resize(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) {
            const double p = c[i] / n;
            d[i] = p / width;
            se[i] = std::sqrt(p * (1.0 - p) / n) / width;
        }
    };
    fill(cs, cell, h.spatial, h.spatial_se);
    fill(ca, arc, h.angular, h.angular_se);
    return h;
}

// ---------------------------------------------------------------------------
// Collision statistics

struct Moment {
    double mean = 0.0;
    double stderr_ = 0.0;
};

struct CollisionStatistics {
    double rate = 0.0;
    std::size_t paths = 0;
    std::size_t collisions = 0;
    Moment mean_collisions;  // per path
    Moment jump2;            // E |v'-v|^2 per collision
    Moment jump4;            // E |v'-v|^4 per collision
    Moment max_identity_error;
    /// E[sum |v_i - v_{i-1}|^2] / (t mu |v| |log eps|), estimates (eps^-2a/|log eps|) int_-1^1 |v'-v|^2 d rho.
    Moment path_second_renormalized;
    /// Quadrature reference for the same quantity.
    double quadrature_second_renormalized = 0.0;
    double quadrature_fourth = 0.0;
};

/// Jump moments measured on sampled backward paths, compared with quadrature.
inline CollisionStatistics collision_statistics(const ScatteringModel& m, const MarkovOptions& opt, double duration,
                                                std::size_t samples, std::uint64_t seed)
{
    if (samples < 2) throw std::invalid_argument("collision_statistics needs at least 2 samples");
    struct Acc {
        double q = 0, q2 = 0, j2 = 0, j2sq = 0, j4 = 0, j4sq = 0, path = 0, path2 = 0, ident = 0;
        std::size_t n = 0;
    };
    const std::size_t blocks = std::min<std::size_t>(64, samples);
    std::vector<Acc> acc(blocks);
    const double v2 = m.speed() * m.speed();
    const double norm_path = duration * opt.mu * m.speed() * std::abs(std::log(m.epsilon()));
    parallel_for(blocks, [&](std::size_t b) {
        Acc& a = acc[b];
        for (std::size_t i = b; i < samples; i += blocks) {
            const auto p = sample_path(m, opt, {0.0, 0.0}, {m.speed(), 0.0}, duration, stream_key(seed, i));
            double sum = 0.0;
            for (std::size_t k = 1; k < p.velocities.size(); ++k) {
                const double d2 = norm2(p.velocities[k] - p.velocities[k - 1]);
                const double th = signed_angle(p.velocities[k - 1], p.velocities[k]);
                const double s = std::sin(0.5 * th);
                a.ident = std::max(a.ident, std::abs(d2 - 4.0 * v2 * s * s) / v2);
                a.j2 += d2;
                a.j2sq += d2 * d2;
                a.j4 += d2 * d2;
                a.j4sq += d2 * d2 * d2 * d2;
                ++a.n;
                sum += d2;
            }
            const double q = static_cast<double>(p.collisions());
            a.q += q;
            a.q2 += q * q;
            a.path += sum / norm_path;
            a.path2 += (sum / norm_path) * (sum / norm_path);
        }
    });
    Acc t;
    for (const auto& a : acc) {
        t.q += a.q;
        t.q2 += a.q2;
        t.j2 += a.j2;
        t.j2sq += a.j2sq;
        t.j4 += a.j4;
        t.j4sq += a.j4sq;
        t.path += a.path;
        t.path2 += a.path2;
        t.ident = std::max(t.ident, a.ident);
        t.n += a.n;
    }
    auto moment = [](double s, double s2, double n) {
        Moment r;
        if (n <= 0.0) return r;
        r.mean = s / n;
        r.stderr_ = n > 1.0 ? std::sqrt(std::max(0.0, s2 / n - r.mean * r.mean) / (n - 1.0)) : 0.0;
        return r;
    };
    CollisionStatistics st;
    st.rate = collision_rate(m, opt);
    st.paths = samples;
    st.collisions = t.n;
    const double np = static_cast<double>(samples), nc = static_cast<double>(t.n);
    st.mean_collisions = moment(t.q, t.q2, np);
    st.jump2 = moment(t.j2, t.j2sq, nc);
    st.jump4 = moment(t.j4, t.j4sq, nc);
    st.max_identity_error = {t.ident, 0.0};
    st.path_second_renormalized = moment(t.path, t.path2, np);
    if (opt.transparent) return st;
    const auto mom = jump_moments(m);
    st.quadrature_second_renormalized = mom.second_renormalized;
    st.quadrature_fourth = mom.fourth;
    // the sampled rate already carries the extra 1/|log eps|
    if (opt.log_density) st.quadrature_second_renormalized /= std::abs(std::log(m.epsilon()));
    return st;
}

}  // namespace lorentz
