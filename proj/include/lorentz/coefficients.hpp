#pragma once

#include "lorentz/parallel.hpp"
#include "lorentz/quadrature.hpp"
#include "lorentz/rng.hpp"
#include "lorentz/scattering.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace lorentz {

/// Default boundary-layer exponent: midpoint of (0, alpha/2).
inline double default_gamma(double alpha) { return alpha / 4.0; }

/// Boundary-layer width delta = eps^alpha / |log eps|^gamma.
inline double boundary_layer_delta(double epsilon, double alpha, double gamma)
{
    return std::pow(epsilon, alpha) / std::pow(std::abs(std::log(epsilon)), gamma);
}

namespace detail {

/// theta(rho) for rho in [0, 1] on the positive half; branch picked by rho vs n.
inline double theta_half(const ScatteringModel& m, double rho)
{
    const double n = m.index();
    if (rho <= n) return 2.0 * transmitted_half_angle(n, m.index_gap(), rho);
    return 2.0 * std::acos(std::min(rho, 1.0));
}

}  // namespace detail

/*!
 * int_0^1 g(theta(rho)) d rho with the transmitted branch split at
 * r = n (1 - delta). The layer [r, n] is integrated in s with rho = n - s^2,
 * which removes the square-root behaviour of theta at rho -> n.
 */
template <class G>
QuadResult integrate_over_impact(const ScatteringModel& m, G&& g, double delta, double rel_tol = 1e-12)
{
    const double n = m.index();
    QuadResult sum;
    if (n >= 1.0) {
        return integrate([&](double rho) { return g(detail::theta_half(m, rho)); }, 0.0, 1.0, rel_tol);
    }
    const double r = n * (1.0 - std::clamp(delta, 0.0, 1.0));
    sum += integrate([&](double rho) { return g(2.0 * detail::transmitted_half_angle(n, m.index_gap(), rho)); },
                     0.0, r, rel_tol);
    const double smax = std::sqrt(n - r);
    sum += integrate(
        [&](double s) {
            const double rho = n - s * s;
            return 2.0 * s * g(2.0 * detail::transmitted_half_angle(n, m.index_gap(), rho));
        },
        0.0, smax, rel_tol);
    sum += integrate([&](double rho) { return g(2.0 * std::acos(rho)); }, n, 1.0, rel_tol);
    return sum;
}

/// Layer width used when the model carries eps/alpha, else a fixed fraction.
inline double layer_hint(const ScatteringModel& m)
{
    if (m.has_physics()) return boundary_layer_delta(m.epsilon(), m.alpha(), default_gamma(m.alpha()));
    return std::min(0.5, 4.0 * (1.0 - m.index()));
}

struct AppendixTerms {
    double gamma = 0.0;
    double delta = 0.0;
    double r = 0.0;               // n (1 - delta)
    double a_full = 0.0;          // eps^-2a int_0^r theta^2
    double a1 = 0.0;              // linearized part, closed form
    double a1_quadrature = 0.0;   // same integral by quadrature
    double a2 = 0.0;              // eps^-2a int_0^r R1^2, exact remainder
    double a2_bound = 0.0;        // eps^-2a n (1-n)^4 / (2 delta^2)
    double b_term = 0.0;          // eps^-2a int_r^n theta^2
    double reflected = 0.0;       // eps^-2a int_n^1 theta^2
};

struct CoefficientReport {
    double epsilon = 0.0;
    double alpha = 0.0;
    double mu = 0.0;
    double speed = 0.0;
    double phi0 = 0.0;
    double b_tilde = 0.0;           // mu eps^-2a |v| int_0^1 theta^2
    double b_renormalized = 0.0;    // b_tilde / |log eps|
    double quadrature_error = 0.0;  // absolute, on b_tilde
    double split_point = 0.0;       // n_eps
    AppendixTerms terms;
};

/*!
 * Boundary-layer decomposition of eps^-2a int_0^n theta^2.
 * gamma must lie in (0, alpha/2).
 */
inline AppendixTerms compute_b_terms(const ScatteringModel& m, double gamma)
{
    const double alpha = m.alpha();
    if (!(gamma > 0.0 && gamma < alpha / 2.0)) throw std::domain_error("gamma must lie in (0, alpha/2)");
    const double eps = m.epsilon();
    const double n = m.index();
    const double gap = m.index_gap();
    const double scale = std::pow(eps, -2.0 * alpha);

    AppendixTerms t;
    t.gamma = gamma;
    t.delta = boundary_layer_delta(eps, alpha, gamma);
    t.r = n * (1.0 - t.delta);
    const double r = t.r;
    // (1 - n)/n with 1 - n = gap / (1 + n)
    const double q = gap / ((1.0 + n) * n);

    t.a1 = -0.5 * scale * q * q * (2.0 * r + std::log1p(-r) - std::log1p(r));
    t.a1_quadrature = scale * q * q * integrate([](double x) { return x * x / ((1.0 - x) * (1.0 + x)); }, 0.0, r).value;

    auto theta = [&](double rho) { return 2.0 * detail::transmitted_half_angle(n, gap, rho); };
    t.a_full = scale * integrate([&](double rho) { return theta(rho) * theta(rho); }, 0.0, r).value;

    // R1 = asin(rho/n) - asin(rho) - (rho/n - rho)/sqrt(1 - rho^2)
    auto remainder = [&](double rho) {
        const double lin = rho * q / std::sqrt((1.0 - rho) * (1.0 + rho));
        return 0.5 * theta(rho) - lin;
    };
    // The remainder is formed by subtraction and carries relative noise ~ 1e-16 / (1 - n);
    // at extreme eps the tolerance cannot be met and the achieved estimate is kept.
    try {
        t.a2 = scale * integrate([&](double rho) { const double x = remainder(rho); return x * x; }, 0.0, r, 1e-8)
                           .value;
    } catch (const QuadratureError& e) {
        t.a2 = scale * e.achieved().value;
    }
    const double one_minus_n = gap / (1.0 + n);
    t.a2_bound = scale * n * std::pow(one_minus_n, 4) / (2.0 * t.delta * t.delta);

    const double smax = std::sqrt(n - r);
    t.b_term = scale * integrate(
                           [&](double s) {
                               const double th = theta(n - s * s);
                               return 2.0 * s * th * th;
                           },
                           0.0, smax)
                           .value;
    t.reflected = scale * integrate([](double rho) { const double th = 2.0 * std::acos(rho); return th * th; }, n, 1.0)
                              .value;
    return t;
}

/// Landau coefficient B~ = mu eps^-2a |v| int_0^1 theta^2 and its |log eps|-renormalized value.
inline CoefficientReport compute_b(const ScatteringModel& m, double mu, double gamma = -1.0)
{
    if (!(mu > 0.0)) throw std::domain_error("mu must be positive");
    CoefficientReport rep;
    rep.epsilon = m.epsilon();
    rep.alpha = m.alpha();
    rep.mu = mu;
    rep.speed = m.speed();
    rep.phi0 = m.phi0();
    rep.split_point = m.index();
    if (gamma < 0.0) gamma = default_gamma(rep.alpha);
    const double log_eps = std::abs(std::log(rep.epsilon));
    if (m.index() >= 1.0) {
        // transparent barrier: theta vanishes identically
        rep.terms.gamma = gamma;
        return rep;
    }

    const double delta = boundary_layer_delta(rep.epsilon, rep.alpha, gamma);
    const QuadResult q = integrate_over_impact(m, [](double th) { return th * th; }, delta, 1e-12);
    const double pref = mu * std::pow(rep.epsilon, -2.0 * rep.alpha) * rep.speed;
    rep.b_tilde = pref * q.value;
    rep.quadrature_error = pref * q.error;
    if (rep.quadrature_error > 1e-8 * std::abs(rep.b_tilde)) {
        throw QuadratureError("B quadrature above 1e-8 relative", {rep.b_tilde, rep.quadrature_error});
    }
    rep.b_renormalized = rep.b_tilde / log_eps;
    rep.terms = compute_b_terms(m, gamma);
    return rep;
}

inline CoefficientReport compute_b(double epsilon, double alpha, double mu, double speed, double phi0 = 1.0)
{
    return compute_b(ScatteringModel::from_physics(epsilon, alpha, phi0, speed), mu);
}

/// Renormalized Landau coefficient 2 alpha mu / |v|^3.
inline double renormalized_b_limit(double alpha, double mu, double speed)
{
    return 2.0 * alpha * mu / (speed * speed * speed);
}

struct MomentReport {
    double second = 0.0;             // eps^-2a int_-1^1 |v'-v|^2 d rho
    double fourth = 0.0;             // eps^-2a int_-1^1 |v'-v|^4 d rho
    double second_renormalized = 0.0;  // second / |log eps|
    double error = 0.0;
};

/// Velocity-jump moments per unit impact parameter, |v'-v|^2 = 4|v|^2 sin^2(theta/2).
inline MomentReport jump_moments(const ScatteringModel& m)
{
    MomentReport rep;
    const double v2 = m.speed() * m.speed();
    const double scale = std::pow(m.epsilon(), -2.0 * m.alpha());
    const double delta = layer_hint(m);
    auto jump2 = [v2](double th) { const double s = std::sin(0.5 * th); return 4.0 * v2 * s * s; };
    const QuadResult q2 = integrate_over_impact(m, jump2, delta);
    const QuadResult q4 = integrate_over_impact(m, [&](double th) { const double j = jump2(th); return j * j; }, delta,
                                                1e-10);
    rep.second = 2.0 * scale * q2.value;
    rep.fourth = 2.0 * scale * q4.value;
    rep.error = 2.0 * scale * q2.error;
    rep.second_renormalized = rep.second / std::abs(std::log(m.epsilon()));
    return rep;
}

// ---------------------------------------------------------------------------
// Green-Kubo

struct GreenKuboOptions {
    double mu = 1.0;
    double speed = 1.0;
    std::size_t samples = 100000;
    double dt = 0.0;            // 0: 5e-3 / rate
    std::uint64_t seed = 1;
    /// Use c * Delta with c = b instead of mu/(2|v|).
    bool renormalized = false;
    double b = 0.0;
    double horizon_rates = 20.0;  // integrate to horizon_rates / rate
};

struct GreenKuboReport {
    double speed = 0.0;
    double mu = 0.0;
    double generator_coefficient = 0.0;  // c in L = c Delta_S
    double eigenvalue = 0.0;             // first-harmonic rate c / |v|^2
    double d_spectral = 0.0;
    double d_autocorrelation = 0.0;
    double mc_error = 0.0;
    double fitted_rate = 0.0;
    double fitted_rate_error = 0.0;
    double autocorrelation_at_zero = 0.0;
    std::vector<double> times;
    std::vector<double> autocorrelation;  // E[v . v(t)]
};

/// Weighted least squares fit of log y = a - c t; returns (c, stderr c).
inline std::pair<double, double> fit_exponential_rate(const std::vector<double>& t, const std::vector<double>& y,
                                                      const std::vector<double>& sigma)
{
    double sw = 0, swx = 0, swy = 0, swxx = 0, swxy = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!(y[i] > 0.0) || !(sigma[i] > 0.0)) continue;
        const double ly = std::log(y[i]);
        const double w = (y[i] / sigma[i]) * (y[i] / sigma[i]);  // 1 / var(log y)
        sw += w;
        swx += w * t[i];
        swy += w * ly;
        swxx += w * t[i] * t[i];
        swxy += w * t[i] * ly;
    }
    const double det = sw * swxx - swx * swx;
    if (!(det > 0.0)) throw std::runtime_error("exponential fit is degenerate");
    const double slope = (sw * swxy - swx * swy) / det;
    return {-slope, std::sqrt(sw / det)};
}

/// Coefficient c of the Landau operator L = c Delta_S, c = mu / (2|v|).
inline double landau_coefficient(double mu, double speed) { return mu / (2.0 * speed); }

/// D = |v|^4 / (2c): inverse of c Delta_S on the first harmonics.
inline double spectral_diffusion(double c, double speed) { return speed * speed * speed * speed / (2.0 * c); }

/*!
 * Spatial diffusion coefficient of the Landau angular diffusion L = c Delta_S.
 *
 * Convention: D = (1/2) int_0^inf E[v . v(t)] dt with the expectation under
 * the normalized uniform angular measure; the spectral value inverts L on the
 * k = +-1 harmonics under the same convention, D = |v|^4 / (2c).
 * The autocorrelation route samples Brownian motion on the circle with exact
 * Gaussian increments and integrates the sample mean by the trapezoid rule.
 */
inline GreenKuboReport compute_d(const GreenKuboOptions& opt)
{
    if (!(opt.mu > 0.0 && opt.speed > 0.0)) throw std::domain_error("mu and speed must be positive");
    if (opt.samples < 2) throw std::domain_error("need at least two samples");
    const double v2 = opt.speed * opt.speed;
    GreenKuboReport rep;
    rep.speed = opt.speed;
    rep.mu = opt.mu;
    rep.generator_coefficient = opt.renormalized ? opt.b : landau_coefficient(opt.mu, opt.speed);
    if (!(rep.generator_coefficient > 0.0)) throw std::domain_error("generator coefficient must be positive");
    const double c = rep.generator_coefficient;
    rep.eigenvalue = c / v2;
    rep.d_spectral = spectral_diffusion(c, opt.speed);

    const double rate = rep.eigenvalue;
    const double dt = opt.dt > 0.0 ? opt.dt : 5e-3 / rate;
    if (dt * rate >= 1e-2) throw std::domain_error("dt too coarse: dt * rate must stay below 1e-2");
    const std::size_t steps = static_cast<std::size_t>(std::ceil(opt.horizon_rates / (rate * dt)));
    const double sigma = std::sqrt(2.0 * rate * dt);  // angle increment std over dt

    // Per-sample integrals and per-time sums, reduced in block order.
    const std::size_t blocks = std::min<std::size_t>(opt.samples, 64);
    std::vector<std::vector<double>> block_sum(blocks, std::vector<double>(steps + 1, 0.0));
    std::vector<std::vector<double>> block_sq(blocks, std::vector<double>(steps + 1, 0.0));
    std::vector<double> integral(opt.samples, 0.0);
    parallel_for(blocks, [&](std::size_t b) {
        const std::size_t lo = b * opt.samples / blocks;
        const std::size_t hi = (b + 1) * opt.samples / blocks;
        auto& s1 = block_sum[b];
        auto& s2 = block_sq[b];
        for (std::size_t i = lo; i < hi; ++i) {
            CounterRng rng(stream_key(opt.seed, i));
            std::normal_distribution<double> normal(0.0, sigma);
            double phase = 0.0;
            double prev = 1.0;
            double acc = 0.0;
            s1[0] += 1.0;
            s2[0] += 1.0;
            for (std::size_t k = 1; k <= steps; ++k) {
                phase += normal(rng);
                const double cur = std::cos(phase);
                s1[k] += cur;
                s2[k] += cur * cur;
                acc += 0.5 * (prev + cur) * dt;
                prev = cur;
            }
            integral[i] = 0.5 * v2 * acc;
        }
    });

    const double M = static_cast<double>(opt.samples);
    double mean = 0.0;
    for (double x : integral) mean += x;
    mean /= M;
    double var = 0.0;
    for (double x : integral) var += (x - mean) * (x - mean);
    var /= (M - 1.0);
    rep.d_autocorrelation = mean;
    rep.mc_error = std::sqrt(var / M);

    std::vector<double> s1(steps + 1, 0.0), s2(steps + 1, 0.0);
    for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t k = 0; k <= steps; ++k) {
            s1[k] += block_sum[b][k];
            s2[k] += block_sq[b][k];
        }
    }
    rep.times.resize(steps + 1);
    rep.autocorrelation.resize(steps + 1);
    std::vector<double> fit_t, fit_y, fit_s;
    for (std::size_t k = 0; k <= steps; ++k) {
        const double m1 = s1[k] / M;
        const double sd = std::sqrt(std::max(0.0, s2[k] / M - m1 * m1) / M);
        rep.times[k] = static_cast<double>(k) * dt;
        rep.autocorrelation[k] = v2 * m1;
        // fit where the signal is well above noise
        if (k > 0 && m1 > 10.0 * sd) {
            fit_t.push_back(rep.times[k]);
            fit_y.push_back(m1);
            fit_s.push_back(sd);
        }
    }
    rep.autocorrelation_at_zero = rep.autocorrelation[0];
    auto [c_fit, c_err] = fit_exponential_rate(fit_t, fit_y, fit_s);
    rep.fitted_rate = c_fit;
    rep.fitted_rate_error = c_err;
    return rep;
}

}  // namespace lorentz
