#pragma once

#include "lorentz/vec2.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

namespace lorentz {

/*!
 * Single circular barrier of height eps^alpha * phi0 probed at speed |v|.
 *
 * Holds the refractive index n = sqrt(1 - 2 eps^alpha phi0 / |v|^2) together
 * with the exact gap 1 - n^2, which every small-angle formula below uses
 * instead of recomputing it from n.
 */
class ScatteringModel {
  public:
    /// Physical parameterization; refuses 2 eps^alpha phi0 >= |v|^2.
    static ScatteringModel from_physics(double epsilon, double alpha, double phi0, double speed,
                                        bool allow_attractive = false)
    {
        if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::domain_error("epsilon must lie in (0, 1)");
        if (!(alpha > 0.0 && alpha < 0.5)) throw std::domain_error("alpha must lie in (0, 1/2)");
        if (!(speed > 0.0) || !std::isfinite(speed)) throw std::domain_error("speed must be positive");
        if (!std::isfinite(phi0)) throw std::domain_error("phi0 must be finite");
        if (phi0 < 0.0 && !allow_attractive) {
            throw std::domain_error("phi0 < 0 (attractive well) requires allow_attractive");
        }
        const double barrier = std::pow(epsilon, alpha) * phi0;
        const double gap = 2.0 * barrier / (speed * speed);
        if (gap >= 1.0) {
            throw std::domain_error("barrier too high: 2 eps^alpha phi0 = " + std::to_string(2.0 * barrier) +
                                    " >= |v|^2 = " + std::to_string(speed * speed));
        }
        return ScatteringModel(speed, barrier, Physics{epsilon, alpha, phi0});
    }

    /// Scattering-only model from the refractive index; no eps/alpha attached.
    static ScatteringModel from_index(double n, double speed, bool allow_attractive = false)
    {
        if (!(speed > 0.0)) throw std::domain_error("speed must be positive");
        if (!(n > 0.0) || !std::isfinite(n)) throw std::domain_error("refractive index must be positive");
        if (n > 1.0 && !allow_attractive) throw std::domain_error("n > 1 (attractive well) requires allow_attractive");
        const double barrier = 0.5 * speed * speed * (1.0 - n) * (1.0 + n);
        return ScatteringModel(speed, barrier, std::nullopt);
    }

    double speed() const { return speed_; }
    /// Potential step eps^alpha * phi0 across one disk boundary.
    double barrier() const { return barrier_; }
    double index() const { return n_; }
    /// 1 - n^2 = 2 eps^alpha phi0 / |v|^2, exact.
    double index_gap() const { return gap_; }

    bool has_physics() const { return physics_.has_value(); }
    double epsilon() const { return physics().epsilon; }
    double alpha() const { return physics().alpha; }
    double phi0() const { return physics().phi0; }

  private:
    struct Physics {
        double epsilon;
        double alpha;
        double phi0;
    };

    ScatteringModel(double speed, double barrier, std::optional<Physics> physics)
        : speed_(speed), barrier_(barrier), gap_(2.0 * barrier / (speed * speed)),
          n_(std::sqrt(1.0 - gap_)), physics_(physics)
    {
    }

    const Physics& physics() const
    {
        if (!physics_) throw std::logic_error("model was built from a refractive index; eps/alpha unknown");
        return *physics_;
    }

    double speed_;
    double barrier_;
    double gap_;
    double n_;
    std::optional<Physics> physics_;
};

enum class ScatterMode { Transmitted, Reflected };

struct Deflection {
    double theta = 0.0;  // signed rotation of the velocity, counterclockwise positive
    ScatterMode mode = ScatterMode::Transmitted;
};

namespace detail {

/// theta/2 on the transmitted branch for rho in [0, n]:
/// asin(rho/n) - asin(rho) = asin(rho (1-n^2) / (n (sqrt(1-rho^2) + sqrt(n^2-rho^2)))).
inline double transmitted_half_angle(double n, double gap, double rho)
{
    const double inner = std::sqrt(std::max(0.0, (n - rho) * (n + rho)));
    const double outer = std::sqrt((1.0 - rho) * (1.0 + rho));
    const double s = rho * gap / (n * (outer + inner));
    return std::asin(std::clamp(s, -1.0, 1.0));
}

}  // namespace detail

/*!
 * Deflection for impact parameter rho in [-1, 1].
 *
 * rho >= 0 puts the disk center on the clockwise side of the incoming line,
 * so the barrier pushes the particle counterclockwise. The map is odd in rho.
 * |rho| <= n is transmitted (the tie rho = n included).
 */
inline Deflection scattering_angle(const ScatteringModel& model, double rho)
{
    if (!(std::abs(rho) <= 1.0)) throw std::domain_error("impact parameter outside [-1, 1]");
    const double a = std::abs(rho);
    const double sign = std::signbit(rho) ? -1.0 : 1.0;
    const double n = model.index();
    if (a <= n) {
        return {sign * 2.0 * detail::transmitted_half_angle(n, model.index_gap(), a), ScatterMode::Transmitted};
    }
    return {sign * 2.0 * std::acos(a), ScatterMode::Reflected};
}

/// 2 arccos(n): the grazing-refraction angle, upper bound of |theta|.
inline double max_scattering_angle(const ScatteringModel& model)
{
    const double n = model.index();
    if (n > 1.0) {
        // Attractive well: every rho transmits, the extreme sits at rho = 1.
        return std::abs(scattering_angle(model, 1.0).theta);
    }
    // acos(n) = asin(sqrt(1 - n^2)) keeps precision as n -> 1.
    return 2.0 * std::asin(std::sqrt(model.index_gap()));
}

/*!
 * |d rho / d theta| along one branch of the deflection map.
 *
 * Transmitted: n (c - n)(1 - n c) / (2 (1 + n^2 - 2 n c)^{3/2}), c = cos(theta/2).
 * Reflected:   sin(theta/2) / 2.
 */
inline double cross_section(const ScatteringModel& model, double theta, ScatterMode branch)
{
    if (!(theta > 0.0 && theta <= std::numbers::pi)) throw std::domain_error("theta outside (0, pi]");
    const double n = model.index();
    const double c = std::cos(0.5 * theta);
    if (branch == ScatterMode::Transmitted) {
        if (n > 1.0) throw std::domain_error("cross section not defined for attractive wells");
        if (theta > max_scattering_angle(model)) {
            throw std::domain_error("theta beyond the transmitted range");
        }
        const double d = 1.0 + n * n - 2.0 * n * c;
        return n * (c - n) * (1.0 - n * c) / (2.0 * d * std::sqrt(d));
    }
    return 0.5 * std::sin(0.5 * theta);
}

/// Two-branch cross section: transmitted form up to theta_max, reflected form above.
inline double cross_section(const ScatteringModel& model, double theta)
{
    if (!(theta > 0.0 && theta <= std::numbers::pi)) throw std::domain_error("theta outside (0, pi]");
    const auto branch = theta <= max_scattering_angle(model) ? ScatterMode::Transmitted : ScatterMode::Reflected;
    return cross_section(model, theta, branch);
}

/// |d rho / d(theta/2)|, i.e. twice cross_section(); equals 1 at theta = pi.
inline double half_angle_cross_section(const ScatteringModel& model, double theta)
{
    return 2.0 * cross_section(model, theta);
}

struct Refraction {
    Vec2 velocity;
    bool reflected = false;
    /// Set when the normal-energy margin was within tolerance of zero and the
    /// crossing was resolved onto the transmitted side.
    bool tangency = false;
};

/*!
 * Local Snell step across a potential jump delta_phi at a boundary with unit
 * normal. The tangential component is kept; the normal one satisfies
 * v_n'^2 = v_n^2 - 2 delta_phi with its sign preserved when that is positive,
 * otherwise the velocity is reflected elastically.
 *
 * tangency_tol > 0 treats |v_n^2 - 2 delta_phi| <= tangency_tol * |v|^2 as
 * transmitted with v_n' = 0.
 */
inline Refraction refract_velocity(Vec2 v_in, Vec2 normal, double delta_phi, double tangency_tol = 0.0)
{
    const double speed2 = norm2(v_in);
    if (!(speed2 > 0.0)) throw std::domain_error("zero velocity");
    if (delta_phi == 0.0) return {v_in, false, false};
    const double vn = dot(v_in, normal);
    const Vec2 vt = v_in - vn * normal;
    const double margin = std::fma(vn, vn, -2.0 * delta_phi);  // single rounding near grazing
    if (margin > tangency_tol * speed2) {
        return {vt + std::copysign(std::sqrt(margin), vn) * normal, false, false};
    }
    if (tangency_tol > 0.0 && margin >= -tangency_tol * speed2) {
        return {vt, false, true};
    }
    return {v_in - 2.0 * vn * normal, true, false};
}

}  // namespace lorentz
