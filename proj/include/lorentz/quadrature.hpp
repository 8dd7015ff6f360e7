#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

namespace lorentz {

struct QuadResult {
    double value = 0.0;
    double error = 0.0;  // absolute error estimate

    QuadResult& operator+=(const QuadResult& o)
    {
        value += o.value;
        error += o.error;
        return *this;
    }
};

/// Thrown when adaptive refinement stops short of the requested tolerance.
class QuadratureError : public std::runtime_error {
  public:
    QuadratureError(const std::string& what, QuadResult achieved)
        : std::runtime_error(what), achieved_(achieved)
    {
    }
    const QuadResult& achieved() const { return achieved_; }

  private:
    QuadResult achieved_;
};

namespace detail {

/// One G7/K15 panel on [a, b]; Boost supplies the rule, error is rescaled to [a, b].
template <class F>
QuadResult gk15_panel(F& f, double a, double b)
{
    using Rule = boost::math::quadrature::gauss_kronrod<double, 15>;
    double err = 0.0;
    double value = Rule::integrate(f, a, b, 0, 0.0, &err);
    return {value, err * 0.5 * (b - a)};
}

}  // namespace detail

/*!
 * Globally adaptive Gauss-Kronrod on [a, b].
 *
 * The panel with the largest error estimate is bisected until the summed
 * error drops below max(abs_tol, rel_tol * |value|). Throws QuadratureError
 * with the achieved estimate when max_panels is exhausted.
 */
template <class F>
QuadResult integrate(F&& f, double a, double b, double rel_tol = 1e-12, double abs_tol = 0.0,
                     std::size_t max_panels = 4000)
{
    if (a == b) return {};
    struct Panel {
        double a, b;
        QuadResult r;
        bool operator<(const Panel& o) const { return r.error < o.r.error; }
    };
    std::priority_queue<Panel> heap;
    QuadResult total = detail::gk15_panel(f, a, b);
    heap.push({a, b, total});
    std::size_t panels = 1;
    while (total.error > std::max(abs_tol, rel_tol * std::abs(total.value))) {
        if (panels >= max_panels) {
            throw QuadratureError("adaptive quadrature did not reach tolerance", total);
        }
        Panel worst = heap.top();
        heap.pop();
        double mid = 0.5 * (worst.a + worst.b);
        if (mid <= worst.a || mid >= worst.b) {
            // Interval exhausted at double precision; accept what we have.
            heap.push(worst);
            break;
        }
        Panel left{worst.a, mid, detail::gk15_panel(f, worst.a, mid)};
        Panel right{mid, worst.b, detail::gk15_panel(f, mid, worst.b)};
        total.value += left.r.value + right.r.value - worst.r.value;
        total.error += left.r.error + right.r.error - worst.r.error;
        heap.push(left);
        heap.push(right);
        ++panels;
    }
    // Re-sum to shed the drift of incremental updates.
    QuadResult sum;
    while (!heap.empty()) {
        sum += heap.top().r;
        heap.pop();
    }
    return sum;
}

/// Integrate over consecutive breakpoints, refining each piece independently.
template <class F>
QuadResult integrate_pieces(F&& f, const std::vector<double>& breaks, double rel_tol = 1e-12,
                            double abs_tol = 0.0)
{
    QuadResult sum;
    for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
        sum += integrate(f, breaks[i], breaks[i + 1], rel_tol, abs_tol);
    }
    return sum;
}

}  // namespace lorentz
