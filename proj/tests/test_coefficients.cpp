#include "lorentz/coefficients.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace lorentz;

namespace {

// mpmath (30 digits) evaluation of mu eps^-2a |v| int_0^1 theta^2 / |log eps|
// at alpha = 0.1, mu = |v| = phi0 = 1, with the same split points.
struct Ref {
    double eps, b_tilde, b_renorm, reflected, moment2_renorm;
};
constexpr Ref kRefs[] = {
    {1e-5, 9.00401740647834, 0.782079014918874, 6.49654955658092, 1.33224888273295},
    {1e-7, 8.48624668310721, 0.526504300934748, 5.21003343735595, 0.971031743987705},
    {1e-9, 8.67669043710743, 0.418693197557608, 4.67101088953666, 0.801309283541221},
};

}  // namespace

TEST(Coefficients, TransparentBarrierGivesZero)
{
    auto rep = compute_b(1e-3, 0.1, 1.0, 1.0, 0.0);
    EXPECT_EQ(rep.b_tilde, 0.0);
    EXPECT_EQ(rep.b_renormalized, 0.0);
    EXPECT_EQ(rep.split_point, 1.0);
}

TEST(Coefficients, MatchesHighPrecisionReference)
{
    for (const auto& r : kRefs) {
        auto rep = compute_b(r.eps, 0.1, 1.0, 1.0);
        EXPECT_NEAR(rep.b_tilde / r.b_tilde, 1.0, 1e-9) << r.eps;
        EXPECT_NEAR(rep.b_renormalized / r.b_renorm, 1.0, 1e-9) << r.eps;
        EXPECT_NEAR(rep.terms.reflected / r.reflected, 1.0, 1e-9) << r.eps;
        EXPECT_LT(rep.quadrature_error, 1e-8 * rep.b_tilde);
        auto mom = jump_moments(ScatteringModel::from_physics(r.eps, 0.1, 1.0, 1.0));
        EXPECT_NEAR(mom.second_renormalized / r.moment2_renorm, 1.0, 1e-9) << r.eps;
    }
}

TEST(Coefficients, BarrierTooHighRefused)
{
    // 2 * (1e-3)^0.1 > 1
    EXPECT_THROW(compute_b(1e-3, 0.1, 1.0, 1.0), std::domain_error);
}

TEST(Coefficients, RenormalizedSequenceDecreasesTowardLimit)
{
    double prev = 1e9;
    for (double eps : {1e-5, 1e-7, 1e-9, 1e-12, 1e-15}) {
        double br = compute_b(eps, 0.1, 1.0, 1.0).b_renormalized;
        EXPECT_LT(br, prev);
        EXPECT_GT(br, renormalized_b_limit(0.1, 1.0, 1.0));
        prev = br;
    }
}

TEST(Coefficients, ReflectedBranchStaysBounded)
{
    // eps^-2a int_n^1 theta^2 -> 4 |v|^-4 * (phi0)^2-type constant; no log growth
    for (double eps : {1e-5, 1e-9, 1e-15, 1e-30}) {
        auto rep = compute_b(eps, 0.1, 1.0, 1.0);
        EXPECT_LT(rep.terms.reflected, 8.0);
        EXPECT_GT(rep.terms.reflected, 3.5);
    }
}

TEST(Coefficients, ClosedFormA1MatchesQuadrature)
{
    for (double eps : {1e-5, 1e-9, 1e-20}) {
        auto t = compute_b_terms(ScatteringModel::from_physics(eps, 0.1, 1.0, 1.0), 0.025);
        EXPECT_NEAR(t.a1 / t.a1_quadrature, 1.0, 1e-10);
    }
}

TEST(Coefficients, TermTrends)
{
    // A2/A1 peaks near eps ~ 1e-9 before decaying; only the far end is compared.
    double prev_a1_ratio = 0.0;
    double a2_over_a1_at_1e9 = 0.0;
    for (double eps : {1e-5, 1e-9, 1e-20, 1e-40}) {
        auto t = compute_b_terms(ScatteringModel::from_physics(eps, 0.1, 1.0, 1.0), 0.025);
        const double a1_ratio = t.a1 * 2.0 / (0.1 * std::abs(std::log(eps)));
        EXPECT_GT(a1_ratio, prev_a1_ratio);
        EXPECT_LT(a1_ratio, 1.0);
        EXPECT_LT(t.a2 / t.a1, 1e-2);
        if (eps == 1e-9) a2_over_a1_at_1e9 = t.a2 / t.a1;
        if (eps == 1e-40) EXPECT_LT(t.a2 / t.a1, 0.5 * a2_over_a1_at_1e9);
        EXPECT_LE(t.a2, t.a2_bound);
        // A2 delta^2 / eps^{2a}-normalized scale stays bounded
        EXPECT_LT(t.a2_bound * t.delta * t.delta / std::pow(eps, 2 * 0.1), 1.0);
        prev_a1_ratio = a1_ratio;
    }
}

TEST(Coefficients, GammaOutsideWindowRejected)
{
    auto m = ScatteringModel::from_physics(1e-9, 0.1, 1.0, 1.0);
    EXPECT_THROW(compute_b_terms(m, 0.0), std::domain_error);
    EXPECT_THROW(compute_b_terms(m, 0.05), std::domain_error);
    EXPECT_NO_THROW(compute_b_terms(m, 0.049));
}

TEST(Coefficients, QuadratureAgreesWithMonteCarloMean)
{
    auto m = ScatteringModel::from_physics(1e-6, 0.1, 1.0, 1.0);
    const double quad = integrate_over_impact(m, [](double th) { return th * th; }, layer_hint(m)).value;
    CounterRng rng(stream_key(3));
    const int N = 100000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < N; ++i) {
        double th = scattering_angle(m, rng.uniform(-1.0, 1.0)).theta;
        s += th * th;
        s2 += th * th * th * th;
    }
    const double mean = s / N;
    const double se = std::sqrt((s2 / N - mean * mean) / N);
    EXPECT_LT(std::abs(mean - quad), 3.0 * se);
}

TEST(Coefficients, JumpMomentIdentity)
{
    // |v'-v|^2 = 4|v|^2 sin^2(theta/2) and the fourth moment is small next to the second times |log eps|
    auto m = ScatteringModel::from_physics(1e-9, 0.1, 1.0, 2.0);
    auto mom = jump_moments(m);
    EXPECT_GT(mom.second, 0.0);
    EXPECT_LT(mom.fourth, mom.second * std::abs(std::log(1e-9)));
}

TEST(GreenKubo, SpectralValueAndZeroLag)
{
    GreenKuboOptions o;
    o.mu = 2.0;
    o.speed = 1.5;
    o.samples = 2000;
    auto rep = compute_d(o);
    EXPECT_NEAR(rep.d_spectral, std::pow(1.5, 5) / 2.0, 1e-12);
    EXPECT_DOUBLE_EQ(rep.autocorrelation_at_zero, 1.5 * 1.5);
    EXPECT_NEAR(rep.eigenvalue, (2.0 / 3.0) / 2.25, 1e-15);
}

TEST(GreenKubo, DualComputationAgrees)
{
    GreenKuboOptions o;
    o.samples = 20000;
    auto rep = compute_d(o);
    EXPECT_LT(std::abs(rep.d_spectral - rep.d_autocorrelation), 3.0 * rep.mc_error);
    EXPECT_NEAR(rep.fitted_rate / rep.eigenvalue, 1.0, 0.03);
}

TEST(GreenKubo, RenormalizedGenerator)
{
    GreenKuboOptions o;
    o.renormalized = true;
    o.b = 0.2;
    o.samples = 100;
    auto rep = compute_d(o);
    EXPECT_DOUBLE_EQ(rep.d_spectral, 1.0 / 0.4);
    o.b = 0.0;
    EXPECT_THROW(compute_d(o), std::domain_error);
}

TEST(GreenKubo, CoarseStepRejected)
{
    GreenKuboOptions o;
    o.dt = 0.05;  // rate 0.5
    EXPECT_THROW(compute_d(o), std::domain_error);
}

TEST(GreenKubo, Deterministic)
{
    GreenKuboOptions o;
    o.samples = 500;
    EXPECT_EQ(compute_d(o).d_autocorrelation, compute_d(o).d_autocorrelation);
}
