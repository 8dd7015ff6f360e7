#pragma once

#include "lorentz/coefficients.hpp"
#include "lorentz/parallel.hpp"
#include "lorentz/scattering.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace lorentz {

using cplx = std::complex<double>;

// ---------------------------------------------------------------------------
// FFTW plumbing

namespace detail {

/// Owning wrapper for an FFTW plan (planning is not thread-safe; execution is).
class FftPlan {
  public:
    FftPlan() = default;
    explicit FftPlan(fftw_plan p) : plan_(p)
    {
        if (!p) throw std::runtime_error("FFTW planning failed");
    }
    FftPlan(const FftPlan&) = delete;
    FftPlan& operator=(const FftPlan&) = delete;
    FftPlan(FftPlan&& o) noexcept : plan_(o.plan_) { o.plan_ = nullptr; }
    FftPlan& operator=(FftPlan&& o) noexcept
    {
        std::swap(plan_, o.plan_);
        return *this;
    }
    ~FftPlan()
    {
        if (plan_) fftw_destroy_plan(plan_);
    }
    fftw_plan get() const { return plan_; }

  private:
    fftw_plan plan_ = nullptr;
};

inline fftw_complex* as_fftw(cplx* p) { return reinterpret_cast<fftw_complex*>(p); }

/// In-place 2D complex FFT of an n x n row-major array (sign -1 forward, +1 backward; unnormalized).
inline void fft2(std::vector<cplx>& a, std::size_t n, int sign)
{
    FftPlan p(fftw_plan_dft_2d(static_cast<int>(n), static_cast<int>(n), as_fftw(a.data()), as_fftw(a.data()), sign,
                               FFTW_ESTIMATE));
    fftw_execute(p.get());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// AngularField

/*!
 * f(x, theta) on the periodic square [0, L)^2 times the speed circle.
 *
 * Stored as coefficients c(kappa, k) of e^{i kappa.x} e^{i k theta}, spatial
 * mode major (index ix * nx + iy, FFT order) and harmonic minor (k = -K..K).
 * f is real, so c(-kappa, -k) = conj(c(kappa, k)). f is a density with respect
 * to dx dtheta; the spatial marginal is 2 pi c(., 0).
 */
class AngularField {
  public:
    AngularField() = default;
    AngularField(double L, std::size_t nx, int K, double speed)
        : L_(L), nx_(nx), K_(K), speed_(speed), c_(nx * nx * static_cast<std::size_t>(2 * K + 1))
    {
        if (!(L > 0.0) || nx < 1 || K < 0 || !(speed > 0.0)) throw std::invalid_argument("bad AngularField shape");
        if (nx > 1 && nx % 2 != 0) throw std::invalid_argument("nx must be even");
    }

    /// Sample f(x, y, theta) on the grid and transform; angular_samples defaults to 4K + 4.
    template <class F>
    static AngularField from_function(double L, std::size_t nx, int K, double speed, F&& f, std::size_t angular_samples = 0)
    {
        AngularField out(L, nx, K, speed);
        const std::size_t M = angular_samples ? angular_samples : static_cast<std::size_t>(4 * K + 4);
        if (M < static_cast<std::size_t>(2 * K + 1)) throw std::invalid_argument("too few angular samples");
        std::vector<cplx> buf(nx * nx * M);
        const double h = L / static_cast<double>(nx);
        for (std::size_t i = 0; i < nx; ++i)
            for (std::size_t j = 0; j < nx; ++j)
                for (std::size_t a = 0; a < M; ++a)
                    buf[(i * nx + j) * M + a] = f(i * h, j * h, 2.0 * std::numbers::pi * a / static_cast<double>(M));
        detail::FftPlan p(fftw_plan_dft_3d(static_cast<int>(nx), static_cast<int>(nx), static_cast<int>(M),
                                           detail::as_fftw(buf.data()), detail::as_fftw(buf.data()), FFTW_FORWARD,
                                           FFTW_ESTIMATE));
        fftw_execute(p.get());
        const double norm = 1.0 / static_cast<double>(nx * nx * M);
        for (std::size_t s = 0; s < nx * nx; ++s)
            for (int k = -K; k <= K; ++k) {
                const std::size_t a = static_cast<std::size_t>((k + static_cast<long>(M)) % static_cast<long>(M));
                out.at(s, k) = buf[s * M + a] * norm;
            }
        return out;
    }

    /// Angle-independent field from grid values rho(x) of the angular average.
    static AngularField from_average(double L, std::size_t nx, int K, double speed, std::vector<double> avg)
    {
        if (avg.size() != nx * nx) throw std::invalid_argument("grid size mismatch");
        AngularField out(L, nx, K, speed);
        std::vector<cplx> buf(avg.begin(), avg.end());
        detail::fft2(buf, nx, FFTW_FORWARD);
        for (std::size_t s = 0; s < nx * nx; ++s) out.at(s, 0) = buf[s] / static_cast<double>(nx * nx);
        return out;
    }

    double box() const { return L_; }
    std::size_t nx() const { return nx_; }
    int harmonics() const { return K_; }
    double speed() const { return speed_; }
    std::size_t modes() const { return nx_ * nx_; }
    std::size_t width() const { return static_cast<std::size_t>(2 * K_ + 1); }

    cplx& at(std::size_t mode, int k) { return c_[mode * width() + static_cast<std::size_t>(k + K_)]; }
    const cplx& at(std::size_t mode, int k) const { return c_[mode * width() + static_cast<std::size_t>(k + K_)]; }
    cplx* mode_data(std::size_t mode) { return c_.data() + mode * width(); }
    const std::vector<cplx>& coefficients() const { return c_; }
    std::vector<cplx>& coefficients() { return c_; }

    /// Signed integer frequency of FFT index i.
    long frequency(std::size_t i) const
    {
        const long n = static_cast<long>(nx_);
        const long s = static_cast<long>(i);
        return s <= n / 2 - (n % 2 == 0 ? 1 : 0) || n == 1 ? s : s - n;
    }
    double wavenumber(std::size_t i) const { return 2.0 * std::numbers::pi / L_ * static_cast<double>(frequency(i)); }
    /// Wavenumber used by first-order operators; the Nyquist component is treated as zero.
    double odd_wavenumber(std::size_t i) const
    {
        return (nx_ % 2 == 0 && nx_ > 1 && i == nx_ / 2) ? 0.0 : wavenumber(i);
    }

    /// Integral of f over the box and the circle.
    double mass() const { return (L_ * L_ * 2.0 * std::numbers::pi * at(0, 0)).real(); }

    /// L2 norm over box x circle with measure dx dtheta.
    double l2_norm() const
    {
        double s = 0.0;
        for (const cplx& z : c_) s += std::norm(z);
        return std::sqrt(L_ * L_ * 2.0 * std::numbers::pi * s);
    }

    /// L2 norm of the harmonic-k part (k and -k together).
    double harmonic_norm(int k) const
    {
        double s = 0.0;
        for (std::size_t m = 0; m < modes(); ++m) {
            s += std::norm(at(m, k));
            if (k != 0) s += std::norm(at(m, -k));
        }
        return std::sqrt(L_ * L_ * 2.0 * std::numbers::pi * s);
    }

    /// Angular average <f> as a field with only the k = 0 harmonic.
    AngularField angular_average() const
    {
        AngularField out(L_, nx_, K_, speed_);
        for (std::size_t m = 0; m < modes(); ++m) out.at(m, 0) = at(m, 0);
        return out;
    }

    /// Grid values of the spatial marginal 2 pi c(x, 0).
    std::vector<double> spatial_marginal() const
    {
        std::vector<cplx> buf(modes());
        for (std::size_t m = 0; m < modes(); ++m) buf[m] = at(m, 0);
        detail::fft2(buf, nx_, FFTW_BACKWARD);
        std::vector<double> out(modes());
        for (std::size_t m = 0; m < modes(); ++m) out[m] = 2.0 * std::numbers::pi * buf[m].real();
        return out;
    }

    /// Point evaluation of the trigonometric interpolant.
    double evaluate(double x, double y, double theta) const
    {
        cplx s = 0.0;
        for (std::size_t i = 0; i < nx_; ++i)
            for (std::size_t j = 0; j < nx_; ++j) {
                const cplx sp = std::polar(1.0, wavenumber(i) * x + wavenumber(j) * y);
                const std::size_t m = i * nx_ + j;
                for (int k = -K_; k <= K_; ++k) s += at(m, k) * sp * std::polar(1.0, k * theta);
            }
        return s.real();
    }

    /// Exact masses of the spatial marginal on a bins x bins partition of the box (row-major).
    std::vector<double> spatial_bin_masses(std::size_t bins) const
    {
        const auto h = harmonic_bin_integrals(0, bins);
        std::vector<double> out(bins * bins);
        for (std::size_t b = 0; b < out.size(); ++b) out[b] = 2.0 * std::numbers::pi * h[b].real();
        return out;
    }

    /// Exact masses on (x bin, y bin, angle bin), index (b1 * bins_x + b2) * bins_theta + a.
    std::vector<double> joint_bin_masses(std::size_t bins_x, std::size_t bins_theta) const
    {
        if (bins_theta == 0) throw std::invalid_argument("bins must be positive");
        const double w = 2.0 * std::numbers::pi / static_cast<double>(bins_theta);
        std::vector<double> out(bins_x * bins_x * bins_theta, 0.0);
        for (int k = -K_; k <= K_; ++k) {
            const auto h = harmonic_bin_integrals(k, bins_x);
            for (std::size_t a = 0; a < bins_theta; ++a) {
                const double lo = a * w;
                const cplx arc = k == 0 ? cplx(w, 0.0)
                                        : (std::polar(1.0, k * (lo + w)) - std::polar(1.0, k * lo)) / cplx(0.0, k);
                for (std::size_t b = 0; b < h.size(); ++b) out[b * bins_theta + a] += (h[b] * arc).real();
            }
        }
        return out;
    }

    /// Exact masses of the angular marginal on equal arcs of [0, 2 pi).
    std::vector<double> angular_bin_masses(std::size_t bins) const
    {
        const double w = 2.0 * std::numbers::pi / static_cast<double>(bins);
        std::vector<double> out(bins);
        for (std::size_t b = 0; b < bins; ++b) {
            cplx s = at(0, 0) * w;
            for (int k = 1; k <= K_; ++k) {
                const double a = b * w;
                const cplx ik(0.0, static_cast<double>(k));
                s += at(0, k) * (std::exp(ik * (a + w)) - std::exp(ik * a)) / ik;
                s += at(0, -k) * (std::exp(-ik * (a + w)) - std::exp(-ik * a)) / (-ik);
            }
            out[b] = (L_ * L_ * s).real();
        }
        return out;
    }

    AngularField& operator-=(const AngularField& o)
    {
        check_compatible(o);
        for (std::size_t i = 0; i < c_.size(); ++i) c_[i] -= o.c_[i];
        return *this;
    }
    friend AngularField operator-(AngularField a, const AngularField& b) { return a -= b; }

    void check_compatible(const AngularField& o) const
    {
        if (o.nx_ != nx_ || o.K_ != K_ || o.L_ != L_ || o.speed_ != speed_) throw std::invalid_argument("field shape mismatch");
    }

  private:
    // int over spatial bin (b1, b2) of the harmonic-k coefficient field
    std::vector<cplx> harmonic_bin_integrals(int k, std::size_t bins) const
    {
        if (bins == 0) throw std::invalid_argument("bins must be positive");
        const double w = L_ / static_cast<double>(bins);
        // I[b][i] = int over bin b of e^{i kappa_i x} dx
        std::vector<cplx> I(bins * nx_);
        for (std::size_t b = 0; b < bins; ++b)
            for (std::size_t i = 0; i < nx_; ++i) {
                const double q = wavenumber(i);
                const double a = b * w;
                I[b * nx_ + i] = q == 0.0 ? cplx(w, 0.0) : (std::polar(1.0, q * (a + w)) - std::polar(1.0, q * a)) / cplx(0.0, q);
            }
        std::vector<cplx> tmp(bins * nx_, 0.0);  // tmp[b1][j] = sum_i I[b1][i] c[i][j]
        for (std::size_t b = 0; b < bins; ++b)
            for (std::size_t i = 0; i < nx_; ++i) {
                const cplx f = I[b * nx_ + i];
                for (std::size_t j = 0; j < nx_; ++j) tmp[b * nx_ + j] += f * at(i * nx_ + j, k);
            }
        std::vector<cplx> out(bins * bins);
        for (std::size_t b1 = 0; b1 < bins; ++b1)
            for (std::size_t b2 = 0; b2 < bins; ++b2) {
                cplx s = 0.0;
                for (std::size_t j = 0; j < nx_; ++j) s += tmp[b1 * nx_ + j] * I[b2 * nx_ + j];
                out[b1 * bins + b2] = s;
            }
        return out;
    }

    double L_ = 1.0;
    std::size_t nx_ = 0;
    int K_ = 0;
    double speed_ = 1.0;
    std::vector<cplx> c_;
};

/// Relative grid L2 distance between two spatial marginals.
inline double relative_l2(const std::vector<double>& a, const std::vector<double>& ref)
{
    if (a.size() != ref.size()) throw std::invalid_argument("size mismatch");
    double d = 0.0, r = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += (a[i] - ref[i]) * (a[i] - ref[i]);
        r += ref[i] * ref[i];
    }
    return r > 0.0 ? std::sqrt(d / r) : std::sqrt(d);
}

// ---------------------------------------------------------------------------
// Snapshot format: "LLKF", u32 version, u32 nx, u32 K, f64 L, f64 speed, then
// complex f64 pairs in coefficient order; all little-endian.

namespace detail {

inline bool little_endian()
{
    const std::uint16_t one = 1;
    unsigned char b;
    std::memcpy(&b, &one, 1);
    return b == 1;
}

template <class T>
void put_le(std::ostream& os, T v)
{
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if (!little_endian()) std::reverse(b, b + sizeof(T));
    os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(std::istream& is)
{
    unsigned char b[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw std::runtime_error("truncated LLKF snapshot");
    if (!little_endian()) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

}  // namespace detail

inline constexpr std::uint32_t kSnapshotVersion = 1;

inline void save_snapshot(const AngularField& f, const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path);
    os.write("LLKF", 4);
    detail::put_le<std::uint32_t>(os, kSnapshotVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.nx()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.harmonics()));
    detail::put_le<double>(os, f.box());
    detail::put_le<double>(os, f.speed());
    for (const cplx& z : f.coefficients()) {
        detail::put_le<double>(os, z.real());
        detail::put_le<double>(os, z.imag());
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline AngularField load_snapshot(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "LLKF", 4) != 0) throw std::runtime_error("not an LLKF snapshot: " + path);
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kSnapshotVersion) throw std::runtime_error("unsupported LLKF version " + std::to_string(version));
    const auto nx = detail::get_le<std::uint32_t>(is);
    const auto K = detail::get_le<std::uint32_t>(is);
    const double L = detail::get_le<double>(is);
    const double speed = detail::get_le<double>(is);
    AngularField f(L, nx, static_cast<int>(K), speed);
    for (cplx& z : f.coefficients()) {
        const double re = detail::get_le<double>(is);
        const double im = detail::get_le<double>(is);
        z = {re, im};
    }
    return f;
}

// ---------------------------------------------------------------------------
// Collision spectra

enum class CollisionKind { BoltzmannEps, Landau, RenormalizedLandau };

/// Eigenvalues lambda_k (k = 0..K) of a rotation-invariant collision operator.
struct CollisionSpectrum {
    CollisionKind kind = CollisionKind::Landau;
    std::vector<double> eigenvalues;

    int max_harmonic() const { return static_cast<int>(eigenvalues.size()) - 1; }
    double operator[](int k) const { return eigenvalues.at(static_cast<std::size_t>(std::abs(k))); }
};

/// lambda_k = mu |v| eps^{-2a} int_-1^1 (cos k theta(rho) - 1) d rho.
inline CollisionSpectrum boltzmann_spectrum(const ScatteringModel& m, double mu, int K)
{
    if (K < 1) throw std::invalid_argument("K must be >= 1");
    if (!m.has_physics()) throw std::invalid_argument("boltzmann_spectrum needs a model built from (eps, alpha, phi0, |v|)");
    CollisionSpectrum s;
    s.kind = CollisionKind::BoltzmannEps;
    s.eigenvalues.assign(static_cast<std::size_t>(K) + 1, 0.0);
    if (m.index() >= 1.0) return s;
    const double pref = mu * m.speed() * std::pow(m.epsilon(), -2.0 * m.alpha());
    const double delta = layer_hint(m);
    for (int k = 1; k <= K; ++k) {
        // cos x - 1 = -2 sin^2(x / 2), free of cancellation for small angles
        auto g = [k](double th) {
            const double s = std::sin(0.5 * k * th);
            return -2.0 * s * s;
        };
        s.eigenvalues[static_cast<std::size_t>(k)] = 2.0 * pref * integrate_over_impact(m, g, delta, 1e-11).value;
    }
    return s;
}

/// Landau operator (mu / (2|v|)) Delta on the circle of radius |v|.
inline CollisionSpectrum landau_spectrum(double mu, double speed, int K)
{
    if (K < 1) throw std::invalid_argument("K must be >= 1");
    CollisionSpectrum s;
    s.kind = CollisionKind::Landau;
    const double c = mu / (2.0 * speed);
    for (int k = 0; k <= K; ++k) s.eigenvalues.push_back(k == 0 ? 0.0 : -c * k * k / (speed * speed));
    return s;
}

/// Landau operator B Delta with a renormalized coefficient B.
inline CollisionSpectrum renormalized_landau_spectrum(double B, double speed, int K)
{
    if (K < 1) throw std::invalid_argument("K must be >= 1");
    CollisionSpectrum s;
    s.kind = CollisionKind::RenormalizedLandau;
    for (int k = 0; k <= K; ++k) s.eigenvalues.push_back(k == 0 ? 0.0 : -B * k * k / (speed * speed));
    return s;
}

// ---------------------------------------------------------------------------
// Time stepping

class CflError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

/// Largest transported wavenumber magnitude of a field.
inline double max_transport_wavenumber(const AngularField& f)
{
    double km = 0.0;
    for (std::size_t i = 0; i < f.nx(); ++i)
        for (std::size_t j = 0; j < f.nx(); ++j) km = std::max(km, std::hypot(f.odd_wavenumber(i), f.odd_wavenumber(j)));
    return km;
}

/*!
 * Exact sub-flows of f_t + s v.grad f = c L f on a fixed field shape.
 *
 * Transport couples harmonic k to k +- 1 per spatial mode. With
 * d_k = e^{i k phi} c_k (phi the direction of kappa) the truncated system is
 * d' = -i (s |v| |kappa| / 2) T d with T the tridiagonal matrix of ones and a
 * zero closure beyond |k| = K. T is diagonalized by the type-I sine
 * transform, so each step is a DST, a phase per eigenvector and a DST back.
 */
class KineticStepper {
  public:
    KineticStepper(const AngularField& shape, const CollisionSpectrum& spec, double transport_scale, double collision_scale)
        : nx_(shape.nx()), K_(shape.harmonics()), N_(2 * shape.harmonics() + 1), spec_(spec), s_(transport_scale),
          c_(collision_scale), speed_(shape.speed())
    {
        if (spec.max_harmonic() < K_) throw std::invalid_argument("spectrum has fewer harmonics than the field");
        std::vector<double> a(N_), b(N_);
        plan_ = detail::FftPlan(fftw_plan_r2r_1d(static_cast<int>(N_), a.data(), b.data(), FFTW_RODFT00,
                                                 FFTW_ESTIMATE | FFTW_UNALIGNED));
        cosm_.resize(N_);
        for (std::size_t m = 0; m < N_; ++m) cosm_[m] = std::cos(std::numbers::pi * (m + 1) / (N_ + 1.0));
        kx_.resize(nx_ * nx_);
        ky_.resize(nx_ * nx_);
        for (std::size_t i = 0; i < nx_; ++i)
            for (std::size_t j = 0; j < nx_; ++j) {
                kx_[i * nx_ + j] = shape.odd_wavenumber(i);
                ky_[i * nx_ + j] = shape.odd_wavenumber(j);
            }
        kmax_ = max_transport_wavenumber(shape);
    }

    double max_wavenumber() const { return kmax_; }

    /// Throws CflError unless dt resolves both the transport and the collision scale.
    void check_cfl(double dt) const
    {
        const double tr = dt * std::abs(s_) * speed_ * kmax_;
        const double co = dt * std::abs(c_) * std::abs(spec_[K_]);
        if (!(tr < 0.5)) throw CflError("transport CFL number " + std::to_string(tr) + " >= 0.5; reduce dt");
        if (!(co < 0.5)) throw CflError("collision CFL number " + std::to_string(co) + " >= 0.5; reduce dt");
    }

    void transport(AngularField& f, double tau) const
    {
        if (s_ == 0.0 || tau == 0.0) return;
        parallel_for(f.modes(), [&](std::size_t mode) { transport_mode(f.mode_data(mode), mode, tau); }, 64);
    }

    void collide(AngularField& f, double tau) const
    {
        if (c_ == 0.0 || tau == 0.0) return;
        std::vector<double> g(static_cast<std::size_t>(K_) + 1);
        for (int k = 0; k <= K_; ++k) g[static_cast<std::size_t>(k)] = std::exp(c_ * spec_[k] * tau);
        for (std::size_t m = 0; m < f.modes(); ++m) {
            cplx* d = f.mode_data(m);
            for (int k = -K_; k <= K_; ++k) d[k + K_] *= g[static_cast<std::size_t>(std::abs(k))];
        }
    }

    /// Strang splitting: half transport, collision, half transport; adjacent halves merged.
    void advance(AngularField& f, double t, double dt) const
    {
        if (t < 0.0 || !(dt > 0.0)) throw std::invalid_argument("need t >= 0 and dt > 0");
        check_cfl(dt);
        if (t == 0.0) return;
        const auto n = static_cast<std::size_t>(std::ceil(t / dt - 1e-9));
        const double h = t / static_cast<double>(n);
        transport(f, 0.5 * h);
        for (std::size_t i = 0; i < n; ++i) {
            collide(f, h);
            transport(f, i + 1 < n ? h : 0.5 * h);
        }
    }

  private:
    void transport_mode(cplx* c, std::size_t mode, double tau) const
    {
        const double kx = kx_[mode], ky = ky_[mode];
        const double kn = std::hypot(kx, ky);
        if (kn == 0.0) return;
        thread_local std::vector<double> re, im, tre, tim;
        re.resize(N_);
        im.resize(N_);
        tre.resize(N_);
        tim.resize(N_);
        const cplx e(kx / kn, ky / kn);
        // gauge d_k = e^{i k phi} c_k, starting from k = -K
        cplx g = std::pow(std::conj(e), K_);
        for (std::size_t j = 0; j < N_; ++j) {
            const cplx d = c[j] * g;
            re[j] = d.real();
            im[j] = d.imag();
            g *= e;
        }
        fftw_execute_r2r(plan_.get(), re.data(), tre.data());
        fftw_execute_r2r(plan_.get(), im.data(), tim.data());
        const double a = s_ * speed_ * kn * tau;
        const double scale = 1.0 / (2.0 * (N_ + 1.0));
        for (std::size_t m = 0; m < N_; ++m) {
            const cplx z = cplx(tre[m], tim[m]) * std::polar(scale, -a * cosm_[m]);
            tre[m] = z.real();
            tim[m] = z.imag();
        }
        fftw_execute_r2r(plan_.get(), tre.data(), re.data());
        fftw_execute_r2r(plan_.get(), tim.data(), im.data());
        g = std::pow(e, K_);
        for (std::size_t j = 0; j < N_; ++j) {
            c[j] = cplx(re[j], im[j]) * g;
            g *= std::conj(e);
        }
    }

    std::size_t nx_;
    int K_;
    std::size_t N_;
    CollisionSpectrum spec_;
    double s_, c_, speed_;
    double kmax_ = 0.0;
    detail::FftPlan plan_;
    std::vector<double> cosm_, kx_, ky_;
};

/// Advance f by f_t + transport_scale v.grad f = collision_scale L f over [0, t].
inline AngularField evolve_kinetic(AngularField f, const CollisionSpectrum& spec, double transport_scale,
                                   double collision_scale, double t, double dt)
{
    KineticStepper(f, spec, transport_scale, collision_scale).advance(f, t, dt);
    return f;
}

/// Largest step satisfying the CFL bounds with the given safety fraction of 0.5.
inline double stable_dt(const AngularField& f, const CollisionSpectrum& spec, double transport_scale,
                        double collision_scale, double safety = 0.9)
{
    const double tr = std::abs(transport_scale) * f.speed() * max_transport_wavenumber(f);
    const double co = std::abs(collision_scale) * std::abs(spec[f.harmonics()]);
    const double rate = std::max(tr, co);
    return rate > 0.0 ? safety * 0.5 / rate : std::numeric_limits<double>::infinity();
}

/// Observed order p from three step sizes h, h/2, h/4 of a convergent quantity.
inline double richardson_order(double e_h_h2, double e_h2_h4) { return std::log2(e_h_h2 / e_h2_h4); }

// ---------------------------------------------------------------------------
// Heat equation

/// Exact periodic solution of rho_t = D Laplacian rho on the grid.
inline std::vector<double> heat_solve(const std::vector<double>& rho0, double L, std::size_t nx, double D, double t)
{
    if (rho0.size() != nx * nx) throw std::invalid_argument("grid size mismatch");
    if (!(D > 0.0)) throw std::invalid_argument("D must be > 0");
    if (t == 0.0) return rho0;
    std::vector<cplx> buf(rho0.begin(), rho0.end());
    detail::fft2(buf, nx, FFTW_FORWARD);
    AngularField shape(L, nx, 0, 1.0);
    for (std::size_t i = 0; i < nx; ++i)
        for (std::size_t j = 0; j < nx; ++j) {
            const double k2 = shape.wavenumber(i) * shape.wavenumber(i) + shape.wavenumber(j) * shape.wavenumber(j);
            buf[i * nx + j] *= std::exp(-D * k2 * t) / static_cast<double>(nx * nx);
        }
    detail::fft2(buf, nx, FFTW_BACKWARD);
    std::vector<double> out(nx * nx);
    for (std::size_t m = 0; m < nx * nx; ++m) out[m] = buf[m].real();
    return out;
}

// ---------------------------------------------------------------------------
// Hilbert expansion

struct HilbertReport {
    double generator_coefficient = 0.0;  // c in L = c Delta
    double residual_first = 0.0;         // || v.grad g0 - L g1 || / || v.grad g0 ||
    double solvability = 0.0;            // || <d_t g0 + v.grad g1> || / || d_t g0 || with d_t g0 = D Lap g0
    double d_extracted = 0.0;            // mean over active modes
    double d_spread = 0.0;               // max |D_mode - d_extracted|
    AngularField g1, g2;
};

class SolvabilityError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

/*!
 * First Hilbert coefficients of g_t + eta v.grad g = eta^2 L g with L = c Delta,
 * c = mu / (2|v|), for an angle-independent leading term g0 (only its k = 0
 * harmonic is read). g1 = L^{-1}(v.grad g0) lives on k = +-1; the k = 0 part of
 * d_t g0 + v.grad g1 must vanish when g0 obeys the heat equation with D, and
 * g2 = L^{-1} of the remainder lives on k = +-2.
 */
inline HilbertReport hilbert_check(const AngularField& g0, double mu, double D, double tol = 1e-8)
{
    const double v = g0.speed();
    const double c = mu / (2.0 * v);
    if (g0.harmonics() < 2) throw std::invalid_argument("hilbert_check needs K >= 2");
    HilbertReport r;
    r.generator_coefficient = c;
    r.g1 = AngularField(g0.box(), g0.nx(), g0.harmonics(), v);
    r.g2 = AngularField(g0.box(), g0.nx(), g0.harmonics(), v);
    const std::size_t n = g0.nx();
    auto lap_inv = [&](int k) { return -(v * v) / (c * k * k); };  // (c Delta)^{-1} on harmonic k
    double num1 = 0.0, den1 = 0.0, num2 = 0.0, den2 = 0.0, dsum = 0.0, dcount = 0.0;
    std::vector<double> dmode;
    double amp_max = 0.0;
    for (std::size_t m = 0; m < g0.modes(); ++m) amp_max = std::max(amp_max, std::abs(g0.at(m, 0)));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t m = i * n + j;
            const double kx = g0.odd_wavenumber(i), ky = g0.odd_wavenumber(j);
            const cplx a = g0.at(m, 0);
            // v.grad e^{i kappa x} = i |v| / 2 [(kx - i ky) e^{i theta} + (kx + i ky) e^{-i theta}]
            const cplx up = cplx(0, 0.5 * v) * cplx(kx, -ky), dn = cplx(0, 0.5 * v) * cplx(kx, ky);
            const cplx s1p = up * a, s1m = dn * a;  // v.grad g0 on k = +-1
            r.g1.at(m, 1) = lap_inv(1) * s1p;
            r.g1.at(m, -1) = lap_inv(1) * s1m;
            // residual of (i): L g1 applied as c * (-k^2 / |v|^2)
            const cplx l1p = c * (-1.0 / (v * v)) * r.g1.at(m, 1), l1m = c * (-1.0 / (v * v)) * r.g1.at(m, -1);
            num1 += std::norm(s1p - l1p) + std::norm(s1m - l1m);
            den1 += std::norm(s1p) + std::norm(s1m);
            // v.grad g1: k = 0 and k = +-2 parts
            const cplx mean = dn * r.g1.at(m, 1) + up * r.g1.at(m, -1);
            const cplx p2 = up * r.g1.at(m, 1), m2 = dn * r.g1.at(m, -1);
            const double odd2 = kx * kx + ky * ky;
            const cplx dt_g0 = -D * odd2 * a;
            num2 += std::norm(dt_g0 + mean);
            den2 += std::norm(dt_g0);
            r.g2.at(m, 2) = lap_inv(2) * p2;
            r.g2.at(m, -2) = lap_inv(2) * m2;
            if (odd2 > 0.0 && std::abs(a) > 1e-10 * amp_max) {
                const double dm = (mean / (odd2 * a)).real();
                dmode.push_back(dm);
                dsum += dm;
                dcount += 1.0;
            }
        }
    r.residual_first = den1 > 0.0 ? std::sqrt(num1 / den1) : std::sqrt(num1);
    r.solvability = den2 > 0.0 ? std::sqrt(num2 / den2) : std::sqrt(num2);
    r.d_extracted = dcount > 0.0 ? dsum / dcount : 0.0;
    for (double dm : dmode) r.d_spread = std::max(r.d_spread, std::abs(dm - r.d_extracted));
    if (r.solvability > tol)
        throw SolvabilityError("Hilbert solvability violated (" + std::to_string(r.solvability) +
                               "); D does not match the generator");
    return r;
}

// ---------------------------------------------------------------------------
// Relaxation to the angular average

struct RelaxationReport {
    double eta = 0.0;
    double lambda1 = 0.0;  // first nonzero eigenvalue of L (negative)
    std::vector<double> times;
    std::vector<double> deviation;  // || g - <g> ||_L2
    std::vector<double> envelope;   // exp(eta^2 lambda1 t) || g0 - <g0> ||
    std::vector<double> first_harmonic;  // || harmonic +-1 ||
    double fitted_c = 0.0;          // smallest C with deviation <= envelope + C / eta (1 - e^{eta^2 lambda1 t})
    double fitted_log_rate = 0.0;   // slope of log first_harmonic over the grid
};

/// Evolve the rescaled equation g_t + eta v.grad g = eta^2 L g and track || g - <g> ||.
inline RelaxationReport relaxation_check(const AngularField& f0, const CollisionSpectrum& spec, double eta,
                                         const std::vector<double>& t_grid, double dt = 0.0)
{
    if (!std::is_sorted(t_grid.begin(), t_grid.end()) || t_grid.empty() || t_grid.front() < 0.0)
        throw std::invalid_argument("t_grid must be sorted and nonnegative");
    RelaxationReport r;
    r.eta = eta;
    r.lambda1 = spec[1];
    KineticStepper stepper(f0, spec, eta, eta * eta);
    if (dt <= 0.0) dt = stable_dt(f0, spec, eta, eta * eta);
    AngularField g = f0;
    const double r0 = (f0 - f0.angular_average()).l2_norm();
    double now = 0.0;
    for (double t : t_grid) {
        stepper.advance(g, t - now, dt);
        now = t;
        const double dev = (g - g.angular_average()).l2_norm();
        const double env = std::exp(eta * eta * r.lambda1 * t) * r0;
        r.times.push_back(t);
        r.deviation.push_back(dev);
        r.envelope.push_back(env);
        r.first_harmonic.push_back(g.harmonic_norm(1));
        const double grow = 1.0 - std::exp(eta * eta * r.lambda1 * t);
        if (grow > 0.0) r.fitted_c = std::max(r.fitted_c, (dev - env) * eta / grow);
    }
    if (r.times.size() >= 2 && r.first_harmonic.front() > 0.0 && r.first_harmonic.back() > 0.0)
        r.fitted_log_rate = (std::log(r.first_harmonic.back()) - std::log(r.first_harmonic.front())) /
                            (r.times.back() - r.times.front());
    return r;
}

}  // namespace lorentz
