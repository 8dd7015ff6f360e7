#pragma once

#include "lorentz/parallel.hpp"
#include "lorentz/rng.hpp"
#include "lorentz/scattering.hpp"
#include "lorentz/vec2.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lorentz {

using DiskId = std::uint64_t;

/// mu_eps = mu eps^{-(1 + 2 alpha)}, optionally divided by |log eps|.
inline double poisson_intensity(double mu, double epsilon, double alpha, bool log_density = false)
{
    double r = mu * std::pow(epsilon, -(1.0 + 2.0 * alpha));
    if (log_density) r /= std::abs(std::log(epsilon));
    return r;
}

struct Box {
    Vec2 lo;
    Vec2 hi;

    double area() const { return std::max(0.0, hi.x - lo.x) * std::max(0.0, hi.y - lo.y); }
    bool contains(Vec2 p) const { return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y; }

    /// Square of half-side r around c.
    static Box around(Vec2 c, double r) { return {{c.x - r, c.y - r}, {c.x + r, c.y + r}}; }
};

class TrajectoryExit : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Fields. A field exposes radius(), cell_size(), origin(), visit_cell(ix, iy, fn)
// with fn(DiskId, Vec2 center), center(id) and check_inside(p).

/*!
 * Poisson configuration on a box, sampled eagerly, with a uniform grid index.
 * Cells are at least 2 eps wide, so every disk meeting a cell has its center in
 * the 3x3 block around it.
 */
class ObstacleField {
  public:
    ObstacleField(std::vector<Vec2> centers, double radius, Box box, double intensity = 0.0)
        : centers_(std::move(centers)), radius_(radius), box_(box), intensity_(intensity)
    {
        if (!(radius > 0.0)) throw std::domain_error("radius must be positive");
        if (!(box.hi.x > box.lo.x && box.hi.y > box.lo.y)) throw std::domain_error("empty box");
        const double n = static_cast<double>(std::max<std::size_t>(centers_.size(), 1));
        // about four disks per cell, never below 2 eps
        h_ = std::max(2.0 * radius, std::sqrt(4.0 * box.area() / n));
        nx_ = std::max<long>(1, static_cast<long>(std::ceil((box.hi.x - box.lo.x) / h_)));
        ny_ = std::max<long>(1, static_cast<long>(std::ceil((box.hi.y - box.lo.y) / h_)));
        if (static_cast<double>(nx_) * static_cast<double>(ny_) > 4e8) {
            throw std::length_error("grid index too large for the box; enlarge eps or shrink the box");
        }
        start_.assign(static_cast<std::size_t>(nx_ * ny_ + 1), 0);
        std::vector<std::uint32_t> cell_of(centers_.size());
        for (std::size_t i = 0; i < centers_.size(); ++i) {
            cell_of[i] = static_cast<std::uint32_t>(cell_index(centers_[i]));
            ++start_[cell_of[i] + 1];
        }
        for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
        order_.resize(centers_.size());
        std::vector<std::uint32_t> fill(start_.begin(), start_.end() - 1);
        for (std::size_t i = 0; i < centers_.size(); ++i) order_[fill[cell_of[i]]++] = static_cast<std::uint32_t>(i);
    }

    double radius() const { return radius_; }
    double cell_size() const { return h_; }
    Vec2 origin() const { return box_.lo; }
    const Box& box() const { return box_; }
    double intensity() const { return intensity_; }
    std::size_t size() const { return centers_.size(); }
    const std::vector<Vec2>& centers() const { return centers_; }
    Vec2 center(DiskId id) const { return centers_[id]; }

    template <class Fn>
    void visit_cell(long ix, long iy, Fn&& fn) const
    {
        if (ix < 0 || iy < 0 || ix >= nx_ || iy >= ny_) return;
        const std::size_t c = static_cast<std::size_t>(iy * nx_ + ix);
        for (std::uint32_t k = start_[c]; k < start_[c + 1]; ++k) fn(static_cast<DiskId>(order_[k]), centers_[order_[k]]);
    }

    void check_inside(Vec2 p) const
    {
        if (!box_.contains(p)) {
            throw TrajectoryExit("trajectory left the sampling box at (" + std::to_string(p.x) + ", " +
                                 std::to_string(p.y) + "); pad the box by |v| t + eps");
        }
    }

  private:
    long cell_index(Vec2 p) const
    {
        long ix = std::clamp(static_cast<long>(std::floor((p.x - box_.lo.x) / h_)), 0L, nx_ - 1);
        long iy = std::clamp(static_cast<long>(std::floor((p.y - box_.lo.y) / h_)), 0L, ny_ - 1);
        return iy * nx_ + ix;
    }

    std::vector<Vec2> centers_;
    double radius_;
    Box box_;
    double intensity_;
    double h_ = 1.0;
    long nx_ = 1, ny_ = 1;
    std::vector<std::uint32_t> start_;
    std::vector<std::uint32_t> order_;
};

struct FieldConfig {
    double intensity = 0.0;  // mu_eps
    double radius = 0.0;     // eps
    Box box;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    double max_expected = 5e7;  // memory cap on E[N]
};

/// Poisson(mu_eps |box|) centers, i.i.d. uniform on the box; deterministic in (seed, stream).
inline ObstacleField sample_field(const FieldConfig& cfg)
{
    if (!(cfg.intensity >= 0.0)) throw std::domain_error("intensity must be nonnegative");
    if (!(cfg.box.hi.x > cfg.box.lo.x && cfg.box.hi.y > cfg.box.lo.y)) throw std::domain_error("empty box");
    const double mean = cfg.intensity * cfg.box.area();
    if (mean > cfg.max_expected) {
        throw std::length_error("expected obstacle count " + std::to_string(mean) + " exceeds the cap of " +
                                std::to_string(cfg.max_expected));
    }
    CounterRng rng(stream_key(cfg.seed, cfg.stream, 0x5eedf1e1dull));
    std::size_t n = 0;
    if (mean > 0.0) n = std::poisson_distribution<std::size_t>(mean)(rng);
    std::vector<Vec2> centers(n);
    for (auto& c : centers) {
        c.x = rng.uniform(cfg.box.lo.x, cfg.box.hi.x);
        c.y = rng.uniform(cfg.box.lo.y, cfg.box.hi.y);
    }
    return ObstacleField(std::move(centers), cfg.radius, cfg.box, cfg.intensity);
}

/// Exhaustive view of an ObstacleField: one cell containing every disk.
class BruteForceView {
  public:
    explicit BruteForceView(const ObstacleField& f) : f_(f) {}
    double radius() const { return f_.radius(); }
    double cell_size() const { return 1e300; }
    Vec2 origin() const { return {-5e299, -5e299}; }
    Vec2 center(DiskId id) const { return f_.center(id); }
    void check_inside(Vec2 p) const { f_.check_inside(p); }

    template <class Fn>
    void visit_cell(long ix, long iy, Fn&& fn) const
    {
        if (ix != 0 || iy != 0) return;
        for (std::size_t i = 0; i < f_.size(); ++i) fn(static_cast<DiskId>(i), f_.centers()[i]);
    }

  private:
    const ObstacleField& f_;
};

/*!
 * Poisson field on the whole plane, generated cell by cell on first touch.
 * The content of cell (ix, iy) is a pure function of (seed, stream, ix, iy),
 * so it does not depend on the order in which cells are visited. Not
 * thread-safe: use one instance per trajectory.
 */
class LazyPoissonField {
  public:
    LazyPoissonField(double intensity, double radius, std::uint64_t seed, std::uint64_t stream = 0)
        : intensity_(intensity), radius_(radius), seed_(seed), stream_(stream)
    {
        if (!(radius > 0.0)) throw std::domain_error("radius must be positive");
        if (!(intensity >= 0.0)) throw std::domain_error("intensity must be nonnegative");
        h_ = intensity > 0.0 ? std::max(2.0 * radius, std::sqrt(4.0 / intensity)) : 2.0 * radius;
        cell_mean_ = intensity * h_ * h_;
    }

    double radius() const { return radius_; }
    double cell_size() const { return h_; }
    Vec2 origin() const { return {0.0, 0.0}; }
    double intensity() const { return intensity_; }
    void check_inside(Vec2) const {}

    template <class Fn>
    void visit_cell(long ix, long iy, Fn&& fn) const
    {
        const auto& cell = fetch(ix, iy);
        const DiskId base = pack(ix, iy, 0);
        for (std::size_t j = 0; j < cell.size(); ++j) fn(base + j, cell[j]);
    }

    Vec2 center(DiskId id) const
    {
        const long ix = static_cast<long>((id >> 40) & kMask24) - kOffset;
        const long iy = static_cast<long>((id >> 16) & kMask24) - kOffset;
        return fetch(ix, iy).at(id & 0xFFFF);
    }

    std::size_t cells_generated() const { return cache_.size(); }

  private:
    static constexpr std::uint64_t kMask24 = (1u << 24) - 1;
    static constexpr long kOffset = 1L << 23;

    static DiskId pack(long ix, long iy, std::uint64_t j)
    {
        if (ix < -kOffset || ix >= kOffset || iy < -kOffset || iy >= kOffset) {
            throw std::out_of_range("lazy field cell index out of range");
        }
        return (static_cast<std::uint64_t>(ix + kOffset) << 40) | (static_cast<std::uint64_t>(iy + kOffset) << 16) | j;
    }

    const std::vector<Vec2>& fetch(long ix, long iy) const
    {
        const std::uint64_t key = pack(ix, iy, 0);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        CounterRng rng(stream_key(seed_, stream_, static_cast<std::uint64_t>(ix), static_cast<std::uint64_t>(iy)));
        std::size_t n = 0;
        if (cell_mean_ > 0.0) n = std::poisson_distribution<std::size_t>(cell_mean_)(rng);
        if (n > 0xFFFF) throw std::length_error("too many disks in one lazy cell");
        std::vector<Vec2> pts(n);
        for (auto& p : pts) {
            p.x = (static_cast<double>(ix) + rng.uniform()) * h_;
            p.y = (static_cast<double>(iy) + rng.uniform()) * h_;
        }
        return cache_.emplace(key, std::move(pts)).first->second;
    }

    double intensity_;
    double radius_;
    std::uint64_t seed_;
    std::uint64_t stream_;
    double h_ = 1.0;
    double cell_mean_ = 0.0;
    mutable std::unordered_map<std::uint64_t, std::vector<Vec2>> cache_;
};

// ---------------------------------------------------------------------------
// Trajectories

struct ParticleState {
    Vec2 position;
    Vec2 velocity;
    double time = 0.0;
    int coverage = 0;  // number of disks containing position
};

enum class EventKind { Entry, Exit, Reflect };

struct TrajectoryEvent {
    double time = 0.0;
    DiskId disk = 0;
    EventKind kind = EventKind::Entry;
    double rho = 0.0;        // cross(c - x, v_in / |v_in|) / eps
    bool tangency = false;
    Vec2 position;           // crossing point
    Vec2 velocity;           // velocity after the event
};

struct Pathologies {
    bool overlap = false;
    bool recollision = false;
    bool interference = false;
    bool chi1_violation = false;

    bool any() const { return overlap || recollision || interference || chi1_violation; }
};

struct TrajectoryLog {
    Vec2 start;
    Vec2 end;
    std::vector<TrajectoryEvent> events;
    std::vector<DiskId> initial_coverage;
    std::vector<DiskId> final_coverage;
    std::vector<DiskId> internal_ids;  // sorted
    std::vector<Vec2> internal_centers;
    Pathologies pathologies;
    int tangencies = 0;
};

struct EvolveResult {
    ParticleState state;
    TrajectoryLog log;
};

struct EvolveOptions {
    std::size_t event_cap = 1000000;
    double tangency_tol = 1e-12;  // relative to |v|^2
    bool flag_pathologies = true;
};

class EventCapExceeded : public std::runtime_error {
  public:
    EventCapExceeded(const std::string& what, TrajectoryLog partial)
        : std::runtime_error(what), partial_(std::move(partial))
    {
    }
    const TrajectoryLog& partial_log() const { return partial_; }

  private:
    TrajectoryLog partial_;
};

/// Total energy per unit mass: |v|^2/2 + k eps^alpha phi0.
inline double total_energy(const ParticleState& s, double barrier)
{
    return 0.5 * norm2(s.velocity) + s.coverage * barrier;
}

namespace detail {

struct Candidate {
    double s = std::numeric_limits<double>::infinity();
    DiskId id = 0;
    Vec2 center;
    bool exit = false;
};

/// Entry time along x + s v into the disk (c, eps), if moving toward it.
inline double entry_time(Vec2 x, Vec2 v, Vec2 c, double eps)
{
    const Vec2 d = x - c;
    const double b = dot(v, d);
    if (b >= 0.0) return std::numeric_limits<double>::infinity();
    const double a = norm2(v);
    const double cc = norm2(d) - eps * eps;
    const double disc = b * b - a * cc;
    if (disc <= 0.0) return std::numeric_limits<double>::infinity();
    if (cc <= 0.0) return 0.0;  // already on or just inside the rim while heading in
    return cc / (-b + std::sqrt(disc));
}

/// Exit time from a disk currently containing x.
inline double exit_time(Vec2 x, Vec2 v, Vec2 c, double eps)
{
    const Vec2 d = x - c;
    const double b = dot(v, d);
    const double a = norm2(v);
    const double cc = norm2(d) - eps * eps;
    const double disc = std::max(0.0, b * b - a * cc);
    double s = b > 0.0 ? -cc / (b + std::sqrt(disc)) : (-b + std::sqrt(disc)) / a;
    return std::max(0.0, s);
}

inline bool contains_id(const std::vector<std::pair<DiskId, Vec2>>& cov, DiskId id)
{
    for (const auto& p : cov)
        if (p.first == id) return true;
    return false;
}

/*!
 * Earliest entry into a disk not in cov along x + s v, s in [0, smax].
 * Walks grid cells along the ray, examining the new row/column of the 3x3
 * block each time it steps, and stops once the best hit precedes the exit
 * from the current cell.
 */
template <class Field>
Candidate next_entry(const Field& field, Vec2 x, Vec2 v, double smax,
                     const std::vector<std::pair<DiskId, Vec2>>& cov)
{
    Candidate best;
    const double eps = field.radius();
    const double h = field.cell_size();
    const Vec2 o = field.origin();
    auto consider = [&](DiskId id, Vec2 c) {
        if (contains_id(cov, id)) return;
        const double s = entry_time(x, v, c, eps);
        if (s < best.s) {
            best.s = s;
            best.id = id;
            best.center = c;
        }
    };

    long ix = static_cast<long>(std::floor((x.x - o.x) / h));
    long iy = static_cast<long>(std::floor((x.y - o.y) / h));
    for (long dx = -1; dx <= 1; ++dx)
        for (long dy = -1; dy <= 1; ++dy) field.visit_cell(ix + dx, iy + dy, consider);

    const long sx = v.x > 0.0 ? 1 : -1;
    const long sy = v.y > 0.0 ? 1 : -1;
    const double inf = std::numeric_limits<double>::infinity();
    const double tdx = v.x != 0.0 ? h / std::abs(v.x) : inf;
    const double tdy = v.y != 0.0 ? h / std::abs(v.y) : inf;
    double tmx = inf, tmy = inf;
    if (v.x != 0.0) {
        const double edge = o.x + static_cast<double>(ix + (sx > 0 ? 1 : 0)) * h;
        tmx = std::max(0.0, (edge - x.x) / v.x);
    }
    if (v.y != 0.0) {
        const double edge = o.y + static_cast<double>(iy + (sy > 0 ? 1 : 0)) * h;
        tmy = std::max(0.0, (edge - x.y) / v.y);
    }
    for (;;) {
        const double cell_exit = std::min(tmx, tmy);
        if (best.s <= cell_exit || cell_exit > smax) break;
        if (tmx < tmy) {
            ix += sx;
            tmx += tdx;
            for (long dy = -1; dy <= 1; ++dy) field.visit_cell(ix + sx, iy + dy, consider);
        } else {
            iy += sy;
            tmy += tdy;
            for (long dx = -1; dx <= 1; ++dx) field.visit_cell(ix + dx, iy + sy, consider);
        }
    }
    return best;
}

/// All disks whose closed disk contains p.
template <class Field>
std::vector<std::pair<DiskId, Vec2>> disks_containing(const Field& field, Vec2 p)
{
    std::vector<std::pair<DiskId, Vec2>> out;
    const double eps = field.radius();
    const double h = field.cell_size();
    const Vec2 o = field.origin();
    const long ix = static_cast<long>(std::floor((p.x - o.x) / h));
    const long iy = static_cast<long>(std::floor((p.y - o.y) / h));
    for (long dx = -1; dx <= 1; ++dx)
        for (long dy = -1; dy <= 1; ++dy)
            field.visit_cell(ix + dx, iy + dy, [&](DiskId id, Vec2 c) {
                if (norm2(p - c) < eps * eps) out.emplace_back(id, c);
            });
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

}  // namespace detail

/// Set pathology flags from the event log (see Pathologies for the conventions).
inline void flag_pathologies(TrajectoryLog& log, double eps)
{
    Pathologies p;
    // overlap: two internal disks intersect
    const auto& cs = log.internal_centers;
    for (std::size_t i = 0; i < cs.size() && !p.overlap; ++i)
        for (std::size_t j = i + 1; j < cs.size(); ++j)
            if (norm2(cs[i] - cs[j]) < 4.0 * eps * eps) {
                p.overlap = true;
                break;
            }

    // visits: an Entry opens one, a Reflect is one on its own; initial coverage counts as an open visit
    auto revisit = [](const std::vector<DiskId>& visits) {
        std::vector<DiskId> seen(visits);
        std::sort(seen.begin(), seen.end());
        return std::adjacent_find(seen.begin(), seen.end()) != seen.end();
    };
    std::vector<DiskId> forward(log.initial_coverage);
    for (const auto& e : log.events)
        if (e.kind != EventKind::Exit) forward.push_back(e.disk);
    p.recollision = revisit(forward);

    // Reversed time: Exit events become entries, final coverage is the open set.
    std::vector<DiskId> backward(log.final_coverage);
    for (auto it = log.events.rbegin(); it != log.events.rend(); ++it)
        if (it->kind != EventKind::Entry) backward.push_back(it->disk);
    p.interference = revisit(backward);

    p.chi1_violation = !log.initial_coverage.empty() || !log.final_coverage.empty();
    log.pathologies = p;
}

/*!
 * Exact flow in the piecewise-constant potential k eps^alpha phi0, k = number
 * of disks covering the particle. Straight segments between boundary
 * crossings, Snell step at each crossing.
 */
template <class Field>
EvolveResult evolve(const Field& field, const ScatteringModel& model, ParticleState start, double duration,
                    const EvolveOptions& opt = {})
{
    if (!(duration >= 0.0)) throw std::domain_error("duration must be nonnegative");
    if (!(norm2(start.velocity) > 0.0)) throw std::domain_error("zero velocity");
    const double eps = field.radius();
    const double barrier = model.barrier();
    field.check_inside(start.position);

    EvolveResult res;
    TrajectoryLog& log = res.log;
    log.start = start.position;

    auto cov = detail::disks_containing(field, start.position);
    for (const auto& c : cov) log.initial_coverage.push_back(c.first);
    std::vector<std::pair<DiskId, Vec2>> internal(cov.begin(), cov.end());

    Vec2 x = start.position;
    Vec2 v = start.velocity;
    const double t0 = start.time;
    double t = 0.0;

    for (;;) {
        const double remaining = duration - t;
        detail::Candidate best = detail::next_entry(field, x, v, remaining, cov);
        for (const auto& [id, c] : cov) {
            const double s = detail::exit_time(x, v, c, eps);
            if (s < best.s || (s == best.s && !best.exit)) {
                best.s = s;
                best.id = id;
                best.center = c;
                best.exit = true;
            }
        }
        if (!(best.s <= remaining)) {
            x += remaining * v;
            t = duration;
            break;
        }
        if (log.events.size() >= opt.event_cap) {
            log.end = x;
            throw EventCapExceeded("event cap of " + std::to_string(opt.event_cap) + " exceeded", std::move(log));
        }
        x += best.s * v;
        t += best.s;

        Vec2 normal = x - best.center;
        normal *= 1.0 / norm(normal);
        TrajectoryEvent ev;
        ev.time = t0 + t;
        ev.disk = best.id;
        ev.position = x;
        ev.rho = cross(best.center - x, v) / (norm(v) * eps);
        if (best.exit) {
            auto r = refract_velocity(v, normal, -barrier, opt.tangency_tol);
            v = r.velocity;
            // a grazing crossing may carry a normal component of the wrong sign
            if (const double vn = dot(v, normal); vn < 0.0) v -= 2.0 * vn * normal;
            ev.kind = EventKind::Exit;
            ev.tangency = r.tangency;
            std::erase_if(cov, [&](const auto& p) { return p.first == best.id; });
        } else {
            auto r = refract_velocity(v, normal, barrier, opt.tangency_tol);
            v = r.velocity;
            ev.tangency = r.tangency;
            if (r.reflected) {
                ev.kind = EventKind::Reflect;
            } else {
                if (const double vn = dot(v, normal); vn > 0.0) v -= 2.0 * vn * normal;
                ev.kind = EventKind::Entry;
                cov.emplace_back(best.id, best.center);
            }
            if (!detail::contains_id(internal, best.id)) internal.emplace_back(best.id, best.center);
        }
        if (ev.tangency) ++log.tangencies;
        ev.velocity = v;
        log.events.push_back(ev);
        field.check_inside(x);
    }
    field.check_inside(x);

    log.end = x;
    for (const auto& c : cov) log.final_coverage.push_back(c.first);
    std::sort(log.final_coverage.begin(), log.final_coverage.end());
    std::sort(internal.begin(), internal.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& c : internal) {
        log.internal_ids.push_back(c.first);
        log.internal_centers.push_back(c.second);
    }
    if (opt.flag_pathologies) flag_pathologies(log, eps);

    res.state.position = x;
    res.state.velocity = v;
    res.state.time = t0 + duration;
    res.state.coverage = static_cast<int>(cov.size());
    return res;
}

/// Disks met by the segment [a, b] (closed disks), sorted by id.
template <class Field>
std::vector<DiskId> disks_hit_by_segment(const Field& field, Vec2 a, Vec2 b)
{
    std::vector<DiskId> out;
    const double eps = field.radius();
    const double h = field.cell_size();
    const Vec2 o = field.origin();
    const Vec2 d = b - a;
    const double len2 = norm2(d);
    auto test = [&](DiskId id, Vec2 c) {
        double s = len2 > 0.0 ? std::clamp(dot(c - a, d) / len2, 0.0, 1.0) : 0.0;
        if (norm2(a + s * d - c) <= eps * eps) out.push_back(id);
    };
    // cells meeting the segment, by the same walk as next_entry
    long ix = static_cast<long>(std::floor((a.x - o.x) / h));
    long iy = static_cast<long>(std::floor((a.y - o.y) / h));
    const long ex = static_cast<long>(std::floor((b.x - o.x) / h));
    const long ey = static_cast<long>(std::floor((b.y - o.y) / h));
    std::vector<std::pair<long, long>> cells;
    auto block = [&](long cx, long cy) {
        for (long dx = -1; dx <= 1; ++dx)
            for (long dy = -1; dy <= 1; ++dy) cells.emplace_back(cx + dx, cy + dy);
    };
    block(ix, iy);
    const long sx = d.x > 0.0 ? 1 : -1;
    const long sy = d.y > 0.0 ? 1 : -1;
    const double inf = std::numeric_limits<double>::infinity();
    double tmx = d.x != 0.0 ? (o.x + static_cast<double>(ix + (sx > 0)) * h - a.x) / d.x : inf;
    double tmy = d.y != 0.0 ? (o.y + static_cast<double>(iy + (sy > 0)) * h - a.y) / d.y : inf;
    const double tdx = d.x != 0.0 ? h / std::abs(d.x) : inf;
    const double tdy = d.y != 0.0 ? h / std::abs(d.y) : inf;
    while ((ix != ex || iy != ey) && std::min(tmx, tmy) <= 1.0) {
        if (tmx < tmy) {
            ix += sx;
            tmx += tdx;
        } else {
            iy += sy;
            tmy += tdy;
        }
        block(ix, iy);
    }
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    for (auto [cx, cy] : cells) field.visit_cell(cx, cy, test);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Tube area

namespace detail {

/// Vertical slice [lo, hi] of a convex polygon at abscissa x; false if empty.
inline bool polygon_slice(const std::vector<Vec2>& poly, double x, double& lo, double& hi)
{
    lo = std::numeric_limits<double>::infinity();
    hi = -lo;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        Vec2 p = poly[i], q = poly[(i + 1) % poly.size()];
        if ((p.x - x) * (q.x - x) > 0.0) continue;
        if (p.x == q.x) {
            lo = std::min({lo, p.y, q.y});
            hi = std::max({hi, p.y, q.y});
            continue;
        }
        const double y = p.y + (q.y - p.y) * (x - p.x) / (q.x - p.x);
        lo = std::min(lo, y);
        hi = std::max(hi, y);
    }
    return hi > lo;
}

}  // namespace detail

/*!
 * Area of the eps-neighbourhood of the logged polyline.
 *
 * Cap-free (default): union of the segment rectangles of half-width eps with
 * round joins at interior vertices, so a straight path of length l gives
 * 2 eps l. With caps the end disks are added (full Minkowski sausage).
 * Exact per-abscissa interval unions integrated with composite Gauss-Legendre.
 */
inline double tube_area(const std::vector<Vec2>& path, double eps, bool caps = false, int panels_per_piece = 48)
{
    std::vector<Vec2> pts;
    for (Vec2 p : path)
        if (pts.empty() || norm2(p - pts.back()) > 0.0) pts.push_back(p);
    std::vector<std::vector<Vec2>> rects;
    std::vector<Vec2> disks;
    std::vector<double> breaks;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        Vec2 d = pts[i + 1] - pts[i];
        Vec2 nrm{-d.y, d.x};
        nrm *= eps / norm(d);
        rects.push_back({pts[i] + nrm, pts[i + 1] + nrm, pts[i + 1] - nrm, pts[i] - nrm});
        for (Vec2 c : rects.back()) breaks.push_back(c.x);
    }
    for (std::size_t i = 1; i + 1 < pts.size(); ++i) disks.push_back(pts[i]);
    if (caps && !pts.empty()) {
        disks.push_back(pts.front());
        if (pts.size() > 1) disks.push_back(pts.back());
    }
    for (Vec2 c : disks) {
        breaks.push_back(c.x - eps);
        breaks.push_back(c.x);
        breaks.push_back(c.x + eps);
    }
    if (breaks.empty()) return 0.0;
    std::sort(breaks.begin(), breaks.end());
    breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

    struct Shape {
        double xmin, xmax;
        int rect;  // index into rects, or -1 for a disk
        Vec2 c;
    };
    std::vector<Shape> shapes;
    for (std::size_t i = 0; i < rects.size(); ++i) {
        double lo = rects[i][0].x, hi = lo;
        for (Vec2 c : rects[i]) {
            lo = std::min(lo, c.x);
            hi = std::max(hi, c.x);
        }
        shapes.push_back({lo, hi, static_cast<int>(i), {}});
    }
    for (Vec2 c : disks) shapes.push_back({c.x - eps, c.x + eps, -1, c});
    std::sort(shapes.begin(), shapes.end(), [](const Shape& l, const Shape& r) { return l.xmin < r.xmin; });

    std::vector<const Shape*> active;
    std::vector<std::pair<double, double>> iv;
    auto slice_length = [&](double x) {
        iv.clear();
        double lo, hi;
        for (const Shape* sh : active) {
            if (sh->rect >= 0) {
                if (detail::polygon_slice(rects[sh->rect], x, lo, hi)) iv.emplace_back(lo, hi);
            } else {
                const double dx = x - sh->c.x;
                const double w2 = eps * eps - dx * dx;
                if (w2 > 0.0) iv.emplace_back(sh->c.y - std::sqrt(w2), sh->c.y + std::sqrt(w2));
            }
        }
        std::sort(iv.begin(), iv.end());
        double total = 0.0, cur_lo = 0.0, cur_hi = -std::numeric_limits<double>::infinity();
        for (auto [a, b] : iv) {
            if (a > cur_hi) {
                if (cur_hi > cur_lo) total += cur_hi - cur_lo;
                cur_lo = a;
                cur_hi = b;
            } else {
                cur_hi = std::max(cur_hi, b);
            }
        }
        if (cur_hi > cur_lo) total += cur_hi - cur_lo;
        return total;
    };

    // 8-point Gauss-Legendre; panels no wider than eps / 8 up to panels_per_piece
    static constexpr double gx[4] = {0.1834346424956498, 0.5255324099163290, 0.7966664774136267, 0.9602898564975363};
    static constexpr double gw[4] = {0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763};
    double area = 0.0;
    std::size_t next = 0;
    for (std::size_t k = 0; k + 1 < breaks.size(); ++k) {
        const double a = breaks[k], b = breaks[k + 1];
        while (next < shapes.size() && shapes[next].xmin < b) active.push_back(&shapes[next++]);
        std::erase_if(active, [a](const Shape* sh) { return sh->xmax <= a; });
        if (active.empty()) continue;
        const int panels = std::clamp(static_cast<int>(std::ceil(8.0 * (b - a) / eps)), 1, panels_per_piece);
        const double w = (b - a) / panels;
        for (int p = 0; p < panels; ++p) {
            const double mid = a + (p + 0.5) * w;
            for (int g = 0; g < 4; ++g) {
                area += 0.5 * w * gw[g] * (slice_length(mid - 0.5 * w * gx[g]) + slice_length(mid + 0.5 * w * gx[g]));
            }
        }
    }
    return area;
}

/// Tube of a logged trajectory: start, event points, end.
inline double tube_area(const TrajectoryLog& log, double eps, bool caps = false)
{
    std::vector<Vec2> path{log.start};
    for (const auto& e : log.events) path.push_back(e.position);
    path.push_back(log.end);
    return tube_area(path, eps, caps);
}

// ---------------------------------------------------------------------------
// Pathology statistics

struct PathologyConfig {
    double alpha = 0.05;
    double mu = 1.0;
    double phi0 = 1.0;
    double speed = 1.0;
    double duration = 1.0;
    bool log_horizon = false;  // run to duration * |log eps|
    bool log_density = false;  // intensity / |log eps|
    std::size_t samples = 1000;
    std::uint64_t seed = 1;
    EvolveOptions evolve;
};

struct Fraction {
    std::size_t count = 0;
    double value = 0.0;
    double stderr_ = 0.0;  // binomial
};

struct PathologyRow {
    double epsilon = 0.0;
    double horizon = 0.0;
    std::size_t samples = 0;
    Fraction overlap, recollision, interference, chi1, any;
    double mean_events = 0.0;
    std::size_t tangencies = 0;
    std::size_t capped = 0;  // trajectories that hit the event cap
};

struct SlopeFit {
    double slope = std::numeric_limits<double>::quiet_NaN();
    double stderr_ = std::numeric_limits<double>::quiet_NaN();
    std::size_t points = 0;
};

struct PathologyTable {
    std::vector<PathologyRow> rows;
    SlopeFit overlap, recollision, interference, chi1;
};

inline Fraction make_fraction(std::size_t count, std::size_t n)
{
    Fraction f;
    f.count = count;
    f.value = n ? static_cast<double>(count) / static_cast<double>(n) : 0.0;
    f.stderr_ = n ? std::sqrt(f.value * (1.0 - f.value) / static_cast<double>(n)) : 0.0;
    return f;
}

/// Weighted least-squares slope of log y against log x, weights from binomial errors.
inline SlopeFit fit_log_slope(const std::vector<double>& x, const std::vector<Fraction>& y)
{
    SlopeFit fit;
    double sw = 0, swx = 0, swy = 0, swxx = 0, swxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (y[i].count == 0) continue;
        const double lx = std::log(x[i]);
        const double ly = std::log(y[i].value);
        // delta method; Poisson floor for tiny counts
        const double rel = std::max(y[i].stderr_ / y[i].value, 1.0 / std::sqrt(static_cast<double>(y[i].count)));
        const double w = 1.0 / (rel * rel);
        sw += w;
        swx += w * lx;
        swy += w * ly;
        swxx += w * lx * lx;
        swxy += w * lx * ly;
        ++fit.points;
    }
    const double det = sw * swxx - swx * swx;
    if (fit.points < 2 || !(det > 0.0)) return fit;
    fit.slope = (sw * swxy - swx * swy) / det;
    fit.stderr_ = std::sqrt(sw / det);
    return fit;
}

/// Per-sample seed for trajectory i at ladder rung r.
inline std::uint64_t trajectory_stream(std::uint64_t seed, std::size_t rung, std::size_t i)
{
    return stream_key(seed, 0x7a7e11ull, rung, i);
}

/*!
 * Monte Carlo pathology fractions. Each sample draws an independent Poisson
 * field (lazy, whole plane), starts at the origin with a uniform direction and
 * runs to the horizon.
 */
inline PathologyRow pathology_row(const PathologyConfig& cfg, double eps, std::size_t rung = 0)
{
    const auto model = ScatteringModel::from_physics(eps, cfg.alpha, cfg.phi0, cfg.speed);
    const double intensity = poisson_intensity(cfg.mu, eps, cfg.alpha, cfg.log_density);
    const double horizon = cfg.duration * (cfg.log_horizon ? std::abs(std::log(eps)) : 1.0);
    const std::size_t M = cfg.samples;
    struct Out {
        Pathologies p;
        std::size_t events = 0;
        int tangencies = 0;
        bool capped = false;
    };
    std::vector<Out> out(M);
    parallel_for(M, [&](std::size_t i) {
        const std::uint64_t key = trajectory_stream(cfg.seed, rung, i);
        LazyPoissonField field(intensity, eps, key, 1);
        CounterRng rng(stream_key(key, 2));
        ParticleState s;
        s.velocity = from_polar(cfg.speed, rng.uniform(0.0, 2.0 * std::numbers::pi));
        try {
            auto r = evolve(field, model, s, horizon, cfg.evolve);
            out[i].p = r.log.pathologies;
            out[i].events = r.log.events.size();
            out[i].tangencies = r.log.tangencies;
        } catch (const EventCapExceeded& e) {
            out[i].capped = true;
            out[i].events = e.partial_log().events.size();
        }
    });
    PathologyRow row;
    row.epsilon = eps;
    row.horizon = horizon;
    row.samples = M;
    std::size_t ov = 0, rc = 0, in = 0, ch = 0, any = 0;
    double ev = 0.0;
    for (const auto& o : out) {
        ov += o.p.overlap;
        rc += o.p.recollision;
        in += o.p.interference;
        ch += o.p.chi1_violation;
        any += o.p.any() || o.capped;
        ev += static_cast<double>(o.events);
        row.tangencies += static_cast<std::size_t>(o.tangencies);
        row.capped += o.capped;
    }
    row.overlap = make_fraction(ov, M);
    row.recollision = make_fraction(rc, M);
    row.interference = make_fraction(in, M);
    row.chi1 = make_fraction(ch, M);
    row.any = make_fraction(any, M);
    row.mean_events = ev / static_cast<double>(M);
    return row;
}

inline PathologyTable pathology_rates(const PathologyConfig& cfg, const std::vector<double>& epsilons)
{
    PathologyTable table;
    for (std::size_t r = 0; r < epsilons.size(); ++r) table.rows.push_back(pathology_row(cfg, epsilons[r], r));
    std::vector<double> xs;
    std::vector<Fraction> ov, rc, in, ch;
    for (const auto& row : table.rows) {
        xs.push_back(row.epsilon);
        ov.push_back(row.overlap);
        rc.push_back(row.recollision);
        in.push_back(row.interference);
        ch.push_back(row.chi1);
    }
    table.overlap = fit_log_slope(xs, ov);
    table.recollision = fit_log_slope(xs, rc);
    table.interference = fit_log_slope(xs, in);
    table.chi1 = fit_log_slope(xs, ch);
    return table;
}

}  // namespace lorentz
