#pragma once

#include "lorentz/coefficients.hpp"
#include "lorentz/kinetic.hpp"
#include "lorentz/markov.hpp"
#include "lorentz/medium.hpp"
#include "lorentz/metrics.hpp"

#include <json.hpp>
#include <toml.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lorentz {

inline constexpr const char* kLabVersion = "1.0.0";

enum class Experiment { Item1, Item2, Item3, PathologyDecay, CoefficientSweep, Theorem51 };

inline const char* experiment_name(Experiment e)
{
    switch (e) {
    case Experiment::Item1: return "Item1";
    case Experiment::Item2: return "Item2";
    case Experiment::Item3: return "Item3";
    case Experiment::PathologyDecay: return "PathologyDecay";
    case Experiment::CoefficientSweep: return "CoefficientSweep";
    case Experiment::Theorem51: return "Theorem51";
    }
    return "?";
}

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// A downstream failure, annotated with the pipeline stage that raised it.
class PipelineError : public std::runtime_error {
  public:
    PipelineError(const std::string& stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(stage)
    {
    }
    const std::string& stage() const { return stage_; }

  private:
    std::string stage_;
};

class ReplayMismatch : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline Experiment parse_experiment(const std::string& s)
{
    for (auto e : {Experiment::Item1, Experiment::Item2, Experiment::Item3, Experiment::PathologyDecay,
                   Experiment::CoefficientSweep, Experiment::Theorem51})
        if (s == experiment_name(e)) return e;
    throw ConfigError("unknown experiment '" + s + "'");
}

struct PhysicsConfig {
    double alpha = 0.1;
    double mu = 1.0;
    double phi0 = 0.25;
    double speed = 1.0;
};

struct NumericsConfig {
    double L = 16.0;
    std::size_t nx = 32;
    int K = 24;
    double dt = 0.0;  // 0: largest stable step
    std::size_t samples = 20000;
    std::uint64_t seed = 1;
    std::size_t bins = 16;       // spatial bins per axis for Monte Carlo comparisons
    std::size_t angle_bins = 8;  // angular bins for joint comparisons
};

/// Default datum: centred Gaussian of the given width, smoothly cut off, times (1 + a cos theta) / (2 pi).
struct InitialConfig {
    double width = 1.0;  // 0: spatially uniform
    double angular_amplitude = 0.5;
};

struct IoConfig {
    std::string output_dir = "lorentz_out";
    std::vector<std::string> formats{"csv"};
    bool snapshots = false;
};

struct ExperimentConfig {
    Experiment experiment = Experiment::Item3;
    PhysicsConfig physics;
    std::vector<double> ladder;  // eps, or eta for Item1
    double lambda_exp = 0.0;
    std::vector<double> times{0.25, 0.5, 1.0};
    double tolerance = 0.05;
    NumericsConfig numerics;
    InitialConfig initial;
    IoConfig io;
};

inline bool invokes_theorem(Experiment e)
{
    return e == Experiment::Item1 || e == Experiment::Item2 || e == Experiment::Item3 || e == Experiment::Theorem51;
}

/// Upper end of the admissible Theorem 5.1 exponent window.
inline double lambda_bound(double alpha) { return (1.0 - 8.0 * alpha) / 11.0; }

inline void validate_config(const ExperimentConfig& c)
{
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    const auto& p = c.physics;
    if (invokes_theorem(c.experiment)) {
        if (!(p.alpha > 0.0 && p.alpha < 0.125)) fail("alpha must lie in (0, 1/8) for this experiment");
    } else if (!(p.alpha > 0.0 && p.alpha < 0.5)) {
        fail("alpha must lie in (0, 1/2)");
    }
    if (c.experiment == Experiment::Theorem51 && !(c.lambda_exp >= 0.0 && c.lambda_exp < lambda_bound(p.alpha)))
        fail("lambda_exp must satisfy 0 <= lambda < (1 - 8 alpha) / 11 = " + std::to_string(lambda_bound(p.alpha)));
    if (!(p.mu > 0.0) || !(p.speed > 0.0) || !std::isfinite(p.phi0)) fail("mu and speed must be positive");
    if (c.ladder.empty()) fail("ladder is empty");
    for (double x : c.ladder) {
        if (c.experiment == Experiment::Item1 ? !(x > 0.0 && std::isfinite(x)) : !(x > 0.0 && x < 1.0))
            fail(c.experiment == Experiment::Item1 ? "eta values must be positive" : "eps values must lie in (0, 1)");
    }
    if (c.ladder.size() > 1) {
        const bool up = c.ladder[1] > c.ladder[0];
        for (std::size_t i = 1; i < c.ladder.size(); ++i)
            if (up ? !(c.ladder[i] > c.ladder[i - 1]) : !(c.ladder[i] < c.ladder[i - 1]))
                fail("ladder must be strictly monotone");
    }
    if (c.times.empty()) fail("times is empty");
    for (std::size_t i = 0; i < c.times.size(); ++i)
        if (!(c.times[i] > 0.0) || (i > 0 && !(c.times[i] > c.times[i - 1])))
            fail("times must be positive and strictly increasing");
    if (!(c.tolerance > 0.0)) fail("tolerance must be positive");
    const auto& n = c.numerics;
    if (!(n.L > 0.0)) fail("L must be positive");
    if (n.nx < 2 || n.nx % 2 != 0) fail("nx must be even and >= 2");
    if (n.K < 2) fail("K must be >= 2");
    if (!(n.dt >= 0.0)) fail("dt must be >= 0");
    if (n.samples < 2) fail("samples must be >= 2");
    if (n.bins < 1 || n.angle_bins < 1) fail("bins must be >= 1");
    if (!(c.initial.width >= 0.0) || !(std::abs(c.initial.angular_amplitude) <= 1.0))
        fail("initial width must be >= 0 and |angular_amplitude| <= 1");
    if (c.io.output_dir.empty()) fail("output_dir is empty");
    if (c.io.formats.empty()) fail("formats is empty");
    for (const auto& f : c.io.formats)
        if (f != "csv" && f != "json") fail("unknown format '" + f + "'");
}

// ---------------------------------------------------------------------------
// TOML

namespace detail {

inline void check_keys(const toml::table& t, const std::string& where, std::initializer_list<const char*> allowed)
{
    for (auto&& [k, v] : t) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k.str() == a;
        if (!ok) throw ConfigError("unknown key '" + std::string(k.str()) + "' in " + where);
    }
}

inline const toml::table* subtable(const toml::table& t, const char* key)
{
    const auto* n = t.get(key);
    if (!n) return nullptr;
    if (!n->is_table()) throw ConfigError(std::string("[") + key + "] must be a table");
    return n->as_table();
}

template <class T>
void read(const toml::table* t, const char* key, T& out)
{
    if (!t) return;
    const auto* n = t->get(key);
    if (!n) return;
    if constexpr (std::is_same_v<T, double>) {
        auto v = n->value<double>();
        if (!v) throw ConfigError(std::string(key) + " must be a number");
        out = *v;
    } else if constexpr (std::is_same_v<T, bool>) {
        auto v = n->value<bool>();
        if (!v) throw ConfigError(std::string(key) + " must be a boolean");
        out = *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
        auto v = n->value<std::string>();
        if (!v) throw ConfigError(std::string(key) + " must be a string");
        out = *v;
    } else if constexpr (std::is_integral_v<T>) {
        if (!n->is_integer()) throw ConfigError(std::string(key) + " must be an integer");
        const auto v = n->value<std::int64_t>().value();
        if (v < 0) throw ConfigError(std::string(key) + " must be nonnegative");
        out = static_cast<T>(v);
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
        const auto* a = n->as_array();
        if (!a) throw ConfigError(std::string(key) + " must be an array");
        out.clear();
        for (const auto& e : *a) {
            auto v = e.value<double>();
            if (!v) throw ConfigError(std::string(key) + " must hold numbers");
            out.push_back(*v);
        }
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
        const auto* a = n->as_array();
        if (!a) throw ConfigError(std::string(key) + " must be an array");
        out.clear();
        for (const auto& e : *a) {
            auto v = e.value<std::string>();
            if (!v) throw ConfigError(std::string(key) + " must hold strings");
            out.push_back(*v);
        }
    }
}

/// Shortest round-trip text of x, always a TOML float.
inline std::string number(double x)
{
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    std::string s(buf, r.ptr);
    if (s.find_first_of(".e") == std::string::npos) s += ".0";
    return s;
}

inline std::string quoted(const std::string& s)
{
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"' || ch == '\\') out += '\\';
        out += ch;
    }
    return out + "\"";
}

}  // namespace detail

inline ExperimentConfig parse_config(const toml::table& t)
{
    using detail::read;
    detail::check_keys(t, "the top level",
                       {"experiment", "physics", "ladder", "lambda_exp", "times", "tolerance", "numerics", "initial", "io"});
    ExperimentConfig c;
    std::string name;
    read(&t, "experiment", name);
    if (name.empty()) throw ConfigError("experiment is required");
    c.experiment = parse_experiment(name);
    read(&t, "ladder", c.ladder);
    read(&t, "lambda_exp", c.lambda_exp);
    read(&t, "times", c.times);
    read(&t, "tolerance", c.tolerance);
    if (const auto* p = detail::subtable(t, "physics")) {
        detail::check_keys(*p, "[physics]", {"alpha", "mu", "phi0", "speed"});
        read(p, "alpha", c.physics.alpha);
        read(p, "mu", c.physics.mu);
        read(p, "phi0", c.physics.phi0);
        read(p, "speed", c.physics.speed);
    }
    if (const auto* n = detail::subtable(t, "numerics")) {
        detail::check_keys(*n, "[numerics]", {"L", "nx", "K", "dt", "samples", "seed", "bins", "angle_bins"});
        read(n, "L", c.numerics.L);
        read(n, "nx", c.numerics.nx);
        read(n, "K", c.numerics.K);
        read(n, "dt", c.numerics.dt);
        read(n, "samples", c.numerics.samples);
        read(n, "seed", c.numerics.seed);
        read(n, "bins", c.numerics.bins);
        read(n, "angle_bins", c.numerics.angle_bins);
    }
    if (const auto* i = detail::subtable(t, "initial")) {
        detail::check_keys(*i, "[initial]", {"width", "angular_amplitude"});
        read(i, "width", c.initial.width);
        read(i, "angular_amplitude", c.initial.angular_amplitude);
    }
    if (const auto* io = detail::subtable(t, "io")) {
        detail::check_keys(*io, "[io]", {"output_dir", "formats", "snapshots"});
        read(io, "output_dir", c.io.output_dir);
        read(io, "formats", c.io.formats);
        read(io, "snapshots", c.io.snapshots);
    }
    validate_config(c);
    return c;
}

inline ExperimentConfig parse_config_string(const std::string& text)
{
    try {
        return parse_config(toml::parse(text));
    } catch (const toml::parse_error& e) {
        throw ConfigError(std::string("TOML: ") + std::string(e.description()));
    }
}

inline ExperimentConfig load_config(const std::string& path)
{
    try {
        return parse_config(toml::parse_file(path));
    } catch (const toml::parse_error& e) {
        throw ConfigError(path + ": " + std::string(e.description()));
    }
}

/// Canonical TOML text of a config; the config hash is taken over this text.
inline std::string config_to_toml(const ExperimentConfig& c)
{
    using detail::number;
    auto list = [](const std::vector<double>& v) {
        std::string s = "[";
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + number(v[i]);
        return s + "]";
    };
    std::ostringstream o;
    o << "experiment = " << detail::quoted(experiment_name(c.experiment)) << "\n";
    o << "ladder = " << list(c.ladder) << "\n";
    o << "lambda_exp = " << number(c.lambda_exp) << "\n";
    o << "times = " << list(c.times) << "\n";
    o << "tolerance = " << number(c.tolerance) << "\n\n";
    o << "[physics]\nalpha = " << number(c.physics.alpha) << "\nmu = " << number(c.physics.mu)
      << "\nphi0 = " << number(c.physics.phi0) << "\nspeed = " << number(c.physics.speed) << "\n\n";
    o << "[numerics]\nL = " << number(c.numerics.L) << "\nnx = " << c.numerics.nx << "\nK = " << c.numerics.K
      << "\ndt = " << number(c.numerics.dt) << "\nsamples = " << c.numerics.samples << "\nseed = " << c.numerics.seed
      << "\nbins = " << c.numerics.bins << "\nangle_bins = " << c.numerics.angle_bins << "\n\n";
    o << "[initial]\nwidth = " << number(c.initial.width)
      << "\nangular_amplitude = " << number(c.initial.angular_amplitude) << "\n\n";
    o << "[io]\noutput_dir = " << detail::quoted(c.io.output_dir) << "\nformats = [";
    for (std::size_t i = 0; i < c.io.formats.size(); ++i) o << (i ? ", " : "") << detail::quoted(c.io.formats[i]);
    o << "]\nsnapshots = " << (c.io.snapshots ? "true" : "false") << "\n";
    return o.str();
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string config_hash(const ExperimentConfig& c)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_to_toml(c))));
    return buf;
}

// ---------------------------------------------------------------------------
// Tables

struct ConvergenceTable {
    std::string experiment;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::string config_hash;
    std::string provenance;
    double wall_clock = 0.0;
    std::vector<std::pair<std::string, double>> summary;
    std::vector<std::string> failures;

    bool passed() const { return failures.empty(); }

    std::size_t column(const std::string& name) const
    {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return i;
        throw std::out_of_range("no column '" + name + "'");
    }
    double at(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }

    std::optional<double> summary_value(const std::string& name) const
    {
        for (const auto& [k, v] : summary)
            if (k == name) return v;
        return std::nullopt;
    }
};

/// Columns that measure time rather than results; excluded from replay comparison.
inline bool is_runtime_column(const std::string& name) { return name == "runtime_s"; }

inline std::string table_to_csv(const ConvergenceTable& t)
{
    std::ostringstream o;
    o << "# experiment=" << t.experiment << "\n# config_hash=" << t.config_hash << "\n# provenance=" << t.provenance
      << "\n# wall_clock_s=" << detail::number(t.wall_clock) << "\n";
    for (const auto& [k, v] : t.summary) o << "# summary." << k << "=" << detail::number(v) << "\n";
    for (const auto& f : t.failures) o << "# failure=" << f << "\n";
    for (std::size_t i = 0; i < t.columns.size(); ++i) o << (i ? "," : "") << t.columns[i];
    o << "\n";
    for (const auto& r : t.rows) {
        for (std::size_t i = 0; i < r.size(); ++i) o << (i ? "," : "") << detail::number(r[i]);
        o << "\n";
    }
    return o.str();
}

inline ConvergenceTable table_from_csv(const std::string& text)
{
    ConvergenceTable t;
    std::istringstream in(text);
    std::string line;
    auto to_double = [](const std::string& s) {
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        double v = 0.0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::runtime_error("bad number '" + s + "' in table");
        return v;
    };
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(2, eq - 2), val = line.substr(eq + 1);
            if (key == "experiment") t.experiment = val;
            else if (key == "config_hash") t.config_hash = val;
            else if (key == "provenance") t.provenance = val;
            else if (key == "wall_clock_s") t.wall_clock = to_double(val);
            else if (key == "failure") t.failures.push_back(val);
            else if (key.rfind("summary.", 0) == 0) t.summary.emplace_back(key.substr(8), to_double(val));
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (t.columns.empty()) {
            t.columns = cells;
            continue;
        }
        if (cells.size() != t.columns.size()) throw std::runtime_error("table row width differs from header");
        std::vector<double> row;
        for (const auto& c : cells) row.push_back(to_double(c));
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline nlohmann::json table_to_json(const ConvergenceTable& t)
{
    nlohmann::json j;
    j["experiment"] = t.experiment;
    j["config_hash"] = t.config_hash;
    j["provenance"] = t.provenance;
    j["wall_clock_s"] = t.wall_clock;
    j["columns"] = t.columns;
    j["rows"] = t.rows;
    j["summary"] = nlohmann::json::object();
    for (const auto& [k, v] : t.summary) j["summary"][k] = v;
    j["failures"] = t.failures;
    j["passed"] = t.passed();
    return j;
}

// ---------------------------------------------------------------------------
// Initial datum

/*!
 * Gaussian of the given width centred in the box, multiplied by a smooth
 * radial cutoff that vanishes beyond 0.45 L, times (1 + a cos theta) / (2 pi).
 * The field and the sampler describe the same probability density.
 */
class InitialDatum {
  public:
    InitialDatum(double L, double width, double amplitude, double speed)
        : L_(L), w_(width), a_(amplitude), speed_(speed), R_(0.45 * L), R0_(0.3 * L)
    {
    }

    double spatial(double x, double y) const
    {
        if (w_ == 0.0) return 1.0;
        const double r = std::hypot(x - 0.5 * L_, y - 0.5 * L_);
        return std::exp(-r * r / (2.0 * w_ * w_)) * window(r);
    }
    double angular(double theta) const { return (1.0 + a_ * std::cos(theta)) / (2.0 * std::numbers::pi); }

    /// Unit-mass spectral field.
    AngularField field(std::size_t nx, int K) const
    {
        auto f = AngularField::from_function(L_, nx, K, speed_,
                                             [&](double x, double y, double th) { return spatial(x, y) * angular(th); });
        const double m = f.mass();
        for (auto& z : f.coefficients()) z /= m;
        return f;
    }

    std::pair<Vec2, Vec2> sample(CounterRng& rng) const
    {
        Vec2 x;
        if (w_ == 0.0) {
            x = {rng.uniform(0.0, L_), rng.uniform(0.0, L_)};
        } else {
            for (;;) {
                const double r = w_ * std::sqrt(-2.0 * std::log1p(-rng.uniform()));
                const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
                if (rng.uniform() < window(r)) {
                    x = {0.5 * L_ + r * std::cos(phi), 0.5 * L_ + r * std::sin(phi)};
                    break;
                }
            }
        }
        for (;;) {
            const double th = rng.uniform(0.0, 2.0 * std::numbers::pi);
            if (rng.uniform() * (1.0 + std::abs(a_)) < 1.0 + a_ * std::cos(th)) return {x, from_polar(speed_, th)};
        }
    }

  private:
    // C-infinity step from 1 at R0 to 0 at R
    double window(double r) const
    {
        if (r <= R0_) return 1.0;
        if (r >= R_) return 0.0;
        const double s = (r - R0_) / (R_ - R0_);
        const double a = std::exp(-1.0 / (1.0 - s)), b = std::exp(-1.0 / s);
        return a / (a + b);
    }

    double L_, w_, a_, speed_, R_, R0_;
};

inline InitialDatum initial_datum(const ExperimentConfig& c)
{
    return InitialDatum(c.numerics.L, c.initial.width, c.initial.angular_amplitude, c.physics.speed);
}

// ---------------------------------------------------------------------------
// Pipelines

struct Snapshot {
    std::string name;
    AngularField field;
};

struct RunResult {
    ConvergenceTable table;
    std::vector<Snapshot> snapshots;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Ladder indices ordered toward the limit: increasing eta, decreasing eps.
inline std::vector<std::size_t> limit_order(const ExperimentConfig& c)
{
    std::vector<std::size_t> idx(c.ladder.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const bool eta = c.experiment == Experiment::Item1;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return eta ? c.ladder[a] < c.ladder[b] : c.ladder[a] > c.ladder[b];
    });
    return idx;
}

/// values[rung] must strictly decrease toward the limit.
inline void require_decreasing(ConvergenceTable& t, const ExperimentConfig& c, const std::vector<double>& values,
                               const std::string& what)
{
    const auto ord = limit_order(c);
    for (std::size_t i = 1; i < ord.size(); ++i)
        if (!(values[ord[i]] < values[ord[i - 1]])) {
            t.failures.push_back(what + " does not decrease between ladder values " + number(c.ladder[ord[i - 1]]) +
                                 " and " + number(c.ladder[ord[i]]));
            return;
        }
}

/// Monte Carlo values may not rise toward the limit by more than 3 combined error bars.
inline void require_nonincreasing_within_noise(ConvergenceTable& t, const ExperimentConfig& c,
                                               const std::vector<double>& values, const std::vector<double>& errors,
                                               const std::string& what)
{
    const auto ord = limit_order(c);
    for (std::size_t i = 1; i < ord.size(); ++i) {
        const std::size_t a = ord[i - 1], b = ord[i];
        const double noise = 3.0 * std::hypot(errors[a], errors[b]);
        if (!(values[b] <= values[a] + noise)) {
            t.failures.push_back(what + " rises beyond Monte Carlo noise between ladder values " + number(c.ladder[a]) +
                                 " and " + number(c.ladder[b]));
            return;
        }
    }
}

inline std::string snapshot_name(std::size_t rung, std::size_t ti)
{
    return "field_r" + std::to_string(rung) + "_t" + std::to_string(ti) + ".llkf";
}

inline std::size_t spatial_bin(Vec2 x, double L, std::size_t bins)
{
    const auto bx = std::min(bins - 1, static_cast<std::size_t>(wrap_periodic(x.x, L) / L * bins));
    const auto by = std::min(bins - 1, static_cast<std::size_t>(wrap_periodic(x.y, L) / L * bins));
    return bx * bins + by;
}

inline std::size_t angle_bin(Vec2 v, std::size_t bins)
{
    return std::min(bins - 1, static_cast<std::size_t>(velocity_angle(v) / (2.0 * std::numbers::pi) * bins));
}

inline RunResult run_item1(const ExperimentConfig& c)
{
    RunResult out;
    auto& t = out.table;
    t.columns = {"eta", "t", "distance", "relative_distance", "self_deviation", "mode_error", "dt", "runtime_s"};
    const auto& n = c.numerics;
    const auto spec = landau_spectrum(c.physics.mu, c.physics.speed, n.K);
    const auto f0 = initial_datum(c).field(n.nx, n.K);
    const auto avg = f0.angular_average();
    const double ref = avg.l2_norm();
    // spatially uniform first-harmonic datum for the exact decay check
    const auto mode0 = AngularField::from_function(n.L, 2, n.K, c.physics.speed,
                                                   [](double, double, double th) { return 1.0 + std::cos(th - 0.3); });
    std::vector<std::vector<double>> dist(c.times.size(), std::vector<double>(c.ladder.size()));
    double worst_mode = 0.0;
    for (std::size_t r = 0; r < c.ladder.size(); ++r) {
        const double eta = c.ladder[r];
        const auto t0 = Clock::now();
        const double dt = n.dt > 0.0 ? n.dt : stable_dt(f0, spec, 1.0, eta);
        KineticStepper st(f0, spec, 1.0, eta);
        const auto rel = relaxation_check(mode0, spec, eta, c.times, n.dt);
        AngularField g = f0;
        double now = 0.0;
        for (std::size_t i = 0; i < c.times.size(); ++i) {
            st.advance(g, c.times[i] - now, dt);
            now = c.times[i];
            const double d = (g - avg).l2_norm();
            const double predicted = mode0.harmonic_norm(1) * std::exp(eta * eta * spec[1] * c.times[i]);
            const double mode_err = std::abs(rel.first_harmonic[i] / predicted - 1.0);
            worst_mode = std::max(worst_mode, mode_err);
            dist[i][r] = ref > 0.0 ? d / ref : d;
            t.rows.push_back({eta, c.times[i], d, dist[i][r], (g - g.angular_average()).l2_norm(), mode_err, dt,
                              seconds_since(t0)});
            if (c.io.snapshots) out.snapshots.push_back({snapshot_name(r, i), g});
        }
    }
    for (std::size_t i = 0; i < c.times.size(); ++i)
        if (ref > 0.0 && dist[i] != std::vector<double>(c.ladder.size(), 0.0))
            require_decreasing(t, c, dist[i], "relative distance at t = " + number(c.times[i]));
    t.summary.emplace_back("lambda1", spec[1]);
    t.summary.emplace_back("max_mode_error", worst_mode);
    if (!(worst_mode < 1e-8)) t.failures.push_back("single-mode decay deviates from exp(eta^2 lambda1 t) by " + number(worst_mode));
    return out;
}

inline RunResult run_item2(const ExperimentConfig& c)
{
    RunResult out;
    auto& t = out.table;
    t.columns = {"eps", "t", "b_renormalized", "rate", "l1_landau", "l1_landau_err", "l1_boltzmann", "l1_boltzmann_err",
                 "runtime_s"};
    const auto& n = c.numerics;
    const auto& p = c.physics;
    const auto datum = initial_datum(c);
    const auto f0 = datum.field(n.nx, n.K);
    const std::size_t nb = n.bins * n.bins * n.angle_bins;
    const double cell = (n.L / n.bins) * (n.L / n.bins) * (2.0 * std::numbers::pi / n.angle_bins);
    std::vector<std::vector<double>> dist(c.times.size(), std::vector<double>(c.ladder.size()));
    auto dist_err = dist;
    for (std::size_t r = 0; r < c.ladder.size(); ++r) {
        const double eps = c.ladder[r];
        const auto t0 = Clock::now();
        const auto model = ScatteringModel::from_physics(eps, p.alpha, p.phi0, p.speed);
        const double B = compute_b(model, p.mu).b_renormalized;
        const double logeps = std::abs(std::log(eps));
        const auto landau = renormalized_landau_spectrum(B, p.speed, n.K);
        const auto boltz = boltzmann_spectrum(model, p.mu, n.K);
        MarkovOptions opt;
        opt.mu = p.mu;
        opt.log_density = true;
        const double dt_l = n.dt > 0.0 ? n.dt : stable_dt(f0, landau, 1.0, 1.0);
        const double dt_b = n.dt > 0.0 ? n.dt : stable_dt(f0, boltz, 1.0, 1.0 / logeps);
        KineticStepper sl(f0, landau, 1.0, 1.0), sb(f0, boltz, 1.0, 1.0 / logeps);
        AngularField gl = f0, gb = f0;
        double now = 0.0;
        for (std::size_t i = 0; i < c.times.size(); ++i) {
            sl.advance(gl, c.times[i] - now, dt_l);
            sb.advance(gb, c.times[i] - now, dt_b);
            now = c.times[i];
            const auto pts = sample_endpoints(model, opt, [&](CounterRng& g) { return datum.sample(g); }, c.times[i],
                                              n.samples, stream_key(n.seed, 2, r, i));
            std::vector<std::size_t> idx;
            idx.reserve(pts.size());
            for (const auto& e : pts) idx.push_back(spatial_bin(e.x, n.L, n.bins) * n.angle_bins + angle_bin(e.v, n.angle_bins));
            const auto mc = Binned::from_samples(std::move(idx), nb, cell);
            const auto dl = compare_distributions(mc, Binned::from_masses(gl.joint_bin_masses(n.bins, n.angle_bins), cell),
                                                  Metric::L1, 200, stream_key(n.seed, 3, r, i));
            const auto db = compare_distributions(mc, Binned::from_masses(gb.joint_bin_masses(n.bins, n.angle_bins), cell),
                                                  Metric::L1, 200, stream_key(n.seed, 4, r, i));
            dist[i][r] = dl.value;
            dist_err[i][r] = dl.error;
            t.rows.push_back({eps, c.times[i], B, collision_rate(model, opt), dl.value, dl.error, db.value, db.error,
                              seconds_since(t0)});
            if (c.io.snapshots) out.snapshots.push_back({snapshot_name(r, i), gl});
        }
    }
    for (std::size_t i = 0; i < c.times.size(); ++i)
        require_nonincreasing_within_noise(t, c, dist[i], dist_err[i],
                                           "Markov vs renormalized Landau L1 at t = " + number(c.times[i]));
    t.summary.emplace_back("b_limit", renormalized_b_limit(p.alpha, p.mu, p.speed));
    return out;
}

/// Item 3 and the Theorem 5.1 window share the diffusive pipeline.
inline RunResult run_diffusive(const ExperimentConfig& c)
{
    RunResult out;
    auto& t = out.table;
    t.columns = {"eps", "eta", "t", "d", "d_eff", "kinetic_vs_heat", "kinetic_vs_heat_eff", "l1_markov_vs_kinetic",
                 "sigma_mc", "richardson", "l1_tolerance", "l1_markov_vs_heat", "dt", "runtime_s"};
    const auto& n = c.numerics;
    const auto& p = c.physics;
    const bool window = c.experiment == Experiment::Theorem51;
    const auto datum = initial_datum(c);
    const auto f0 = datum.field(n.nx, n.K);
    const auto rho0 = f0.spatial_marginal();
    const double D = spectral_diffusion(landau_coefficient(p.mu, p.speed), p.speed);
    auto heat_masses = [&](const std::vector<double>& rho) {
        std::vector<double> avg(rho.size());
        for (std::size_t k = 0; k < rho.size(); ++k) avg[k] = rho[k] / (2.0 * std::numbers::pi);
        return AngularField::from_average(n.L, n.nx, 0, p.speed, avg).spatial_bin_masses(n.bins);
    };
    std::vector<std::vector<double>> dist(c.times.size(), std::vector<double>(c.ladder.size()));
    for (std::size_t r = 0; r < c.ladder.size(); ++r) {
        const double eps = c.ladder[r];
        const auto t0 = Clock::now();
        const auto model = ScatteringModel::from_physics(eps, p.alpha, p.phi0, p.speed);
        const double eta = window ? std::pow(eps, -c.lambda_exp) : std::abs(std::log(eps));
        const double boost = window ? eta : 1.0;  // density factor eps^-lambda of the window scaling
        const auto spec = boltzmann_spectrum(model, p.mu, n.K);
        const double ts = eta, cs = eta * boost;
        const double dt = n.dt > 0.0 ? n.dt : stable_dt(f0, spec, ts, cs);
        const double d_eff = ts * ts * p.speed * p.speed / (2.0 * cs * std::abs(spec[1]));
        KineticStepper st(f0, spec, ts, cs);
        MarkovOptions opt;
        opt.mu = p.mu * boost;
        AngularField g = f0, gh = f0;
        double now = 0.0;
        for (std::size_t i = 0; i < c.times.size(); ++i) {
            st.advance(g, c.times[i] - now, dt);
            st.advance(gh, c.times[i] - now, 0.5 * dt);
            now = c.times[i];
            const auto marg = gh.spatial_marginal();
            const auto heat = heat_solve(rho0, n.L, n.nx, D, c.times[i]);
            const auto heat_eff = heat_solve(rho0, n.L, n.nx, d_eff, c.times[i]);
            const double kh = relative_l2(marg, heat);
            const double khe = relative_l2(marg, heat_eff);
            const auto pts = sample_endpoints(model, opt, [&](CounterRng& gen) { return datum.sample(gen); },
                                              eta * c.times[i], n.samples, stream_key(n.seed, 5, r, i));
            std::vector<double> mc(n.bins * n.bins, 0.0);
            for (const auto& e : pts) mc[spatial_bin(e.x, n.L, n.bins)] += 1.0;
            double sigma = 0.0;
            const double N = static_cast<double>(pts.size());
            for (double& m : mc) {
                m /= N;
                sigma += std::sqrt(m * (1.0 - m) / N);
            }
            const auto coarse = g.spatial_bin_masses(n.bins), fine = gh.spatial_bin_masses(n.bins);
            const auto hm = heat_masses(heat);
            double l1 = 0.0, rich = 0.0, l1h = 0.0;
            for (std::size_t b = 0; b < mc.size(); ++b) {
                l1 += std::abs(mc[b] - fine[b]);
                rich += std::abs(coarse[b] - fine[b]) / 3.0;
                l1h += std::abs(mc[b] - hm[b]);
            }
            dist[i][r] = kh;
            t.rows.push_back({eps, eta, c.times[i], D, d_eff, kh, khe, l1, sigma, rich, 3.0 * sigma + rich, l1h, dt,
                              seconds_since(t0)});
            if (!(l1 <= 3.0 * sigma + rich))
                t.failures.push_back("Markov vs kinetic L1 " + number(l1) + " exceeds " + number(3.0 * sigma + rich) +
                                     " at eps = " + number(eps) + ", t = " + number(c.times[i]));
            if (c.io.snapshots) out.snapshots.push_back({snapshot_name(r, i), gh});
        }
    }
    const auto ord = limit_order(c);
    for (std::size_t i = 0; i < c.times.size(); ++i) {
        require_decreasing(t, c, dist[i], "kinetic vs heat distance at t = " + number(c.times[i]));
        const double last = dist[i][ord.back()];
        if (!(last < c.tolerance))
            t.failures.push_back("final kinetic vs heat distance " + number(last) + " at t = " + number(c.times[i]) +
                                 " is not below " + number(c.tolerance));
    }
    t.summary.emplace_back("d", D);
    if (window) t.summary.emplace_back("lambda_bound", lambda_bound(p.alpha));
    return out;
}

inline RunResult run_pathology(const ExperimentConfig& c)
{
    RunResult out;
    auto& t = out.table;
    t.columns = {"eps", "log_horizon", "horizon", "overlap", "overlap_se", "recollision", "recollision_se",
                 "interference", "interference_se", "chi1", "chi1_se", "any", "mean_events", "capped", "runtime_s"};
    const auto& p = c.physics;
    PathologyConfig pc;
    pc.alpha = p.alpha;
    pc.mu = p.mu;
    pc.phi0 = p.phi0;
    pc.speed = p.speed;
    pc.duration = c.times.back();
    pc.samples = c.numerics.samples;
    pc.seed = c.numerics.seed;
    const char* names[] = {"overlap", "recollision", "interference", "chi1"};
    for (int lh = 0; lh < 2; ++lh) {
        pc.log_horizon = lh == 1;
        std::vector<std::vector<Fraction>> series(4);
        for (std::size_t r = 0; r < c.ladder.size(); ++r) {
            const auto t0 = Clock::now();
            const auto row = pathology_row(pc, c.ladder[r], r + static_cast<std::size_t>(lh) * c.ladder.size());
            series[0].push_back(row.overlap);
            series[1].push_back(row.recollision);
            series[2].push_back(row.interference);
            series[3].push_back(row.chi1);
            t.rows.push_back({row.epsilon, static_cast<double>(lh), row.horizon, row.overlap.value, row.overlap.stderr_,
                              row.recollision.value, row.recollision.stderr_, row.interference.value,
                              row.interference.stderr_, row.chi1.value, row.chi1.stderr_, row.any.value, row.mean_events,
                              static_cast<double>(row.capped), seconds_since(t0)});
        }
        for (int k = 0; k < 4; ++k) {
            const auto fit = fit_log_slope(c.ladder, series[static_cast<std::size_t>(k)]);
            const std::string key = std::string("slope_") + names[k] + (lh ? "_log_horizon" : "");
            t.summary.emplace_back(key, fit.slope);
            t.summary.emplace_back(key + "_se", fit.stderr_);
            // judged on the |log eps| horizon, where every pathology has counts on every rung
            if (lh == 1 && !(fit.slope - 2.0 * fit.stderr_ > 0.0))
                t.failures.push_back(std::string(names[k]) + " log-horizon slope " + number(fit.slope) + " +- " +
                                     number(fit.stderr_) + " is not positive at 2 sigma");
        }
    }
    return out;
}

inline RunResult run_coefficients(const ExperimentConfig& c)
{
    RunResult out;
    auto& t = out.table;
    t.columns = {"eps", "valid", "b_tilde", "b_renormalized", "limit", "relative_gap", "a1", "a2", "b_term",
                 "reflected", "a2_over_a1", "b_term_over_a1", "quadrature_error", "runtime_s"};
    const auto& p = c.physics;
    const double limit = renormalized_b_limit(p.alpha, p.mu, p.speed);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> gaps;
    std::vector<std::size_t> valid;
    for (std::size_t r = 0; r < c.ladder.size(); ++r) {
        const double eps = c.ladder[r];
        const auto t0 = Clock::now();
        std::optional<CoefficientReport> rep;
        try {
            rep = compute_b(ScatteringModel::from_physics(eps, p.alpha, p.phi0, p.speed), p.mu);
        } catch (const std::logic_error&) {
            // outside the model's domain: reported as refused
        }
        if (!rep) {
            t.rows.push_back({eps, 0.0, nan, nan, limit, nan, nan, nan, nan, nan, nan, nan, nan, seconds_since(t0)});
            gaps.push_back(nan);
            continue;
        }
        const auto& m = rep->terms;
        const double gap = std::abs(rep->b_renormalized / limit - 1.0);
        gaps.push_back(gap);
        valid.push_back(r);
        t.rows.push_back({eps, 1.0, rep->b_tilde, rep->b_renormalized, limit, gap, m.a1, m.a2, m.b_term, m.reflected,
                          m.a2 / m.a1, m.b_term / m.a1, rep->quadrature_error, seconds_since(t0)});
    }
    if (valid.empty()) {
        t.failures.push_back("no ladder value lies inside the model's domain");
        return out;
    }
    std::vector<double> v;
    for (std::size_t r : valid) v.push_back(gaps[r]);
    for (std::size_t i = 1; i < v.size(); ++i)
        if (!(v[i] < v[i - 1])) {
            t.failures.push_back("b_renormalized does not approach the limit monotonically");
            break;
        }
    if (!(v.back() < c.tolerance))
        t.failures.push_back("final relative gap " + number(v.back()) + " is not below " + number(c.tolerance));
    t.summary.emplace_back("limit", limit);
    return out;
}

}  // namespace detail

/// Run the configured pipeline; the table carries hash, provenance and pass/fail notes.
inline RunResult run_experiment_full(const ExperimentConfig& c)
{
    validate_config(c);
    const auto t0 = detail::Clock::now();
    RunResult out;
    const std::string stage = std::string(experiment_name(c.experiment)) + " pipeline";
    try {
        switch (c.experiment) {
        case Experiment::Item1: out = detail::run_item1(c); break;
        case Experiment::Item2: out = detail::run_item2(c); break;
        case Experiment::Item3:
        case Experiment::Theorem51: out = detail::run_diffusive(c); break;
        case Experiment::PathologyDecay: out = detail::run_pathology(c); break;
        case Experiment::CoefficientSweep: out = detail::run_coefficients(c); break;
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError(stage, e.what());
    }
    auto& t = out.table;
    t.experiment = experiment_name(c.experiment);
    t.config_hash = config_hash(c);
    t.provenance = std::string("lorentz-lab/") + kLabVersion + " " + t.experiment + " cfg:" + t.config_hash +
                   " seed:" + std::to_string(c.numerics.seed);
    t.wall_clock = detail::seconds_since(t0);
    return out;
}

inline ConvergenceTable run_experiment(const ExperimentConfig& c) { return run_experiment_full(c).table; }

// ---------------------------------------------------------------------------
// Persistence

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content)
{
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os << content;
        if (!os) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Refuse to write over a table produced by a different config.
inline void check_replay_target(const std::filesystem::path& dir, const std::string& hash)
{
    const auto existing = dir / "table.csv";
    if (!std::filesystem::exists(existing)) return;
    const auto old = table_from_csv(read_file(existing));
    if (old.config_hash != hash)
        throw ReplayMismatch("output directory " + dir.string() + " holds a table for config " + old.config_hash +
                             ", not " + hash);
}

/// Write config.echo.toml, the table in the configured formats and any snapshots.
inline void persist(const ExperimentConfig& c, const RunResult& r)
{
    const std::filesystem::path dir(c.io.output_dir);
    std::filesystem::create_directories(dir);
    check_replay_target(dir, r.table.config_hash);
    write_file_atomic(dir / "config.echo.toml", config_to_toml(c));
    for (const auto& f : c.io.formats) {
        if (f == "csv") write_file_atomic(dir / "table.csv", table_to_csv(r.table));
        if (f == "json") write_file_atomic(dir / "table.json", table_to_json(r.table).dump(2) + "\n");
    }
    if (std::find(c.io.formats.begin(), c.io.formats.end(), "csv") == c.io.formats.end())
        write_file_atomic(dir / "table.csv", table_to_csv(r.table));
    for (const auto& s : r.snapshots) {
        const auto tmp = (dir / s.name).string() + ".tmp";
        save_snapshot(s.field, tmp);
        std::filesystem::rename(tmp, dir / s.name);
    }
}

struct ReplayReport {
    bool identical = true;
    double max_deviation = 0.0;  // over non-runtime cells
    std::vector<std::string> mismatches;
};

/*!
 * Rerun the config echoed in dir and compare with its table. Cells must agree
 * exactly, or within 3 times the matching "<name>_err" / "<name>_se" column
 * when the recorded table carries one.
 */
inline ReplayReport verify_replay(const std::filesystem::path& dir)
{
    const auto cfg = parse_config_string(read_file(dir / "config.echo.toml"));
    const auto recorded = table_from_csv(read_file(dir / "table.csv"));
    if (recorded.config_hash != config_hash(cfg))
        throw ReplayMismatch("table hash " + recorded.config_hash + " does not match the echoed config");
    const auto fresh = run_experiment(cfg);
    ReplayReport rep;
    if (fresh.columns != recorded.columns || fresh.rows.size() != recorded.rows.size())
        throw ReplayMismatch("replayed table has a different shape");
    for (std::size_t i = 0; i < fresh.rows.size(); ++i)
        for (std::size_t j = 0; j < fresh.columns.size(); ++j) {
            const auto& name = fresh.columns[j];
            if (is_runtime_column(name)) continue;
            const double a = fresh.rows[i][j], b = recorded.rows[i][j];
            if (a == b || (std::isnan(a) && std::isnan(b))) continue;
            const double dev = std::abs(a - b);
            rep.identical = false;
            rep.max_deviation = std::max(rep.max_deviation, dev);
            double allow = 0.0;
            for (const char* suffix : {"_err", "_se"}) {
                auto it = std::find(fresh.columns.begin(), fresh.columns.end(), name + suffix);
                if (it != fresh.columns.end())
                    allow = 3.0 * recorded.rows[i][static_cast<std::size_t>(it - fresh.columns.begin())];
            }
            if (!(dev <= allow))
                rep.mismatches.push_back(name + " row " + std::to_string(i) + ": " + detail::number(b) + " vs " +
                                         detail::number(a));
        }
    return rep;
}

}  // namespace lorentz
