// lorentz-lab: command line front end for the Lorentz gas toolkit.
//
// Exit status: 0 on success, 2 when a run completes but misses its tolerance,
// 1 on any error.

#include "lorentz/lorentz.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

using namespace lorentz;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kError = 1;
constexpr int kToleranceFailure = 2;

struct Physics {
    double epsilon = 1e-3;
    double alpha = 0.1;
    double mu = 1.0;
    double phi0 = 0.25;
    double speed = 1.0;
    std::uint64_t seed = 1;
};

void add_physics(CLI::App* app, Physics& p, bool with_mu = true)
{
    app->add_option("--epsilon", p.epsilon, "obstacle radius")->check(CLI::Range(0.0, 1.0));
    app->add_option("--alpha", p.alpha, "potential scaling exponent")->check(CLI::Range(0.0, 0.5));
    if (with_mu) app->add_option("--mu", p.mu, "density prefactor")->check(CLI::PositiveNumber);
    app->add_option("--phi0", p.phi0, "barrier height");
    app->add_option("--speed", p.speed, "particle speed |v|")->check(CLI::PositiveNumber);
    app->add_option("--seed", p.seed, "base seed");
}

ScatteringModel model_of(const Physics& p)
{
    return ScatteringModel::from_physics(p.epsilon, p.alpha, p.phi0, p.speed);
}

std::string fmt(double x)
{
    if (std::isnan(x)) return "nan";
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

const char* mode_name(ScatterMode m) { return m == ScatterMode::Transmitted ? "transmitted" : "reflected"; }

void write_text(const std::filesystem::path& path, const std::string& text)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_file_atomic(path, text);
}

// psi(theta) on the branch that produced it; zero deflection has no finite density
double branch_psi(const ScatteringModel& m, const Deflection& d)
{
    const double th = std::abs(d.theta);
    if (!(th > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    try {
        return cross_section(m, th, d.mode);
    } catch (const std::domain_error&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

// ---------------------------------------------------------------------------

struct ScatterArgs {
    Physics p;
    std::vector<double> rho;
    std::size_t table = 0;
};

int cmd_scatter(const ScatterArgs& a)
{
    const auto m = model_of(a.p);
    if (a.table > 0) {
        std::cout << "rho,theta,mode,psi\n";
        for (std::size_t i = 0; i < a.table; ++i) {
            const double rho = a.table == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(a.table - 1);
            const auto d = scattering_angle(m, rho);
            std::cout << fmt(rho) << ',' << fmt(d.theta) << ',' << mode_name(d.mode) << ',' << fmt(branch_psi(m, d))
                      << '\n';
        }
        return kOk;
    }
    json out = json::array();
    for (double rho : a.rho) {
        const auto d = scattering_angle(m, rho);
        out.push_back({{"rho", rho},
                       {"theta", d.theta},
                       {"mode", mode_name(d.mode)},
                       {"psi", branch_psi(m, d)},
                       {"index", m.index()},
                       {"theta_max", max_scattering_angle(m)}});
    }
    std::cout << out.dump(2) << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
    Physics p;
    double t = 1.0;
    std::size_t samples = 1000;
    std::string horizon_mode = "fixed";
    bool log_density = false;
    std::string output = "simulate_out";
};

int cmd_simulate(const SimulateArgs& a)
{
    const auto m = model_of(a.p);
    const double eps = a.p.epsilon;
    const double intensity = poisson_intensity(a.p.mu, eps, a.p.alpha, a.log_density);
    const double horizon = a.t * (a.horizon_mode == "log" ? std::abs(std::log(eps)) : 1.0);
    struct Out {
        ParticleState end;
        TrajectoryLog log;
        bool capped = false;
    };
    std::vector<Out> out(a.samples);
    parallel_for(a.samples, [&](std::size_t i) {
        const std::uint64_t key = trajectory_stream(a.p.seed, 0, i);
        LazyPoissonField field(intensity, eps, key, 1);
        CounterRng rng(stream_key(key, 2));
        ParticleState s;
        s.velocity = from_polar(a.p.speed, rng.uniform(0.0, 2.0 * std::numbers::pi));
        try {
            auto r = evolve(field, m, s, horizon);
            out[i].end = r.state;
            out[i].log = std::move(r.log);
        } catch (const EventCapExceeded& e) {
            out[i].capped = true;
            out[i].log = e.partial_log();
        }
    });

    std::ostringstream jl;
    std::size_t ov = 0, rc = 0, in = 0, ch = 0, any = 0, capped = 0;
    double events = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto& o = out[i];
        const auto& pa = o.log.pathologies;
        json line = {{"sample", i},
                     {"capped", o.capped},
                     {"events", o.log.events.size()},
                     {"internal", o.log.internal_ids.size()},
                     {"tangencies", o.log.tangencies},
                     {"overlap", pa.overlap},
                     {"recollision", pa.recollision},
                     {"interference", pa.interference},
                     {"chi1_violation", pa.chi1_violation}};
        if (!o.capped) {
            line["x"] = {o.end.position.x, o.end.position.y};
            line["v"] = {o.end.velocity.x, o.end.velocity.y};
            line["coverage"] = o.end.coverage;
            line["energy"] = total_energy(o.end, m.barrier());
        }
        jl << line.dump() << '\n';
        ov += pa.overlap;
        rc += pa.recollision;
        in += pa.interference;
        ch += pa.chi1_violation;
        any += pa.any() || o.capped;
        capped += o.capped;
        events += static_cast<double>(o.log.events.size());
    }
    const std::filesystem::path dir(a.output);
    write_text(dir / "trajectories.jsonl", jl.str());

    std::ostringstream csv;
    csv << "eps,horizon,samples,pathology,fraction,stderr\n";
    auto row = [&](const char* name, std::size_t k) {
        const auto f = make_fraction(k, a.samples);
        csv << fmt(eps) << ',' << fmt(horizon) << ',' << a.samples << ',' << name << ',' << fmt(f.value) << ','
            << fmt(f.stderr_) << '\n';
    };
    row("overlap", ov);
    row("recollision", rc);
    row("interference", in);
    row("chi1", ch);
    row("any", any);
    row("capped", capped);
    write_text(dir / "pathology.csv", csv.str());
    std::cout << "wrote " << a.samples << " trajectories to " << dir.string() << " (mean events "
              << fmt(events / static_cast<double>(std::max<std::size_t>(1, a.samples))) << ")\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct MarkovArgs {
    Physics p;
    double t = 1.0;
    std::size_t samples = 10000;
    std::size_t bins_x = 32;
    std::size_t bins_theta = 64;
    double box = 16.0;
    bool log_density = false;
    std::string output = "markov_out";
};

int cmd_markov(const MarkovArgs& a)
{
    const auto m = model_of(a.p);
    MarkovOptions opt;
    opt.mu = a.p.mu;
    opt.log_density = a.log_density;
    const Vec2 centre{0.5 * a.box, 0.5 * a.box};
    const double speed = a.p.speed;
    auto sampler = [&](CounterRng& g) {
        return std::pair<Vec2, Vec2>{centre, from_polar(speed, g.uniform(0.0, 2.0 * std::numbers::pi))};
    };
    const auto pts = sample_endpoints(m, opt, sampler, a.t, a.samples, a.p.seed);
    const auto h = histogram(pts, {a.box, a.bins_x, a.bins_theta});

    const std::filesystem::path dir(a.output);
    std::ostringstream sp, an;
    sp << "ix,iy,x,y,density,stderr\n";
    const double w = a.box / static_cast<double>(a.bins_x);
    for (std::size_t i = 0; i < a.bins_x; ++i)
        for (std::size_t j = 0; j < a.bins_x; ++j) {
            const std::size_t k = i * a.bins_x + j;
            sp << i << ',' << j << ',' << fmt((i + 0.5) * w) << ',' << fmt((j + 0.5) * w) << ',' << fmt(h.spatial[k])
               << ',' << fmt(h.spatial_se[k]) << '\n';
        }
    an << "ia,theta,density,stderr\n";
    const double arc = 2.0 * std::numbers::pi / static_cast<double>(a.bins_theta);
    for (std::size_t i = 0; i < a.bins_theta; ++i)
        an << i << ',' << fmt((i + 0.5) * arc) << ',' << fmt(h.angular[i]) << ',' << fmt(h.angular_se[i]) << '\n';
    write_text(dir / "spatial.csv", sp.str());
    write_text(dir / "angular.csv", an.str());

    const auto st = collision_statistics(m, opt, a.t, std::min<std::size_t>(a.samples, 20000), a.p.seed + 1);
    auto mom = [](const Moment& x) { return json{{"mean", x.mean}, {"stderr", x.stderr_}}; };
    json j = {{"rate", st.rate},
              {"paths", st.paths},
              {"collisions", st.collisions},
              {"mean_collisions", mom(st.mean_collisions)},
              {"jump2", mom(st.jump2)},
              {"jump4", mom(st.jump4)},
              {"path_second_renormalized", mom(st.path_second_renormalized)},
              {"quadrature_second_renormalized", st.quadrature_second_renormalized},
              {"quadrature_fourth", st.quadrature_fourth},
              {"max_identity_error", st.max_identity_error.mean}};
    write_text(dir / "moments.json", j.dump(2) + "\n");
    std::cout << j.dump(2) << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct CoeffArgs {
    Physics p;
    std::vector<double> eps_list{1e-3, 1e-5, 1e-7, 1e-9};
    double gamma = -1.0;
    bool emit_terms = false;
};

int cmd_coeff(const CoeffArgs& a)
{
    std::cout << "epsilon,b_tilde,b_renorm,A1,A2,Bterm,reflected,quad_err";
    if (a.emit_terms) std::cout << ",gamma,delta,r,A1_quadrature,A2_bound,A_full";
    std::cout << '\n';
    for (double eps : a.eps_list) {
        Physics p = a.p;
        p.epsilon = eps;
        CoefficientReport r;
        try {
            r = compute_b(model_of(p), p.mu, a.gamma);
        } catch (const std::logic_error& e) {
            // barrier above the kinetic energy: no transmitted branch
            std::cerr << "eps = " << fmt(eps) << " refused: " << e.what() << '\n';
            std::cout << fmt(eps) << std::string(a.emit_terms ? 13 : 7, ',') << '\n';
            continue;
        }
        const auto& t = r.terms;
        std::cout << fmt(eps) << ',' << fmt(r.b_tilde) << ',' << fmt(r.b_renormalized) << ',' << fmt(t.a1) << ','
                  << fmt(t.a2) << ',' << fmt(t.b_term) << ',' << fmt(t.reflected) << ',' << fmt(r.quadrature_error);
        if (a.emit_terms)
            std::cout << ',' << fmt(t.gamma) << ',' << fmt(t.delta) << ',' << fmt(t.r) << ',' << fmt(t.a1_quadrature)
                      << ',' << fmt(t.a2_bound) << ',' << fmt(t.a_full);
        std::cout << '\n';
    }
    return kOk;
}

// ---------------------------------------------------------------------------

int cmd_greenkubo(const GreenKuboOptions& o)
{
    const auto r = compute_d(o);
    json j = {{"mu", r.mu},
              {"speed", r.speed},
              {"generator_coefficient", r.generator_coefficient},
              {"eigenvalue", r.eigenvalue},
              {"d_spectral", r.d_spectral},
              {"d_autocorrelation", r.d_autocorrelation},
              {"mc_error", r.mc_error},
              {"fitted_rate", r.fitted_rate},
              {"fitted_rate_error", r.fitted_rate_error},
              {"autocorrelation_at_zero", r.autocorrelation_at_zero}};
    std::cout << j.dump(2) << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct PdeArgs {
    Physics p;
    std::string kind = "landau";
    std::string scaling = "item1";
    std::string init = "gaussian";
    std::string init_file;
    double eta = 1.0;
    double L = 16.0;
    std::size_t nx = 32;
    int K = 24;
    double t = 0.5;
    double dt = 0.0;
    double width = 1.0;
    double amplitude = 0.5;
    std::string output = "pde_out";
};

int cmd_pde(const PdeArgs& a)
{
    const auto m = model_of(a.p);
    const double logeps = std::abs(std::log(a.p.epsilon));
    AngularField f0;
    if (a.init == "file") {
        f0 = load_snapshot(a.init_file);
    } else if (a.init == "cosine") {
        const double amp = a.amplitude, L = a.L;
        f0 = AngularField::from_function(L, a.nx, a.K, a.p.speed, [&](double x, double, double th) {
            return (1.0 + 0.5 * std::cos(2.0 * std::numbers::pi * x / L)) * (1.0 + amp * std::cos(th));
        });
        const double mass = f0.mass();
        for (auto& z : f0.coefficients()) z /= mass;
    } else {
        f0 = InitialDatum(a.L, a.width, a.amplitude, a.p.speed).field(a.nx, a.K);
    }
    const int K = f0.harmonics();

    CollisionSpectrum spec;
    if (a.kind == "boltzmann")
        spec = boltzmann_spectrum(m, a.p.mu, K);
    else if (a.kind == "landau")
        spec = landau_spectrum(a.p.mu, a.p.speed, K);
    else
        spec = renormalized_landau_spectrum(compute_b(m, a.p.mu).b_renormalized, a.p.speed, K);

    double ts = 1.0, cs = 1.0;
    if (a.scaling == "item1") {
        cs = a.eta;
    } else if (a.scaling == "item2") {
        cs = a.kind == "boltzmann" ? 1.0 / logeps : 1.0;
    } else {
        ts = logeps;
        cs = logeps;
    }
    const double dt = a.dt > 0.0 ? a.dt : stable_dt(f0, spec, ts, cs);
    const auto f = evolve_kinetic(f0, spec, ts, cs, a.t, dt);

    const std::filesystem::path dir(a.output);
    std::filesystem::create_directories(dir);
    save_snapshot(f, (dir / "field_final.llkf").string());
    const std::size_t nx = f.nx();
    const double h = f.box() / static_cast<double>(nx);
    const auto rho = f.spatial_marginal();
    std::ostringstream xs, ang;
    xs << "x,density\n";
    for (std::size_t i = 0; i < nx; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < nx; ++j) s += rho[i * nx + j] * h;
        xs << fmt(i * h) << ',' << fmt(s) << '\n';
    }
    ang << "ia,theta,mass\n";
    const std::size_t nb = static_cast<std::size_t>(4 * K);
    const auto am = f.angular_bin_masses(nb);
    for (std::size_t i = 0; i < nb; ++i)
        ang << i << ',' << fmt((i + 0.5) * 2.0 * std::numbers::pi / static_cast<double>(nb)) << ',' << fmt(am[i]) << '\n';
    write_text(dir / "marginal_x.csv", xs.str());
    write_text(dir / "marginal_theta.csv", ang.str());
    json j = {{"kind", a.kind},
              {"scaling", a.scaling},
              {"transport_scale", ts},
              {"collision_scale", cs},
              {"dt", dt},
              {"t", a.t},
              {"mass_initial", f0.mass()},
              {"mass_final", f.mass()},
              {"lambda1", spec[1]},
              {"first_harmonic", f.harmonic_norm(1)}};
    std::cout << j.dump(2) << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct ExperimentArgs {
    std::string config;
    std::string output;
    std::string replay;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_experiment(const ExperimentArgs& a)
{
    if (!a.replay.empty()) {
        const auto rep = verify_replay(a.replay);
        std::cout << "replay " << (rep.identical ? "identical" : "within error bars")
                  << ", max deviation " << fmt(rep.max_deviation) << '\n';
        for (const auto& m : rep.mismatches) std::cout << "mismatch: " << m << '\n';
        return rep.mismatches.empty() ? kOk : kToleranceFailure;
    }
    if (a.config.empty()) throw ConfigError("experiment needs --config or --replay");
    auto cfg = load_config(a.config);
    if (!a.output.empty()) cfg.io.output_dir = a.output;
    if (a.seed_set) cfg.numerics.seed = a.seed;
    validate_config(cfg);
    check_replay_target(cfg.io.output_dir, config_hash(cfg));
    const auto r = run_experiment_full(cfg);
    persist(cfg, r);
    const auto& t = r.table;
    std::cout << t.experiment << " cfg:" << t.config_hash << " rows:" << t.rows.size() << " wall:" << fmt(t.wall_clock)
              << "s -> " << cfg.io.output_dir << '\n';
    for (const auto& [k, v] : t.summary) std::cout << "  " << k << " = " << fmt(v) << '\n';
    for (const auto& f : t.failures) std::cout << "FAIL " << f << '\n';
    return t.passed() ? kOk : kToleranceFailure;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Lorentz gas scattering, Markov and kinetic limits", "lorentz-lab"};
    app.set_version_flag("--version", std::string(kLabVersion));
    app.require_subcommand(1);

    ScatterArgs sc;
    auto* s_scatter = app.add_subcommand("scatter", "deflection angle and cross section");
    add_physics(s_scatter, sc.p, false);
    s_scatter->add_option("--rho", sc.rho, "impact parameters in [-1, 1]")->check(CLI::Range(-1.0, 1.0));
    s_scatter->add_option("--table", sc.table, "emit an N-row CSV over rho in [-1, 1]");

    SimulateArgs si;
    auto* s_sim = app.add_subcommand("simulate", "trajectories through random barrier fields");
    add_physics(s_sim, si.p);
    s_sim->add_option("--t", si.t, "horizon")->check(CLI::PositiveNumber);
    s_sim->add_option("--samples", si.samples, "trajectories");
    s_sim->add_option("--horizon-mode", si.horizon_mode, "fixed or log (t |log eps|)")
        ->check(CLI::IsMember({"fixed", "log"}));
    s_sim->add_flag("--log-density", si.log_density, "divide the obstacle density by |log eps|");
    s_sim->add_option("-o,--output", si.output, "output directory");

    MarkovArgs mk;
    auto* s_markov = app.add_subcommand("markov", "limiting velocity-jump process");
    add_physics(s_markov, mk.p);
    s_markov->add_option("--t", mk.t, "duration")->check(CLI::PositiveNumber);
    s_markov->add_option("--samples", mk.samples, "paths");
    s_markov->add_option("--bins-x", mk.bins_x, "spatial bins per side");
    s_markov->add_option("--bins-theta", mk.bins_theta, "angular bins");
    s_markov->add_option("--box", mk.box, "periodic box side for the spatial histogram")->check(CLI::PositiveNumber);
    s_markov->add_flag("--log-density", mk.log_density, "divide the collision rate by |log eps|");
    s_markov->add_option("-o,--output", mk.output, "output directory");

    CoeffArgs co;
    auto* s_coeff = app.add_subcommand("coeff", "Landau coefficient ladder");
    add_physics(s_coeff, co.p);
    s_coeff->get_option("--epsilon")->description("unused, see --eps-list");
    s_coeff->add_option("--eps-list", co.eps_list, "comma separated radii")->delimiter(',');
    s_coeff->add_option("--gamma", co.gamma, "boundary layer exponent, default alpha/4");
    s_coeff->add_flag("--emit-terms", co.emit_terms, "append layer parameters");

    GreenKuboOptions gk;
    auto* s_gk = app.add_subcommand("greenkubo", "diffusion coefficient by spectrum and autocorrelation");
    s_gk->add_option("--mu", gk.mu)->check(CLI::PositiveNumber);
    s_gk->add_option("--speed", gk.speed)->check(CLI::PositiveNumber);
    s_gk->add_option("--samples", gk.samples);
    s_gk->add_option("--dt", gk.dt, "time step, 0 picks one from the rate");
    s_gk->add_option("--seed", gk.seed);

    PdeArgs pd;
    auto* s_pde = app.add_subcommand("pde", "spectral kinetic solver");
    add_physics(s_pde, pd.p);
    s_pde->add_option("--kind", pd.kind)->check(CLI::IsMember({"boltzmann", "landau", "renorm"}));
    s_pde->add_option("--scaling", pd.scaling)->check(CLI::IsMember({"item1", "item2", "item3"}));
    s_pde->add_option("--init", pd.init)->check(CLI::IsMember({"gaussian", "cosine", "file"}));
    s_pde->add_option("--init-file", pd.init_file, "snapshot for --init file");
    s_pde->add_option("--eta", pd.eta, "collision scale for item1")->check(CLI::PositiveNumber);
    s_pde->add_option("--L", pd.L)->check(CLI::PositiveNumber);
    s_pde->add_option("--nx", pd.nx);
    s_pde->add_option("--K", pd.K);
    s_pde->add_option("--t", pd.t)->check(CLI::PositiveNumber);
    s_pde->add_option("--dt", pd.dt, "0 picks the stable step");
    s_pde->add_option("--width", pd.width, "Gaussian width, 0 for uniform");
    s_pde->add_option("--amplitude", pd.amplitude, "cos(theta) amplitude of the initial datum");
    s_pde->add_option("-o,--output", pd.output, "output directory");

    ExperimentArgs ex;
    auto* s_exp = app.add_subcommand("experiment", "run or replay a configured experiment");
    s_exp->add_option("--config", ex.config, "TOML experiment file")->check(CLI::ExistingFile);
    s_exp->add_option("-o,--output", ex.output, "override io.output_dir");
    s_exp->add_option("--replay", ex.replay, "rerun the echoed config in a directory and compare")
        ->check(CLI::ExistingDirectory);
    auto* seed_opt = s_exp->add_option("--seed", ex.seed, "override numerics.seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kError;
    }

    try {
        if (*s_scatter) return cmd_scatter(sc);
        if (*s_sim) return cmd_simulate(si);
        if (*s_markov) return cmd_markov(mk);
        if (*s_coeff) return cmd_coeff(co);
        if (*s_gk) return cmd_greenkubo(gk);
        if (*s_pde) {
            if (pd.init == "file" && pd.init_file.empty()) throw std::invalid_argument("--init file needs --init-file");
            return cmd_pde(pd);
        }
        if (*s_exp) {
            ex.seed_set = seed_opt->count() > 0;
            return cmd_experiment(ex);
        }
    } catch (const PipelineError& e) {
        std::cerr << "lorentz-lab: " << e.what() << '\n';
        return kError;
    } catch (const std::exception& e) {
        std::cerr << "lorentz-lab: " << e.what() << '\n';
        return kError;
    }
    return kError;
}
