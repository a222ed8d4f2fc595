#include "afm/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace afm {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------- config ---

void ExperimentConfig::validate() const
{
    cant.validate();
    inter.validate();
    zp.validate();
    if (!(A_f > 0.0) || !(omega_d > 0.0))
        throw ConfigError("drive: need A_f > 0 and omega_d > 0");
    pid.validate();
    if (!(pid.K_I > 0.0))
        throw ConfigError("pid: K_I must be positive (integral action is the height channel)");
    hybrid.validate(pid.A_r);
    if (ctrl.speed_regulator)
        speed.validate();
    if (!(speed.V_x0 > 0.0))
        throw ConfigError("speed: V_x0 must be positive");
    solver.validate();
    noise.validate();

    const int one_scheme = (ctrl.plain_pid ? 1 : 0) + (ctrl.dynamic_pid ? 1 : 0) +
                           (ctrl.hybrid_pid ? 1 : 0);
    if (one_scheme != 1)
        throw ConfigError("controllers: exactly one of plain_pid, dynamic_pid, hybrid_pid");
    if (ctrl.hybrid_pid && !ctrl.q_control)
        throw ConfigError("controllers: hybrid_pid requires q_control");
    if (ctrl.predictive) {
        if (raster.n_lines < 2)
            throw ConfigError("controllers: predictive needs at least 2 raster lines");
        pred.validate(raster.I_x);
        if (pred_grid_points < 8)
            throw ConfigError("predictive: grid_points too small");
    }

    if (raster.n_lines < 0)
        throw ConfigError("raster: n_lines must be >= 0");
    if (!(raster.I_x > 0.0) || !(raster.dy > 0.0))
        throw ConfigError("raster: I_x and dy must be positive");
    if (sample.kind != "grid" && sample.kind != "sinusoid" && sample.kind != "heightmap")
        throw ConfigError("sample: kind must be grid, sinusoid or heightmap");

    if (!(engage.clearance > 1.0) || !(engage.tol > 0.0) || !(engage.hold_tau > 0.0) ||
        !(engage.max_tau > engage.hold_tau))
        throw ConfigError("engagement: need clearance > 1, tol > 0, max_tau > hold_tau > 0");
    if (ctrl_per_period < 4 || record_every < 1)
        throw ConfigError("cadence: need ctrl_per_period >= 4 and record_every >= 1");
    if (line_from < 1 || (line_to != 0 && line_to < line_from))
        throw ConfigError("lines: need 1 <= from <= to");
}

SampleSurface ExperimentConfig::make_surface() const
{
    if (sample.kind == "grid")
        return SampleSurface::calibration_grid(sample.step_height, sample.period);
    if (sample.kind == "sinusoid")
        return SampleSurface::sinusoid(sample.A_sin, sample.P_sin);
    return load_heightmap(sample.path);
}

namespace {

double jd(const ordered_json& doc, const char* ptr)
{
    try {
        return doc.at(ordered_json::json_pointer(ptr)).get<double>();
    } catch (const std::exception&) {
        throw ConfigError(std::string("config: missing or non-numeric ") + ptr);
    }
}

bool jb(const ordered_json& doc, const char* ptr)
{
    try {
        return doc.at(ordered_json::json_pointer(ptr)).get<bool>();
    } catch (const std::exception&) {
        throw ConfigError(std::string("config: missing or non-boolean ") + ptr);
    }
}

std::string js(const ordered_json& doc, const char* ptr)
{
    try {
        return doc.at(ordered_json::json_pointer(ptr)).get<std::string>();
    } catch (const std::exception&) {
        throw ConfigError(std::string("config: missing or non-string ") + ptr);
    }
}

std::int64_t ji(const ordered_json& doc, const char* ptr)
{
    try {
        return doc.at(ordered_json::json_pointer(ptr)).get<std::int64_t>();
    } catch (const std::exception&) {
        throw ConfigError(std::string("config: missing or non-integer ") + ptr);
    }
}

void ensure(ordered_json& doc, const char* ptr, ordered_json value)
{
    const ordered_json::json_pointer jp(ptr);
    if (!doc.contains(jp))
        doc[jp] = std::move(value);
}

// Parameter-sheet defaults plus the derived-value chain: any key absent from
// the document is filled in, derived keys from the (possibly overridden)
// values present at that point.
void fill_defaults(ordered_json& doc)
{
    const double two_pi = 2.0 * M_PI;

    ensure(doc, "/cantilever/omega_n", 2.85e5 * two_pi);
    ensure(doc, "/cantilever/Q", 100.0);
    ensure(doc, "/cantilever/r", 0.9);
    ensure(doc, "/cantilever/k", 42.0);

    ensure(doc, "/interaction/enabled", true);
    ensure(doc, "/interaction/H", 1.4e-19);
    ensure(doc, "/interaction/r_t", 2e-9);
    ensure(doc, "/interaction/l_m", 0.42e-9);
    ensure(doc, "/interaction/E_t", 1.65e11);
    ensure(doc, "/interaction/E_s", 1.65e11);
    ensure(doc, "/interaction/V_t", 0.27);
    ensure(doc, "/interaction/V_s", 0.27);

    ensure(doc, "/z_piezo/omega_zp", 1.5e6 * two_pi);
    ensure(doc, "/z_piezo/Q_zp", 18.0);
    ensure(doc, "/z_piezo/K_zp", 1.0 / jd(doc, "/z_piezo/omega_zp"));

    ensure(doc, "/drive/A_f", 50e-9);
    ensure(doc, "/drive/omega_d", jd(doc, "/cantilever/omega_n"));
    const double A_f = jd(doc, "/drive/A_f");

    ensure(doc, "/solver/max_step", 1e-7);
    ensure(doc, "/solver/min_step", 1e-13);
    ensure(doc, "/solver/rel_tol", 1e-4);
    ensure(doc, "/solver/abs_tol", 1e-12);
    ensure(doc, "/solver/penetration_tol", 1e-13);
    ensure(doc, "/solver/refractory", 1e-9);

    ensure(doc, "/noise/enabled", false);
    ensure(doc, "/noise/std", 0.01 * A_f);

    ensure(doc, "/sample/kind", "grid");
    ensure(doc, "/sample/step_height", 28e-9);
    ensure(doc, "/sample/period", 1e-6);
    ensure(doc, "/sample/A_sin", 80e-9);
    ensure(doc, "/sample/P_sin", 4e-6);
    ensure(doc, "/sample/path", "");

    ensure(doc, "/raster/n_lines", 1);
    ensure(doc, "/raster/I_x", 10e-6);
    ensure(doc, "/raster/dy", 1e-7);
    ensure(doc, "/raster/i_y0", 0.0);
    const double I_x = jd(doc, "/raster/I_x");

    ensure(doc, "/controllers/plain_pid", false);
    ensure(doc, "/controllers/q_control", true);
    {
        // Default scheme is the dynamic PID unless another one was requested.
        const ordered_json::json_pointer hyb("/controllers/hybrid_pid");
        const bool other = jb(doc, "/controllers/plain_pid") ||
                           (doc.contains(hyb) && doc[hyb].is_boolean() && doc[hyb].get<bool>());
        ensure(doc, "/controllers/dynamic_pid", !other);
    }
    ensure(doc, "/controllers/hybrid_pid", false);
    ensure(doc, "/controllers/speed_regulator", false);
    ensure(doc, "/controllers/predictive", false);

    ensure(doc, "/pid/K_P", 0.0);
    ensure(doc, "/pid/K_I", 1e4);
    ensure(doc, "/pid/K_D", 0.0);
    ensure(doc, "/pid/A_r", 0.9 * A_f);
    ensure(doc, "/pid/integrator_limit", 0.0);
    const double A_r = jd(doc, "/pid/A_r");
    const double K_I = jd(doc, "/pid/K_I");

    ensure(doc, "/hybrid/K_s", 15.0);
    ensure(doc, "/hybrid/A_t_plus", 0.95 * A_f);
    ensure(doc, "/hybrid/A_t_minus", 0.94 * A_f);
    ensure(doc, "/hybrid/A_t_RL", 0.5 * A_r);
    ensure(doc, "/hybrid/alpha_t", (jb(doc, "/noise/enabled") ? -600.0 : -400.0) * A_f);
    ensure(doc, "/hybrid/dQ_PL", 25.0);
    ensure(doc, "/hybrid/dQ_RL", 25.0);
    ensure(doc, "/hybrid/Q_prime", 30.0);
    ensure(doc, "/hybrid/K_tau", 5.0);
    ensure(doc, "/hybrid/guards_enabled", true);

    const double b_Ma = K_I * (A_r - jd(doc, "/hybrid/A_t_RL"));
    const double b_Md = K_I * (A_r - jd(doc, "/hybrid/A_t_plus"));
    ensure(doc, "/speed/tau_v", 0.12e-3);
    ensure(doc, "/speed/V_x0", 1e-3);
    const double V_x0 = jd(doc, "/speed/V_x0");
    ensure(doc, "/speed/V_xm", 0.1 * V_x0);
    ensure(doc, "/speed/V_xM", V_x0);
    ensure(doc, "/speed/b_Ma", b_Ma);
    ensure(doc, "/speed/b_Md", b_Md);
    ensure(doc, "/speed/b_La", 0.9 * jd(doc, "/speed/b_Ma"));
    ensure(doc, "/speed/b_Ld", 0.9 * jd(doc, "/speed/b_Md"));
    ensure(doc, "/speed/b_ra", 0.8 * jd(doc, "/speed/b_Ma"));
    ensure(doc, "/speed/b_rd", 0.8 * jd(doc, "/speed/b_Md"));

    ensure(doc, "/predictive/M_PC", 3);
    ensure(doc, "/predictive/E_sigma", 0.1 * A_f * I_x);
    ensure(doc, "/predictive/N_W", 0.01 * I_x);
    ensure(doc, "/predictive/grid_points", 1001);

    ensure(doc, "/engagement/clearance", 1.05);
    ensure(doc, "/engagement/tol", 0.01);
    ensure(doc, "/engagement/hold_tau", 2.0);
    ensure(doc, "/engagement/max_tau", 100.0);

    ensure(doc, "/seed", 1);
    ensure(doc, "/ctrl_per_period", 20);
    ensure(doc, "/record_every", 20);
    ensure(doc, "/lines/from", 1);
    ensure(doc, "/lines/to", 0);
}

ExperimentConfig parse_config(const ordered_json& doc)
{
    ExperimentConfig c;
    c.cant = CantileverParams::from_fundamental(jd(doc, "/cantilever/omega_n"),
                                                jd(doc, "/cantilever/Q"),
                                                jd(doc, "/cantilever/r"),
                                                jd(doc, "/cantilever/k"));
    c.interaction_enabled = jb(doc, "/interaction/enabled");
    c.inter.H = jd(doc, "/interaction/H");
    c.inter.r_t = jd(doc, "/interaction/r_t");
    c.inter.l_m = jd(doc, "/interaction/l_m");
    c.inter.E_t = jd(doc, "/interaction/E_t");
    c.inter.E_s = jd(doc, "/interaction/E_s");
    c.inter.V_t = jd(doc, "/interaction/V_t");
    c.inter.V_s = jd(doc, "/interaction/V_s");

    c.zp.omega_zp = jd(doc, "/z_piezo/omega_zp");
    c.zp.Q_zp = jd(doc, "/z_piezo/Q_zp");
    c.zp.K_zp = jd(doc, "/z_piezo/K_zp");

    c.A_f = jd(doc, "/drive/A_f");
    c.omega_d = jd(doc, "/drive/omega_d");

    c.pid.K_P = jd(doc, "/pid/K_P");
    c.pid.K_I = jd(doc, "/pid/K_I");
    c.pid.K_D = jd(doc, "/pid/K_D");
    c.pid.A_r = jd(doc, "/pid/A_r");
    c.pid.A_f = c.A_f;
    c.pid.integrator_limit = jd(doc, "/pid/integrator_limit");

    c.hybrid.K_s = jd(doc, "/hybrid/K_s");
    c.hybrid.A_t_plus = jd(doc, "/hybrid/A_t_plus");
    c.hybrid.A_t_minus = jd(doc, "/hybrid/A_t_minus");
    c.hybrid.A_t_RL = jd(doc, "/hybrid/A_t_RL");
    c.hybrid.alpha_t = jd(doc, "/hybrid/alpha_t");
    c.hybrid.dQ_PL = jd(doc, "/hybrid/dQ_PL");
    c.hybrid.dQ_RL = jd(doc, "/hybrid/dQ_RL");
    c.hybrid.Q_prime = jd(doc, "/hybrid/Q_prime");
    c.hybrid.K_tau = jd(doc, "/hybrid/K_tau");
    c.hybrid.guards_enabled = jb(doc, "/hybrid/guards_enabled");

    c.speed.tau_v = jd(doc, "/speed/tau_v");
    c.speed.V_x0 = jd(doc, "/speed/V_x0");
    c.speed.V_xm = jd(doc, "/speed/V_xm");
    c.speed.V_xM = jd(doc, "/speed/V_xM");
    c.speed.b_Ma = jd(doc, "/speed/b_Ma");
    c.speed.b_Md = jd(doc, "/speed/b_Md");
    c.speed.b_La = jd(doc, "/speed/b_La");
    c.speed.b_Ld = jd(doc, "/speed/b_Ld");
    c.speed.b_ra = jd(doc, "/speed/b_ra");
    c.speed.b_rd = jd(doc, "/speed/b_rd");

    c.pred.M_PC = static_cast<int>(ji(doc, "/predictive/M_PC"));
    c.pred.E_sigma = jd(doc, "/predictive/E_sigma");
    c.pred.N_W = jd(doc, "/predictive/N_W");
    c.pred_grid_points = static_cast<int>(ji(doc, "/predictive/grid_points"));

    c.solver.max_step = jd(doc, "/solver/max_step");
    c.solver.min_step = jd(doc, "/solver/min_step");
    c.solver.rel_tol = jd(doc, "/solver/rel_tol");
    c.solver.abs_tol = jd(doc, "/solver/abs_tol");
    c.solver.penetration_tol = jd(doc, "/solver/penetration_tol");
    c.solver.refractory = jd(doc, "/solver/refractory");

    c.noise.enabled = jb(doc, "/noise/enabled");
    c.noise.std = jd(doc, "/noise/std");

    c.sample.kind = js(doc, "/sample/kind");
    c.sample.step_height = jd(doc, "/sample/step_height");
    c.sample.period = jd(doc, "/sample/period");
    c.sample.A_sin = jd(doc, "/sample/A_sin");
    c.sample.P_sin = jd(doc, "/sample/P_sin");
    c.sample.path = js(doc, "/sample/path");

    c.raster.n_lines = static_cast<int>(ji(doc, "/raster/n_lines"));
    c.raster.I_x = jd(doc, "/raster/I_x");
    c.raster.dy = jd(doc, "/raster/dy");
    c.raster.i_y0 = jd(doc, "/raster/i_y0");

    c.ctrl.plain_pid = jb(doc, "/controllers/plain_pid");
    c.ctrl.q_control = jb(doc, "/controllers/q_control");
    c.ctrl.dynamic_pid = jb(doc, "/controllers/dynamic_pid");
    c.ctrl.hybrid_pid = jb(doc, "/controllers/hybrid_pid");
    c.ctrl.speed_regulator = jb(doc, "/controllers/speed_regulator");
    c.ctrl.predictive = jb(doc, "/controllers/predictive");

    c.engage.clearance = jd(doc, "/engagement/clearance");
    c.engage.tol = jd(doc, "/engagement/tol");
    c.engage.hold_tau = jd(doc, "/engagement/hold_tau");
    c.engage.max_tau = jd(doc, "/engagement/max_tau");

    c.seed = static_cast<std::uint64_t>(ji(doc, "/seed"));
    c.ctrl_per_period = static_cast<int>(ji(doc, "/ctrl_per_period"));
    c.record_every = static_cast<int>(ji(doc, "/record_every"));
    c.line_from = static_cast<int>(ji(doc, "/lines/from"));
    c.line_to = static_cast<int>(ji(doc, "/lines/to"));
    return c;
}

}  // namespace

ResolvedConfig resolve_config(const std::string& config_path,
                              const std::vector<std::string>& overrides)
{
    ordered_json doc = ordered_json::object();
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in)
            throw ConfigError("cannot open config file: " + config_path);
        try {
            doc = ordered_json::parse(in);
        } catch (const std::exception& e) {
            throw ConfigError("config parse error in " + config_path + ": " + e.what());
        }
        if (!doc.is_object())
            throw ConfigError("config root must be a JSON object: " + config_path);
    }

    for (const std::string& ov : overrides) {
        const std::size_t eq = ov.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("override must be key.path=value: " + ov);
        std::string key = "/" + ov.substr(0, eq);
        std::replace(key.begin(), key.end(), '.', '/');
        const std::string value = ov.substr(eq + 1);
        ordered_json parsed;
        try {
            parsed = ordered_json::parse(value);
        } catch (const std::exception&) {
            parsed = value;  // keep as string (e.g. sample kinds, paths)
        }
        try {
            doc[ordered_json::json_pointer(key)] = parsed;
        } catch (const std::exception& e) {
            throw ConfigError("cannot apply override " + ov + ": " + e.what());
        }
    }

    fill_defaults(doc);

    ResolvedConfig rc;
    rc.cfg = parse_config(doc);
    rc.cfg.validate();
    rc.echo_json = doc.dump(2) + "\n";
    return rc;
}

// ------------------------------------------------------------- line runs ---

namespace {

std::uint64_t line_seed(std::uint64_t seed, int line)
{
    return seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(line));
}

// Linear resample of (rows.i_x -> rows.sigma_hat) onto n uniform points over
// [0, I_x], constant extension at the ends.
std::vector<double> resample_sigma_hat(const std::vector<TraceRow>& rows, double I_x, int n)
{
    std::vector<double> out(static_cast<std::size_t>(n));
    const double dx = I_x / static_cast<double>(n - 1);
    std::size_t j = 0;
    for (int i = 0; i < n; ++i) {
        const double x = static_cast<double>(i) * dx;
        while (j + 1 < rows.size() && rows[j + 1].i_x <= x)
            ++j;
        double v;
        if (x <= rows.front().i_x || rows.size() == 1) {
            v = rows.front().sigma_hat;
        } else if (j + 1 >= rows.size()) {
            v = rows.back().sigma_hat;
        } else {
            const double x0 = rows[j].i_x, x1 = rows[j + 1].i_x;
            const double f = x1 > x0 ? (x - x0) / (x1 - x0) : 0.0;
            v = rows[j].sigma_hat + f * (rows[j + 1].sigma_hat - rows[j].sigma_hat);
        }
        out[static_cast<std::size_t>(i)] = v;
    }
    return out;
}

struct LineOutput {
    LineTrace trace;
    double sum_K_sigma = 0.0;
    std::vector<double> sigma_hat_grid;  // resampled, unfiltered
};

LineOutput run_line(const ExperimentConfig& cfg, const SampleSurface& surface, int line_index,
                    const std::vector<std::vector<double>>& history)
{
    const double T_ctrl = cfg.ctrl_period();
    const double tau_A = cfg.cant.tau_A();
    const double i_y = cfg.raster.i_y0 + (line_index - 1) * cfg.raster.dy;
    const double dx_pred = cfg.raster.I_x / static_cast<double>(cfg.pred_grid_points - 1);

    LineSim sim;
    sim.cant = cfg.cant;
    sim.inter = cfg.inter;
    sim.interaction_enabled = cfg.interaction_enabled;
    sim.zpiezo = cfg.zp;
    sim.solver = cfg.solver;
    sim.surface = &surface;
    sim.i_y = i_y;
    sim.noise = cfg.noise;
    sim.gauss = GaussStream(line_seed(cfg.seed, line_index));
    sim.A_f = cfg.A_f;

    // Feedforward gains: only once the full line history exists.
    std::vector<double> gains;
    double sum_K = 0.0;
    bool ff_on = false;
    if (cfg.ctrl.predictive && static_cast<int>(history.size()) >= cfg.pred.M_PC + 1) {
        gains = adaptive_gains(history, cfg.pred.M_PC, cfg.pred.E_sigma, dx_pred);
        for (double g : gains)
            sum_K += g;
        ff_on = true;
    }

    const double sigma0 = sim.sigma_at(0.0);
    sim.s.t = 0.0;
    sim.s.i_x = 0.0;
    sim.s.tip = {-cfg.A_f, 0.0};
    sim.s.zp = {sigma0 + cfg.engage.clearance * cfg.A_f, 0.0};

    const double Q_used = cfg.ctrl.q_control ? cfg.hybrid.Q_prime : cfg.cant.Q;
    sim.hold.drive.omega_d = cfg.omega_d;
    sim.hold.drive.D = drive_for_amplitude(cfg.A_f, Q_used, cfg.omega_d, cfg.cant);
    sim.hold.drive.K_Q = qcontrol_gain(Q_used, cfg.cant);
    sim.hold.b_cmd = sim.s.zp.b;
    sim.hold.v_x = 0.0;

    double integrator = sim.s.zp.b / cfg.pid.K_I;  // b_cmd starts at the parked height
    double e_prev = 0.0;
    bool first_update = true;
    HybridState hstate;

    auto controller_update = [&](double t, bool engaging) {
        const double A = sim.demod.current_A;
        const double dA = sim.demod.dA_dt;
        double K_s_eff, D, K_Q;
        if (cfg.ctrl.hybrid_pid) {
            hybrid_transition(hstate, A, dA, t, cfg.hybrid, tau_A);
            const HybridOutputs o = hybrid_outputs(hstate.q, A, cfg.hybrid, cfg.cant,
                                                   cfg.pid.A_r, cfg.A_f, cfg.omega_d);
            K_s_eff = o.K_s_q;
            D = o.D_q;
            K_Q = o.K_Q_q;
        } else {
            K_s_eff = cfg.ctrl.dynamic_pid ? cfg.hybrid.K_s : 1.0;
            D = drive_for_amplitude(cfg.A_f, Q_used, cfg.omega_d, cfg.cant);
            K_Q = qcontrol_gain(Q_used, cfg.cant);
        }
        const double e = dynamic_pid_error(A, cfg.pid, cfg.hybrid.A_t_plus, K_s_eff);
        const double de_dt = first_update ? 0.0 : (e - e_prev) / T_ctrl;
        first_update = false;
        e_prev = e;
        double b_cmd = pid_update(integrator, e, de_dt, cfg.pid, T_ctrl);
        if (ff_on)
            b_cmd += predictive_feedforward(history, gains, dx_pred, sim.s.i_x);
        if (!engaging && cfg.ctrl.speed_regulator) {
            const double db_dt = cfg.pid.K_I * e + cfg.pid.K_P * de_dt;
            sim.hold.v_x = speed_update(sim.hold.v_x, db_dt, cfg.speed, T_ctrl);
        }
        sim.hold.drive.D = D;
        sim.hold.drive.K_Q = K_Q;
        sim.hold.b_cmd = b_cmd;
    };

    // Engagement: settle the amplitude loop before any lateral motion. The
    // settle test averages the measured amplitude over the hold window, so
    // measurement noise shrinks by its sample count instead of resetting a
    // sample-by-sample dwell.
    long n = 0;
    const double t_cap = cfg.engage.max_tau * tau_A;
    const long n_hold = std::max<long>(1, std::lround(cfg.engage.hold_tau * tau_A / T_ctrl));
    std::vector<double> a_ring(static_cast<std::size_t>(n_hold), 0.0);
    double a_sum = 0.0;
    for (;;) {
        ++n;
        const double t = static_cast<double>(n) * T_ctrl;
        sim.advance_to(t);
        controller_update(t, true);
        const std::size_t slot = static_cast<std::size_t>((n - 1) % n_hold);
        if (n > n_hold)
            a_sum -= a_ring[slot];
        a_ring[slot] = sim.demod.current_A;
        a_sum += a_ring[slot];
        if (n >= n_hold && std::abs(a_sum / static_cast<double>(n_hold) - cfg.pid.A_r) <=
                               cfg.engage.tol * cfg.pid.A_r)
            break;
        if (t > t_cap)
            throw EngagementFailed("no amplitude settle within the engagement budget");
    }
    const std::size_t first_scan_impact = sim.impacts.size();

    LineOutput out;
    out.trace.line = line_index;
    out.trace.i_y = i_y;
    out.sum_K_sigma = sum_K;

    sim.hold.v_x = cfg.speed.V_x0;

    auto record = [&](double t) {
        TraceRow r;
        r.t = t;
        r.i_x = sim.s.i_x;
        r.sigma = sim.sigma_at(r.i_x);
        r.A = sim.demod.current_A;
        r.b = sim.s.zp.b;
        r.sigma_hat = r.b - r.A;
        r.b_cmd = sim.hold.b_cmd;
        r.v_x = sim.hold.v_x;
        r.q = hstate.q;
        out.trace.rows.push_back(r);
    };

    record(static_cast<double>(n) * T_ctrl);
    long k = 0;
    while (sim.s.i_x < cfg.raster.I_x) {
        ++k;
        const double t = static_cast<double>(n + k) * T_ctrl;
        sim.advance_to(t);
        controller_update(t, false);
        if (k % cfg.record_every == 0)
            record(t);
    }
    if (k % cfg.record_every != 0)
        record(static_cast<double>(n + k) * T_ctrl);

    out.trace.impacts.assign(sim.impacts.begin() + static_cast<long>(first_scan_impact),
                             sim.impacts.end());
    if (cfg.ctrl.predictive)
        out.sigma_hat_grid = resample_sigma_hat(out.trace.rows, cfg.raster.I_x,
                                                cfg.pred_grid_points);
    return out;
}

int thread_budget(int n_jobs)
{
    unsigned n = std::thread::hardware_concurrency();
    if (const char* env = std::getenv("AFM_SIM_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1)
            n = static_cast<unsigned>(v);
    }
    if (n < 1)
        n = 1;
    return static_cast<int>(std::min<unsigned>(n, static_cast<unsigned>(n_jobs)));
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg)
{
    cfg.validate();
    const SampleSurface surface = cfg.make_surface();
    if (surface.kind == SampleSurface::Kind::heightmap) {
        if (cfg.raster.I_x > surface.I_x * (1.0 + 1e-9))
            throw ConfigError("raster: I_x exceeds the height map extent");
        const double i_y_last = cfg.raster.i_y0 + (cfg.raster.n_lines - 1) * cfg.raster.dy;
        if (cfg.raster.i_y0 < -0.5 * surface.dy || i_y_last > surface.I_y + 0.5 * surface.dy)
            throw ConfigError("raster: scan lines leave the height map rows");
    }

    ExperimentResult res;
    if (cfg.raster.n_lines == 0)
        return res;

    const int last = cfg.line_to == 0 ? cfg.raster.n_lines : cfg.line_to;
    if (last > cfg.raster.n_lines)
        throw ConfigError("lines: subset exceeds raster.n_lines");
    const int n_run = last - cfg.line_from + 1;
    const double tau_A = cfg.cant.tau_A();

    std::vector<LineOutput> outputs(static_cast<std::size_t>(n_run));

    if (cfg.ctrl.predictive) {
        // Lines are causally chained through the feedforward history.
        std::vector<std::vector<double>> history;  // newest first, filtered
        const double dx_pred = cfg.raster.I_x / static_cast<double>(cfg.pred_grid_points - 1);
        for (int i = 0; i < n_run; ++i) {
            const int line = cfg.line_from + i;
            try {
                outputs[static_cast<std::size_t>(i)] = run_line(cfg, surface, line, history);
            } catch (const Error& e) {
                throw SimError("line " + std::to_string(line) + ": " + e.what());
            }
            history.insert(history.begin(),
                           window_filter(outputs[static_cast<std::size_t>(i)].sigma_hat_grid,
                                         dx_pred, cfg.pred.N_W));
            if (static_cast<int>(history.size()) > cfg.pred.M_PC + 1)
                history.resize(static_cast<std::size_t>(cfg.pred.M_PC + 1));
        }
    } else {
        const int n_threads = thread_budget(n_run);
        std::atomic<int> next{0};
        std::vector<std::exception_ptr> errs(static_cast<std::size_t>(n_run));
        auto worker = [&]() {
            const std::vector<std::vector<double>> no_history;
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n_run)
                    return;
                const int line = cfg.line_from + i;
                try {
                    outputs[static_cast<std::size_t>(i)] =
                        run_line(cfg, surface, line, no_history);
                } catch (const Error& e) {
                    errs[static_cast<std::size_t>(i)] = std::make_exception_ptr(
                        SimError("line " + std::to_string(line) + ": " + e.what()));
                } catch (...) {
                    errs[static_cast<std::size_t>(i)] = std::current_exception();
                }
            }
        };
        if (n_threads <= 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (int i = 0; i < n_threads; ++i)
                pool.emplace_back(worker);
            for (std::thread& th : pool)
                th.join();
        }
        for (const std::exception_ptr& ep : errs)
            if (ep)
                std::rethrow_exception(ep);
    }

    for (LineOutput& lo : outputs) {
        res.traces.push_back(std::move(lo.trace));
        Metrics m = compute_metrics(res.traces.back(), cfg.hybrid, cfg.ctrl.hybrid_pid, tau_A);
        m.sum_K_sigma = lo.sum_K_sigma;
        res.per_line.push_back(std::move(m));
    }
    res.aggregate = aggregate_metrics(res.traces, res.per_line);
    return res;
}

// --------------------------------------------------------------- metrics ---

std::vector<Episode> detect_artefact_episodes(const LineTrace& tr, const HybridConfig& cfg,
                                              bool hybrid_active, double tau_A)
{
    std::vector<Episode> out;
    const auto& rows = tr.rows;
    if (rows.empty())
        return out;

    auto close_run = [&](EpisodeType type, std::size_t first, std::size_t last) {
        out.push_back({type, rows[first].t, rows[last].t, rows[first].i_x, rows[last].i_x});
    };

    if (hybrid_active) {
        std::size_t start = 0;
        for (std::size_t i = 1; i <= rows.size(); ++i) {
            if (i == rows.size() || rows[i].q != rows[start].q) {
                switch (rows[start].q) {
                case 2: close_run(EpisodeType::probe_loss, start, i - 1); break;
                case 3: close_run(EpisodeType::recovery, start, i - 1); break;
                case 4: close_run(EpisodeType::recoil, start, i - 1); break;
                default: break;
                }
                start = i;
            }
        }
    } else {
        auto threshold_runs = [&](EpisodeType type, auto&& pred) {
            std::size_t start = 0;
            bool in_run = false;
            for (std::size_t i = 0; i <= rows.size(); ++i) {
                const bool hit = i < rows.size() && pred(rows[i]);
                if (hit && !in_run) {
                    start = i;
                    in_run = true;
                } else if (!hit && in_run) {
                    close_run(type, start, i - 1);
                    in_run = false;
                }
            }
        };
        threshold_runs(EpisodeType::probe_loss,
                       [&](const TraceRow& r) { return r.A >= cfg.A_t_plus; });
        threshold_runs(EpisodeType::recoil,
                       [&](const TraceRow& r) { return r.A <= cfg.A_t_RL; });

        // Recovery proxy: a fixed window right after each probe loss.
        const std::size_t n_pl = out.size();
        for (std::size_t e = 0; e < n_pl; ++e) {
            if (out[e].type != EpisodeType::probe_loss)
                continue;
            const double w0 = out[e].t_end;
            const double w1 = w0 + 10.0 * tau_A;
            std::size_t first = rows.size();
            std::size_t last = 0;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (rows[i].t > w0 && rows[i].t <= w1) {
                    if (first == rows.size())
                        first = i;
                    last = i;
                }
            }
            if (first < rows.size())
                close_run(EpisodeType::recovery, first, last);
        }
    }

    std::sort(out.begin(), out.end(),
              [](const Episode& a, const Episode& b) { return a.t_start < b.t_start; });
    return out;
}

namespace {

struct Moments {
    int n = 0;
    double sum = 0.0, sum_sq = 0.0, max_abs = 0.0;

    void add(double v)
    {
        ++n;
        sum += v;
        sum_sq += v * v;
        max_abs = std::max(max_abs, std::abs(v));
    }

    double rms() const { return n ? std::sqrt(sum_sq / n) : 0.0; }

    double sd() const
    {
        if (!n)
            return 0.0;
        const double mean = sum / n;
        return std::sqrt(std::max(sum_sq / n - mean * mean, 0.0));
    }
};

}  // namespace

Metrics compute_metrics(const LineTrace& tr, const HybridConfig& cfg, bool hybrid_active,
                        double tau_A)
{
    if (tr.rows.empty())
        throw EmptyTrace("compute_metrics: trace has no samples");

    Metrics m;
    Moments e_sig, v_imp, bump;
    for (const TraceRow& r : tr.rows) {
        if (r.sigma_hat != r.b - r.A)
            throw Error("trace row violates the height-estimate identity");
        e_sig.add(r.sigma_hat - r.sigma);
    }
    for (const ImpactEvent& e : tr.impacts)
        v_imp.add(e.v_i);

    const std::vector<Episode> eps = detect_artefact_episodes(tr, cfg, hybrid_active, tau_A);
    for (const Episode& ep : eps) {
        switch (ep.type) {
        case EpisodeType::probe_loss: ++m.n_probe_loss; break;
        case EpisodeType::recoil: ++m.n_recoil; break;
        case EpisodeType::recovery: {
            ++m.n_recovery;
            double best = -std::numeric_limits<double>::infinity();
            for (const TraceRow& r : tr.rows)
                if (r.t >= ep.t_start && r.t <= ep.t_end)
                    best = std::max(best, r.sigma_hat - r.sigma);
            if (std::isfinite(best)) {
                m.recovery_bumps.push_back(best);
                bump.add(best);
            }
            break;
        }
        }
    }

    m.n_samples = e_sig.n;
    m.rms_e_sigma = e_sig.rms();
    m.sd_e_sigma = e_sig.sd();
    m.max_e_sigma = e_sig.max_abs;
    m.n_impacts = v_imp.n;
    m.rms_v_i = v_imp.rms();
    m.sd_v_i = v_imp.sd();
    m.max_v_i = v_imp.max_abs;
    m.rms_recovery_bump = bump.rms();
    m.sd_recovery_bump = bump.sd();
    m.max_recovery_bump = bump.max_abs;
    m.T_s = tr.rows.back().t - tr.rows.front().t;
    return m;
}

Metrics aggregate_metrics(const std::vector<LineTrace>& traces,
                          const std::vector<Metrics>& per_line)
{
    Metrics agg;
    Moments e_sig, v_imp, bump;
    for (const LineTrace& tr : traces) {
        for (const TraceRow& r : tr.rows)
            e_sig.add(r.sigma_hat - r.sigma);
        for (const ImpactEvent& e : tr.impacts)
            v_imp.add(e.v_i);
    }
    double sum_K = 0.0;
    for (const Metrics& m : per_line) {
        for (double b : m.recovery_bumps) {
            bump.add(b);
            agg.recovery_bumps.push_back(b);
        }
        agg.n_probe_loss += m.n_probe_loss;
        agg.n_recovery += m.n_recovery;
        agg.n_recoil += m.n_recoil;
        agg.T_s += m.T_s;
        sum_K += m.sum_K_sigma;
    }
    agg.n_samples = e_sig.n;
    agg.rms_e_sigma = e_sig.rms();
    agg.sd_e_sigma = e_sig.sd();
    agg.max_e_sigma = e_sig.max_abs;
    agg.n_impacts = v_imp.n;
    agg.rms_v_i = v_imp.rms();
    agg.sd_v_i = v_imp.sd();
    agg.max_v_i = v_imp.max_abs;
    agg.rms_recovery_bump = bump.rms();
    agg.sd_recovery_bump = bump.sd();
    agg.max_recovery_bump = bump.max_abs;
    agg.sum_K_sigma = per_line.empty() ? 0.0 : sum_K / static_cast<double>(per_line.size());
    return agg;
}

// ---------------------------------------------------------------- output ---

namespace {

ordered_json metrics_json(const Metrics& m)
{
    ordered_json j;
    j["n_samples"] = m.n_samples;
    j["rms_e_sigma"] = m.rms_e_sigma;
    j["sd_e_sigma"] = m.sd_e_sigma;
    j["max_e_sigma"] = m.max_e_sigma;
    j["n_impacts"] = m.n_impacts;
    j["rms_v_i"] = m.rms_v_i;
    j["sd_v_i"] = m.sd_v_i;
    j["max_v_i"] = m.max_v_i;
    j["recovery_bumps"] = m.recovery_bumps;
    j["rms_recovery_bump"] = m.rms_recovery_bump;
    j["sd_recovery_bump"] = m.sd_recovery_bump;
    j["max_recovery_bump"] = m.max_recovery_bump;
    j["n_probe_loss"] = m.n_probe_loss;
    j["n_recovery"] = m.n_recovery;
    j["n_recoil"] = m.n_recoil;
    return j;
}

}  // namespace

std::string metrics_to_json_text(const ExperimentResult& r)
{
    ordered_json doc;
    doc["lines"] = ordered_json::array();
    for (std::size_t i = 0; i < r.per_line.size(); ++i) {
        ordered_json j;
        j["line"] = r.traces[i].line;
        j["i_y"] = r.traces[i].i_y;
        ordered_json body = metrics_json(r.per_line[i]);
        for (auto& [k, v] : body.items())
            j[k] = v;
        j["T_s"] = r.per_line[i].T_s;
        j["sum_K_sigma"] = r.per_line[i].sum_K_sigma;
        doc["lines"].push_back(std::move(j));
    }
    ordered_json agg = metrics_json(r.aggregate);
    agg["T_s_tot"] = r.aggregate.T_s;
    agg["mean_K_sigma"] = r.aggregate.sum_K_sigma;
    doc["aggregate"] = std::move(agg);
    return doc.dump(2) + "\n";
}

void write_outputs(const ExperimentResult& r, const std::string& echo_json,
                   const std::string& out_dir)
{
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec)
        throw IoError("cannot create output directory: " + out_dir);

    for (const LineTrace& tr : r.traces) {
        write_trace_csv(tr, out_dir + "/line_" + std::to_string(tr.line) + ".csv");
        write_impacts_csv(tr, out_dir + "/impacts_" + std::to_string(tr.line) + ".csv");
    }

    std::ofstream mj(out_dir + "/metrics.json");
    if (!mj)
        throw IoError("cannot write metrics.json in " + out_dir);
    mj << metrics_to_json_text(r);

    std::ofstream cj(out_dir + "/config.json");
    if (!cj)
        throw IoError("cannot write config.json in " + out_dir);
    cj << echo_json;
}

}  // namespace afm
