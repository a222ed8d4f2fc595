#include "afm/control.hpp"

#include <algorithm>
#include <cmath>

namespace afm {

double pid_update(double& integrator, double e, double de_dt, const PidConfig& cfg, double dt)
{
    integrator += e * dt;
    if (cfg.integrator_limit > 0.0)
        integrator = std::clamp(integrator, -cfg.integrator_limit, cfg.integrator_limit);
    return cfg.K_P * e + cfg.K_I * integrator + cfg.K_D * de_dt;
}

double dynamic_pid_error(double A, const PidConfig& cfg, double A_t, double K_s)
{
    if (A <= A_t)
        return cfg.A_r - A;
    return (cfg.A_r - A_t) + K_s * (A_t - A);
}

void hybrid_transition(HybridState& h, double A, double dA_dt, double t, const HybridConfig& cfg,
                       double tau_A)
{
    if (!cfg.guards_enabled)
        return;

    const double timeout = cfg.K_tau * tau_A;
    switch (h.q) {
    case 1:
        if (A >= cfg.A_t_plus) {
            h.q = 2;
        } else if (A <= cfg.A_t_RL) {
            h.q = 4;
            h.rho = false;
            h.t0 = t;
        }
        break;
    case 2:
        // The impact signature outranks the threshold exit: Recovery handles
        // the surface approach that the plain exit would cut short.
        if (dA_dt < cfg.alpha_t) {
            h.q = 3;
            h.rho = false;
            h.t0 = t;
        } else if (A <= cfg.A_t_minus) {
            h.q = 1;
        }
        break;
    case 3:
        if ((dA_dt < 0.0 && h.rho) || t - h.t0 >= timeout)
            h.q = 1;
        else if (dA_dt > 0.0 && !h.rho)
            h.rho = true;
        break;
    case 4:
        if ((dA_dt < cfg.alpha_t && h.rho) || t - h.t0 >= timeout)
            h.q = 1;
        else if (dA_dt > 0.0 && !h.rho)
            h.rho = true;
        break;
    default:
        throw SimError("hybrid: invalid mode");
    }
}

HybridOutputs hybrid_outputs(int q, double A, const HybridConfig& cfg,
                             const CantileverParams& c, double A_r, double A_f, double omega_d)
{
    double Q_eff = cfg.Q_prime;
    if (q == 3)
        Q_eff = cfg.Q_prime - cfg.dQ_PL * std::min(std::abs(A_r - A) / std::abs(A_r - A_f), 1.0);
    else if (q == 4)
        Q_eff = cfg.Q_prime - cfg.dQ_RL * std::min(std::abs(A_r - A) / A_r, 1.0);
    if (!(Q_eff > 0.0))
        throw EffectiveQNonPositive("hybrid: effective quality factor <= 0");

    HybridOutputs out;
    out.K_s_q = q == 2 ? cfg.K_s : 1.0;
    out.D_q = drive_for_amplitude(A_f, Q_eff, omega_d, c);
    out.K_Q_q = qcontrol_gain(Q_eff, c);
    return out;
}

double speed_update(double v_x, double db_dt, const SpeedConfig& cfg, double dt)
{
    double target;
    if (db_dt > cfg.b_ra) {
        const double K_va = cfg.V_xM / std::abs(cfg.b_La - cfg.b_ra);
        target = cfg.V_xM - K_va * std::abs(db_dt - cfg.b_ra);
    } else if (db_dt < cfg.b_rd) {
        const double K_vd = cfg.V_xM / std::abs(cfg.b_Ld - cfg.b_rd);
        target = cfg.V_xM - K_vd * std::abs(db_dt - cfg.b_rd);
    } else {
        target = cfg.V_xM;
    }
    const double v = target + (v_x - target) * std::exp(-dt / cfg.tau_v);
    return std::clamp(v, cfg.V_xm, cfg.V_xM);
}

std::vector<double> window_filter(const std::vector<double>& y, double dx, double N_W)
{
    const std::size_t n = y.size();
    if (n < 2 || !(dx > 0.0))
        throw ConfigError("window_filter: need >= 2 samples on a positive-pitch grid");
    const double I_x = static_cast<double>(n - 1) * dx;
    if (!(N_W < 0.5 * I_x))
        throw WindowTooLarge("window_filter: N_W must be below I_x/2");

    const long h = std::lround(N_W / dx);
    const long ln = static_cast<long>(n);
    auto at = [&](long i) { return y[static_cast<std::size_t>(std::clamp(i, 0L, ln - 1))]; };

    std::vector<double> out(n);
    double sum = 0.0;
    for (long j = -h; j <= h; ++j)
        sum += at(j);
    const double inv = 1.0 / static_cast<double>(2 * h + 1);
    out[0] = sum * inv;
    for (long i = 1; i < ln; ++i) {
        sum += at(i + h) - at(i - 1 - h);
        out[static_cast<std::size_t>(i)] = sum * inv;
    }
    return out;
}

// Trapezoidal integral of |a - b| over the common uniform grid.
static double line_difference(const std::vector<double>& a, const std::vector<double>& b,
                              double dx)
{
    const std::size_t n = a.size();
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double f = std::abs(a[i] - b[i]);
        sum += (i == 0 || i + 1 == n) ? 0.5 * f : f;
    }
    return sum * dx;
}

std::vector<double> adaptive_gains(const std::vector<std::vector<double>>& prev, int M_PC,
                                   double E_sigma, double dx)
{
    const std::size_t m = static_cast<std::size_t>(M_PC);
    if (prev.size() < m)
        throw InsufficientHistory("adaptive_gains: need at least M_PC previous lines");
    const bool full = prev.size() >= m + 1;
    for (const auto& line : prev)
        if (line.size() != prev.front().size())
            throw InsufficientHistory("adaptive_gains: history lines on different grids");

    std::vector<double> gains(m, 0.0);
    for (int j = 1; j <= M_PC; ++j) {
        if (j == M_PC && !full)
            break;  // oldest difference unavailable: gain stays 0
        const double e = line_difference(prev[static_cast<std::size_t>(j - 1)],
                                         prev[static_cast<std::size_t>(j)], dx);
        const double clip = std::max((E_sigma - e) / E_sigma, 0.0);
        // Weight halves per extra line of lag; the last gain reuses the
        // previous weight so the full set can sum to 1. M_PC = 1 degenerates
        // to a single unit-weight line.
        double w;
        if (M_PC == 1)
            w = 1.0;
        else if (j == M_PC)
            w = 1.0 / (2.0 * (j - 1));
        else
            w = 1.0 / (2.0 * j);
        gains[static_cast<std::size_t>(j - 1)] = w * clip;
    }
    return gains;
}

double predictive_feedforward(const std::vector<std::vector<double>>& prev,
                              const std::vector<double>& gains, double dx, double i_x)
{
    double out = 0.0;
    for (std::size_t j = 0; j < gains.size(); ++j) {
        if (gains[j] == 0.0)
            continue;
        const auto& line = prev[j];
        const long n = static_cast<long>(line.size());
        double pos = i_x / dx;
        if (pos < 0.0)
            pos = 0.0;
        long i = static_cast<long>(std::floor(pos));
        if (i > n - 2)
            i = n - 2;
        double frac = pos - static_cast<double>(i);
        if (frac > 1.0)
            frac = 1.0;
        const double v = line[static_cast<std::size_t>(i)] +
                         frac * (line[static_cast<std::size_t>(i + 1)] -
                                 line[static_cast<std::size_t>(i)]);
        out += gains[j] * v;
    }
    return out;
}

}  // namespace afm
