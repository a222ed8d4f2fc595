#pragma once

#include <cmath>
#include <complex>

#include "afm/errors.hpp"

// Continuous-time cantilever dynamics: damped driven point-mass oscillator
// with a DMT tip-sample force, an instantaneous impact reset, and a second
// order z-axis piezo. All quantities SI.

namespace afm {

struct CantileverParams {
    double omega_n = 0.0;  // natural frequency [rad/s]
    double Q = 0.0;        // quality factor
    double r = 0.0;        // restitution coefficient
    double k = 0.0;        // stiffness [N/m]
    double m = 0.0;        // mass [kg], = k/omega_n^2
    double c = 0.0;        // damping [kg/s], = m*omega_n/Q

    static CantileverParams from_fundamental(double omega_n, double Q, double r, double k)
    {
        CantileverParams p;
        p.omega_n = omega_n;
        p.Q = Q;
        p.r = r;
        p.k = k;
        p.m = k / (omega_n * omega_n);
        p.c = p.m * omega_n / Q;
        return p;
    }

    void validate() const
    {
        if (!(omega_n > 0.0) || !(Q > 0.0) || !(k > 0.0))
            throw ConfigError("cantilever: omega_n, Q, k must be positive");
        if (!(r >= 0.0 && r <= 1.0))
            throw ConfigError("cantilever: restitution r must be in [0, 1]");
        const double m_ref = k / (omega_n * omega_n);
        const double c_ref = m_ref * omega_n / Q;
        if (std::abs(m - m_ref) > 1e-12 * m_ref || std::abs(c - c_ref) > 1e-12 * c_ref)
            throw ConfigError("cantilever: m, c inconsistent with k, omega_n, Q");
    }

    // Amplitude-response time constant of the cantilever-demodulator cascade.
    double tau_A() const { return 2.0 * Q / omega_n; }
};

struct InteractionParams {
    double H = 0.0;    // Hamaker constant [J]
    double r_t = 0.0;  // tip radius [m]
    double l_m = 0.0;  // intermolecular distance [m]
    double E_t = 0.0;  // tip elastic modulus [Pa]
    double E_s = 0.0;  // sample elastic modulus [Pa]
    double V_t = 0.0;  // tip Poisson ratio
    double V_s = 0.0;  // sample Poisson ratio

    void validate() const
    {
        if (!(H > 0.0 && r_t > 0.0 && l_m > 0.0 && E_t > 0.0 && E_s > 0.0))
            throw ConfigError("interaction: H, r_t, l_m, E_t, E_s must be positive");
        if (!(V_t > 0.0 && V_t < 0.5 && V_s > 0.0 && V_s < 0.5))
            throw ConfigError("interaction: Poisson ratios must be in (0, 0.5)");
    }
};

struct DitherDrive {
    double D = 0.0;        // driving amplitude [m/s^2]
    double omega_d = 0.0;  // driving frequency [rad/s]
    double K_Q = 0.0;      // velocity feedback gain [1/s]

    void validate() const
    {
        if (!(D >= 0.0) || !(omega_d > 0.0))
            throw ConfigError("dither: need D >= 0 and omega_d > 0");
    }
};

struct ZPiezoParams {
    double omega_zp = 0.0;  // natural frequency [rad/s]
    double Q_zp = 0.0;      // quality factor
    double K_zp = 0.0;      // nominal gain from the parameter sheet (not applied; DC gain is unity)

    void validate() const
    {
        if (!(omega_zp > 0.0) || !(Q_zp > 0.0))
            throw ConfigError("z piezo: omega_zp and Q_zp must be positive");
    }
};

// Tip position/velocity relative to the cantilever base.
struct TipState {
    double x1 = 0.0;  // [m]
    double x2 = 0.0;  // [m/s]
};

// z-piezo second-order state: base height and its rate.
struct ZPiezoState {
    double b = 0.0;  // [m]
    double w = 0.0;  // [m/s]
};

// DMT tip-sample force divided by cantilever mass [m/s^2].
// l is the tip-sample distance; the repulsive branch is total on l <= l_m,
// including (transient) negative l.
inline double interaction_accel(double l, const InteractionParams& p, double m_cant)
{
    const double vdw_at_lm = -p.H * p.r_t / (6.0 * p.l_m * p.l_m);
    double force;
    if (l > p.l_m) {
        force = -p.H * p.r_t / (6.0 * l * l);
    } else {
        const double elastic = (1.0 - p.V_t * p.V_t) / p.E_t + (1.0 - p.V_s * p.V_s) / p.E_s;
        const double d = p.l_m - l;
        force = vdw_at_lm + (4.0 / 3.0) * std::sqrt(p.r_t * d * d * d) / elastic;
    }
    return force / m_cant;
}

// Dither piezo acceleration with velocity feedback (plain sinusoid for K_Q = 0).
inline double dither_accel(const DitherDrive& drive, double t, double x2)
{
    return drive.D * std::sin(drive.omega_d * t) - drive.K_Q * x2;
}

// Frequency-response denominator shared by the amplitude/drive conversions.
inline double response_magnitude(double omega_n, double omega_d, double Q_eff)
{
    const std::complex<double> den(omega_n * omega_n - omega_d * omega_d,
                                   (omega_n / Q_eff) * omega_d);
    return std::abs(den);
}

// Steady free-oscillation amplitude for a given drive amplitude.
inline double free_amplitude(double D, double omega_d, const CantileverParams& c, double Q_eff)
{
    const double mag = response_magnitude(c.omega_n, omega_d, Q_eff);
    if (!(mag > 0.0))
        throw SimError("free_amplitude: degenerate resonance denominator");
    return D / mag;
}

// Drive amplitude that produces a given free amplitude at effective quality Q_eff.
inline double drive_for_amplitude(double A_f, double Q_eff, double omega_d,
                                  const CantileverParams& c)
{
    return A_f * response_magnitude(c.omega_n, omega_d, Q_eff);
}

// Velocity-feedback gain that turns quality factor Q into Q_target.
inline double qcontrol_gain(double Q_target, const CantileverParams& c)
{
    return c.omega_n * (1.0 / Q_target - 1.0 / c.Q);
}

struct TipDeriv {
    double dx1 = 0.0;
    double dx2 = 0.0;
};

// Right-hand side of the cantilever equations of motion. b is the base
// height, sigma the surface height under the tip.
inline TipDeriv cantilever_rhs(const TipState& s, double t, const DitherDrive& drive, double b,
                               double sigma, const CantileverParams& c,
                               const InteractionParams& p)
{
    const double u = dither_accel(drive, t, s.x2);
    const double F = interaction_accel(b + s.x1 - sigma, p, c.m);
    TipDeriv d;
    d.dx1 = s.x2;
    d.dx2 = -c.omega_n * c.omega_n * s.x1 - (c.omega_n / c.Q) * s.x2 + u + F;
    return d;
}

// Impact reset: velocity reversed and scaled by the restitution coefficient,
// position pinned to the surface.
inline TipState impact_reset(const TipState& s, double r, double sigma, double b)
{
    TipState out;
    out.x1 = sigma - b;
    out.x2 = -r * s.x2;
    (void)s.x1;
    return out;
}

struct ZPiezoDeriv {
    double db = 0.0;
    double dw = 0.0;
};

// Second-order unity-DC-gain z-piezo tracking the commanded base height.
inline ZPiezoDeriv zpiezo_rhs(const ZPiezoState& z, double b_cmd, const ZPiezoParams& zp)
{
    ZPiezoDeriv d;
    d.db = z.w;
    d.dw = zp.omega_zp * zp.omega_zp * (b_cmd - z.b) - (zp.omega_zp / zp.Q_zp) * z.w;
    return d;
}

}  // namespace afm
