#pragma once

#include <cmath>
#include <vector>

#include "afm/errors.hpp"
#include "afm/model.hpp"

// Controller stack: PID with shaped error, the four-mode hybrid scheme,
// scan-speed adaptation, and the line-predictive feedforward.

namespace afm {

struct PidConfig {
    double K_P = 0.0;  // [1]
    double K_I = 0.0;  // [1/s]
    double K_D = 0.0;  // [s]
    double A_r = 0.0;  // amplitude setpoint [m]
    double A_f = 0.0;  // free amplitude [m]
    // Optional symmetric integrator clamp; 0 disables (the default — the
    // hybrid scheme is the windup mitigation).
    double integrator_limit = 0.0;

    void validate() const
    {
        if (!(A_r > 0.0) || !(A_f > 0.0) || !(A_r < A_f))
            throw ConfigError("pid: need 0 < A_r < A_f");
        if (!std::isfinite(K_P) || !std::isfinite(K_I) || !std::isfinite(K_D))
            throw ConfigError("pid: gains must be finite");
        if (!(integrator_limit >= 0.0))
            throw ConfigError("pid: integrator_limit must be >= 0");
    }
};

// Integrate the error and return the commanded base height.
double pid_update(double& integrator, double e, double de_dt, const PidConfig& cfg, double dt);

// Error shaping: plain below the threshold amplitude A_t, slope K_s above it.
// Continuous at A = A_t.
double dynamic_pid_error(double A, const PidConfig& cfg, double A_t, double K_s);

// Modes: 1 Regular, 2 ProbeLoss, 3 Recovery, 4 Recoil.
struct HybridConfig {
    double K_s = 1.0;        // shaped-error slope in ProbeLoss
    double A_t_plus = 0.0;   // ProbeLoss entry threshold [m]
    double A_t_minus = 0.0;  // ProbeLoss exit threshold [m]
    double A_t_RL = 0.0;     // Recoil entry threshold [m]
    double alpha_t = 0.0;    // amplitude-rate threshold [m/s], negative
    double dQ_PL = 0.0;      // extra damping depth in Recovery
    double dQ_RL = 0.0;      // extra damping depth in Recoil
    double Q_prime = 0.0;    // controlled quality factor
    double K_tau = 5.0;      // timeout in units of tau_A
    bool guards_enabled = true;

    void validate(double A_r) const
    {
        if (!(A_t_minus < A_t_plus))
            throw ConfigError("hybrid: need A_t_minus < A_t_plus");
        if (!(A_t_plus > A_r))
            throw ConfigError("hybrid: need A_t_plus > A_r");
        if (!(A_t_RL < A_r))
            throw ConfigError("hybrid: need A_t_RL < A_r");
        if (!(dQ_PL >= 0.0) || !(dQ_RL >= 0.0))
            throw ConfigError("hybrid: damping depths must be >= 0");
        if (!(Q_prime > 0.0))
            throw ConfigError("hybrid: Q_prime must be positive");
        if (!(K_tau > 0.0))
            throw ConfigError("hybrid: K_tau must be positive");
    }
};

struct HybridState {
    int q = 1;         // mode
    bool rho = false;  // within-mode latch, meaningful in modes 3 and 4
    double t0 = 0.0;   // entry time of the current mode 3/4 episode [s]
};

// Evaluate the guard set once; at most one mode change per call.
void hybrid_transition(HybridState& h, double A, double dA_dt, double t, const HybridConfig& cfg,
                       double tau_A);

struct HybridOutputs {
    double K_s_q = 1.0;  // shaped-error slope for the current mode
    double D_q = 0.0;    // drive amplitude [m/s^2]
    double K_Q_q = 0.0;  // velocity feedback gain [1/s]
};

HybridOutputs hybrid_outputs(int q, double A, const HybridConfig& cfg,
                             const CantileverParams& c, double A_r, double A_f, double omega_d);

struct SpeedConfig {
    double tau_v = 0.0;  // adaptation time constant [s]
    double V_x0 = 0.0;   // nominal speed [m/s]
    double V_xm = 0.0;   // lower clamp [m/s]
    double V_xM = 0.0;   // upper clamp [m/s]
    // Critical/limit/regular bounds on db/dt, ascending (positive) and
    // descending (negative) sides [m/s].
    double b_Ma = 0.0;
    double b_Md = 0.0;
    double b_La = 0.0;
    double b_Ld = 0.0;
    double b_ra = 0.0;
    double b_rd = 0.0;

    void validate() const
    {
        if (!(tau_v > 0.0))
            throw ConfigError("speed: tau_v must be positive");
        if (!(V_xm <= V_x0 && V_x0 <= V_xM) || !(V_xm > 0.0))
            throw ConfigError("speed: need 0 < V_xm <= V_x0 <= V_xM");
        if (!(b_Md < b_Ld && b_Ld < b_rd && b_rd < 0.0))
            throw ConfigError("speed: need b_Md < b_Ld < b_rd < 0");
        if (!(0.0 < b_ra && b_ra < b_La && b_La < b_Ma))
            throw ConfigError("speed: need 0 < b_ra < b_La < b_Ma");
    }
};

// One sample-and-hold update of the scan speed: first-order relaxation toward
// the piecewise target, then clamp to [V_xm, V_xM].
double speed_update(double v_x, double db_dt, const SpeedConfig& cfg, double dt);

struct PredictiveConfig {
    int M_PC = 0;          // number of remembered lines
    double E_sigma = 0.0;  // line-difference threshold [m^2]
    double N_W = 0.0;      // filter half-width [m]

    void validate(double I_x) const
    {
        if (M_PC < 1)
            throw ConfigError("predictive: M_PC must be >= 1");
        if (!(E_sigma > 0.0))
            throw ConfigError("predictive: E_sigma must be positive");
        if (!(N_W > 0.0) || !(N_W < 0.5 * I_x))
            throw ConfigError("predictive: need 0 < N_W < I_x/2");
    }
};

// Moving average of half-width N_W with constant edge extension; y is sampled
// on a uniform grid of spacing dx.
std::vector<double> window_filter(const std::vector<double>& y, double dx, double N_W);

// Gains for the predictive feedforward of line k. prev[j-1] holds the filtered
// profile of line k-j; prev.size() == M_PC + 1 gives the full gain set,
// M_PC lines give the partial set with the oldest-difference gain zero.
std::vector<double> adaptive_gains(const std::vector<std::vector<double>>& prev, int M_PC,
                                   double E_sigma, double dx);

// Additive height at i_x: gain-weighted sum of the stored profiles, linearly
// interpolated on their grid.
double predictive_feedforward(const std::vector<std::vector<double>>& prev,
                              const std::vector<double>& gains, double dx, double i_x);

}  // namespace afm
