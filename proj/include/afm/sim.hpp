#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "afm/demod.hpp"
#include "afm/errors.hpp"
#include "afm/model.hpp"
#include "afm/sample.hpp"

// Adaptive Dormand-Prince integration of the coupled cantilever + z-piezo
// system with impact-event location and the reset map.

namespace afm {

struct SolverConfig {
    double max_step = 1e-7;          // [s]
    double min_step = 1e-13;         // [s]
    double rel_tol = 1e-4;
    double abs_tol = 1e-12;          // per component, [m] / [m/s]
    double penetration_tol = 1e-13;  // gap tolerance at located impacts [m]
    double refractory = 1e-9;        // post-impact event blackout [s]

    void validate() const
    {
        if (!(min_step > 0.0) || !(min_step < max_step))
            throw ConfigError("solver: need 0 < min_step < max_step");
        if (!(rel_tol > 0.0) || !(abs_tol > 0.0) || !(penetration_tol > 0.0))
            throw ConfigError("solver: tolerances must be positive");
        if (!(refractory >= 0.0))
            throw ConfigError("solver: refractory must be >= 0");
    }
};

// One embedded Dormand-Prince 5(4) step. Fills y_new, f0 = f(t, y) and
// f1 = f(t + h, y_new) (the FSAL stage) and returns the scaled error norm;
// the step is acceptable when the norm is <= 1.
template <std::size_t N, class F>
double rk45_step(F&& f, double t, const std::array<double, N>& y, double h, double rel_tol,
                 double abs_tol, std::array<double, N>& y_new, std::array<double, N>& f0,
                 std::array<double, N>& f1)
{
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    // Difference between the 5th- and 4th-order solutions.
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                            e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

    std::array<double, N> k2, k3, k4, k5, k6, tmp;
    f(t, y, f0);
    for (std::size_t i = 0; i < N; ++i)
        tmp[i] = y[i] + h * a21 * f0[i];
    f(t + c2 * h, tmp, k2);
    for (std::size_t i = 0; i < N; ++i)
        tmp[i] = y[i] + h * (a31 * f0[i] + a32 * k2[i]);
    f(t + c3 * h, tmp, k3);
    for (std::size_t i = 0; i < N; ++i)
        tmp[i] = y[i] + h * (a41 * f0[i] + a42 * k2[i] + a43 * k3[i]);
    f(t + c4 * h, tmp, k4);
    for (std::size_t i = 0; i < N; ++i)
        tmp[i] = y[i] + h * (a51 * f0[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    f(t + c5 * h, tmp, k5);
    for (std::size_t i = 0; i < N; ++i)
        tmp[i] = y[i] + h * (a61 * f0[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
    f(t + h, tmp, k6);
    for (std::size_t i = 0; i < N; ++i)
        y_new[i] = y[i] + h * (b1 * f0[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
    f(t + h, y_new, f1);

    double err_sq = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double err = h * (e1 * f0[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] +
                                e7 * f1[i]);
        const double sc = abs_tol + rel_tol * std::max(std::abs(y[i]), std::abs(y_new[i]));
        err_sq += (err / sc) * (err / sc);
    }
    return std::sqrt(err_sq / static_cast<double>(N));
}

// Cubic Hermite dense output over one accepted step, theta in [0, 1].
template <std::size_t N>
struct HermiteSeg {
    double t0 = 0.0;
    double h = 0.0;
    std::array<double, N> y0{}, y1{}, f0{}, f1{};

    double eval(std::size_t comp, double theta) const
    {
        const double th2 = theta * theta, th3 = th2 * theta;
        return (2 * th3 - 3 * th2 + 1) * y0[comp] + (th3 - 2 * th2 + theta) * h * f0[comp] +
               (-2 * th3 + 3 * th2) * y1[comp] + (th3 - th2) * h * f1[comp];
    }

    double deriv(std::size_t comp, double theta) const
    {
        const double th2 = theta * theta;
        return (6 * th2 - 6 * theta) * (y0[comp] - y1[comp]) / h +
               (3 * th2 - 4 * theta + 1) * f0[comp] + (3 * th2 - 2 * theta) * f1[comp];
    }
};

// Interior zeros of the interpolated derivative of one component (the dense
// derivative is quadratic in theta). Returns the count, roots ascending.
template <std::size_t N>
int extremum_thetas(const HermiteSeg<N>& seg, std::size_t comp, std::array<double, 2>& out)
{
    const double y0 = seg.y0[comp], y1 = seg.y1[comp];
    const double f0 = seg.f0[comp], f1 = seg.f1[comp];
    const double qa = 6.0 * (y0 - y1) / seg.h + 3.0 * (f0 + f1);
    const double qb = 6.0 * (y1 - y0) / seg.h - 4.0 * f0 - 2.0 * f1;
    const double qc = f0;

    const double lo = 1e-9, hi = 1.0 - 1e-9;
    int n = 0;
    auto push = [&](double th) {
        if (th > lo && th < hi)
            out[static_cast<std::size_t>(n++)] = th;
    };
    if (qa == 0.0) {
        if (qb != 0.0)
            push(-qc / qb);
    } else {
        const double disc = qb * qb - 4.0 * qa * qc;
        if (disc >= 0.0) {
            const double s = std::sqrt(disc);
            const double q = -0.5 * (qb + (qb >= 0.0 ? s : -s));
            if (q != 0.0)
                push(qc / q);
            push(q / qa);
        }
    }
    if (n == 2 && out[0] > out[1])
        std::swap(out[0], out[1]);
    return n;
}

// Bisection on [lo, hi] with g(lo) > 0 and g(hi) <= 0. Terminates on
// |g| < g_tol or bracket width < w_tol, returning the right end in the
// latter case so a discontinuous crossing resolves past the jump.
template <class G>
double bisect_crossing(G&& g, double lo, double hi, double g_tol, double w_tol)
{
    for (int it = 0; it < 100; ++it) {
        if (hi - lo < w_tol)
            return hi;
        const double mid = 0.5 * (lo + hi);
        const double gm = g(mid);
        if (std::abs(gm) < g_tol)
            return mid;
        if (gm > 0.0)
            lo = mid;
        else
            hi = mid;
    }
    throw RootNotConverged("bisect_crossing: no convergence in 100 iterations");
}

// Sample-and-hold controller outputs applied between updates.
struct ControlHold {
    DitherDrive drive;
    double b_cmd = 0.0;  // [m]
    double v_x = 0.0;    // [m/s]
};

struct SimState {
    double t = 0.0;
    TipState tip;
    ZPiezoState zp;
    double i_x = 0.0;
};

struct ImpactEvent {
    double t = 0.0;    // [s]
    double i_x = 0.0;  // [m]
    double v_i = 0.0;  // impact speed |x2| just before the reset [m/s]
};

// One scan line's integrator: state y = [x1, x2, b, w, i_x] advanced between
// controller boundaries with impact events, demodulator feeding, and noise.
struct LineSim {
    CantileverParams cant;
    InteractionParams inter;
    bool interaction_enabled = true;
    ZPiezoParams zpiezo;
    SolverConfig solver;
    const SampleSurface* surface = nullptr;
    double i_y = 0.0;

    NoiseConfig noise;
    GaussStream gauss{0};
    DemodState demod;

    SimState s;
    ControlHold hold;
    double A_f = 0.0;  // divergence scale [m]

    std::vector<ImpactEvent> impacts;

    double h_next = 0.0;
    double refractory_until = -1.0;

    double sigma_at(double i_x) const;

    // Integrate up to t_target (exactly), locating impacts and feeding the
    // demodulator located extrema plus every accepted step endpoint.
    void advance_to(double t_target);
};

}  // namespace afm
