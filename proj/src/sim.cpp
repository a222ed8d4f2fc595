#include "afm/sim.hpp"

#include <algorithm>
#include <cmath>

namespace afm {

namespace {

// y = [x1, x2, b, w, i_x]
struct CoupledRhs {
    const LineSim* ls;

    void operator()(double t, const std::array<double, 5>& y, std::array<double, 5>& dy) const
    {
        const CantileverParams& c = ls->cant;
        const ControlHold& hold = ls->hold;
        double F = 0.0;
        if (ls->interaction_enabled)
            F = interaction_accel(y[2] + y[0] - ls->sigma_at(y[4]), ls->inter, c.m);
        const double u = ls->hold.drive.D * std::sin(hold.drive.omega_d * t) -
                         hold.drive.K_Q * y[1];
        dy[0] = y[1];
        dy[1] = -c.omega_n * c.omega_n * y[0] - (c.omega_n / c.Q) * y[1] + u + F;
        dy[2] = y[3];
        dy[3] = ls->zpiezo.omega_zp * ls->zpiezo.omega_zp * (hold.b_cmd - y[2]) -
                (ls->zpiezo.omega_zp / ls->zpiezo.Q_zp) * y[3];
        dy[4] = hold.v_x;
    }
};

}  // namespace

double LineSim::sigma_at(double i_x) const
{
    double x = i_x;
    if (surface->kind == SampleSurface::Kind::heightmap)
        x = std::clamp(x, 0.0, surface->I_x);
    return height_at(*surface, x, i_y);
}

void LineSim::advance_to(double t_target)
{
    const CoupledRhs rhs{this};
    const double omega_d = hold.drive.omega_d;
    if (h_next <= 0.0)
        h_next = solver.max_step;

    std::array<double, 5> y{s.tip.x1, s.tip.x2, s.zp.b, s.zp.w, s.i_x};

    while (s.t < t_target) {
        const double remaining = t_target - s.t;
        double h = std::min({h_next, solver.max_step, remaining});

        HermiteSeg<5> seg;
        double err;
        for (;;) {
            err = rk45_step(rhs, s.t, y, h, solver.rel_tol, solver.abs_tol, seg.y1, seg.f0,
                            seg.f1);
            if (err <= 1.0)
                break;
            if (h <= solver.min_step * (1.0 + 1e-12))
                throw StepUnderflow("solver: error control demands a step below min_step");
            h = std::max(h * std::max(0.2, 0.9 * std::pow(err, -0.2)), solver.min_step);
        }
        seg.t0 = s.t;
        seg.h = h;
        seg.y0 = y;
        const double grow = err > 0.0 ? std::min(5.0, std::max(0.2, 0.9 * std::pow(err, -0.2)))
                                      : 5.0;
        h_next = std::min(h * grow, solver.max_step);

        double t_end = h == remaining ? t_target : s.t + h;
        double theta_end = 1.0;
        bool impacted = false;

        if (s.t >= refractory_until) {
            const double g0 = seg.y0[2] + seg.y0[0] - sigma_at(seg.y0[4]);
            const double g1 = seg.y1[2] + seg.y1[0] - sigma_at(seg.y1[4]);
            if (g0 > 0.0 && g1 <= 0.0) {
                auto gap = [&](double th) {
                    return seg.eval(2, th) + seg.eval(0, th) - sigma_at(seg.eval(4, th));
                };
                theta_end = bisect_crossing(gap, 0.0, 1.0, solver.penetration_tol,
                                            1e-15 / h);
                t_end = s.t + theta_end * h;
                impacted = true;
            }
        }

        // Demodulator feed: interior extrema of x1 (in time order), then the
        // step endpoint.
        std::array<double, 2> th{};
        const int n_ext = extremum_thetas(seg, 0, th);
        for (int i = 0; i < n_ext; ++i) {
            if (th[static_cast<std::size_t>(i)] < theta_end)
                ingest(demod, s.t + th[static_cast<std::size_t>(i)] * h,
                       add_noise(seg.eval(0, th[static_cast<std::size_t>(i)]), noise, gauss),
                       omega_d);
        }

        if (impacted) {
            const double x1_pre = seg.eval(0, theta_end);
            const double x2_pre = seg.eval(1, theta_end);
            ingest(demod, t_end, add_noise(x1_pre, noise, gauss), omega_d);

            s.t = t_end;
            s.zp.b = seg.eval(2, theta_end);
            s.zp.w = seg.eval(3, theta_end);
            s.i_x = seg.eval(4, theta_end);
            const double sigma = sigma_at(s.i_x);
            impacts.push_back({t_end, s.i_x, std::abs(x2_pre)});
            const TipState reset = impact_reset({x1_pre, x2_pre}, cant.r, sigma, s.zp.b);
            s.tip = reset;
            refractory_until = t_end + solver.refractory;
        } else {
            ingest(demod, t_end, add_noise(seg.y1[0], noise, gauss), omega_d);
            s.t = t_end;
            s.tip.x1 = seg.y1[0];
            s.tip.x2 = seg.y1[1];
            s.zp.b = seg.y1[2];
            s.zp.w = seg.y1[3];
            s.i_x = seg.y1[4];
        }

        if (!std::isfinite(s.tip.x1) || std::abs(s.tip.x1) > 100.0 * A_f)
            throw SimDiverged("tip deflection left the physical range");

        y = {s.tip.x1, s.tip.x2, s.zp.b, s.zp.w, s.i_x};
    }
}

}  // namespace afm
