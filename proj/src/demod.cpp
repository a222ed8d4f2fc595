#include "afm/demod.hpp"

#include <cmath>

namespace afm {

// Publish the open window's extreme at its right boundary and refresh dA_dt.
// A window that saw no samples holds the previous amplitude.
static void finalize_window(DemodState& d, double boundary_t)
{
    const double new_A = d.window_has_sample ? d.half_period_extreme : d.current_A;

    const int slot = d.hist_n % static_cast<int>(d.hist_t.size());
    d.hist_t[static_cast<std::size_t>(slot)] = boundary_t;
    d.hist_A[static_cast<std::size_t>(slot)] = new_A;
    ++d.hist_n;

    const int n_diffs = std::min(4, d.hist_n - 1);
    if (n_diffs > 0) {
        double sum = 0.0;
        for (int i = 0; i < n_diffs; ++i) {
            const int a = (d.hist_n - 1 - i) % static_cast<int>(d.hist_t.size());
            const int b = (d.hist_n - 2 - i) % static_cast<int>(d.hist_t.size());
            const double dt = d.hist_t[static_cast<std::size_t>(a)] -
                              d.hist_t[static_cast<std::size_t>(b)];
            sum += (d.hist_A[static_cast<std::size_t>(a)] -
                    d.hist_A[static_cast<std::size_t>(b)]) /
                   dt;
        }
        d.dA_dt = sum / n_diffs;
    }

    d.current_A = new_A;
    d.last_update_t = boundary_t;
    d.half_period_extreme = 0.0;
    d.window_has_sample = false;
}

void ingest(DemodState& d, double t, double x1, double omega_d)
{
    if (d.has_sample && t < d.last_t)
        throw OutOfOrderSample("demod: sample time went backwards");

    const double half_period = M_PI / omega_d;
    // Window k covers [(k - 1/2)·Th, (k + 1/2)·Th).
    const long long idx = static_cast<long long>(std::floor(t / half_period + 0.5));

    if (!d.has_sample) {
        d.window_idx = idx;
        d.has_sample = true;
    }
    while (idx > d.window_idx) {
        finalize_window(d, (static_cast<double>(d.window_idx) + 0.5) * half_period);
        ++d.window_idx;
    }

    const double mag = std::abs(x1);
    if (!d.window_has_sample || mag > d.half_period_extreme)
        d.half_period_extreme = mag;
    d.window_has_sample = true;
    d.last_t = t;
}

double GaussStream::next()
{
    if (has_spare) {
        has_spare = false;
        return spare;
    }
    double u, v, s;
    do {
        u = 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
        v = 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare = v * f;
    has_spare = true;
    return u * f;
}

double add_noise(double x1, const NoiseConfig& n, GaussStream& g)
{
    if (!n.enabled || n.std == 0.0)
        return x1;
    return x1 + n.std * g.next();
}

}  // namespace afm
