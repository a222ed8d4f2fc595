#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "afm/demod.hpp"

using namespace afm;

namespace {

const double kOmega = 1790707.8125461822;
const double kTh = M_PI / kOmega;

// Feed one exact peak sample per window: window k is centered on t = k*Th.
void feed_peak(DemodState& d, long long k, double amp)
{
    ingest(d, static_cast<double>(k) * kTh, (k % 2 ? -amp : amp), kOmega);
}

}  // namespace

TEST_CASE("cosine input: amplitude captured at the response peaks")
{
    DemodState d;
    const double A = 50e-9;
    // Dense endpoint-style sampling plus the exact extremum instants, as the
    // integrator provides.
    const int per_window = 25;
    std::vector<double> times;
    for (long long k = 0; k <= 40; ++k) {
        for (int i = 0; i < per_window; ++i) {
            const double t = (k - 0.5) * kTh + (i + 0.25) * kTh / per_window;
            if (t >= 0.0)
                times.push_back(t);
        }
        if (k < 40)
            times.push_back(k * kTh);
    }
    std::sort(times.begin(), times.end());
    for (double t : times)
        ingest(d, t, A * std::cos(kOmega * t), kOmega);
    CHECK(d.current_A == doctest::Approx(A).epsilon(1e-9));
    // updates are spaced exactly half a period
    CHECK(d.last_update_t == doctest::Approx(39.5 * kTh).epsilon(1e-12));
}

TEST_CASE("windows publish the exact extreme fed to them")
{
    DemodState d;
    feed_peak(d, 0, 47e-9);
    CHECK(d.current_A == 0.0);  // nothing published until a boundary passes
    feed_peak(d, 1, 48e-9);
    CHECK(d.current_A == 47e-9);  // window 0 finalized bitwise
    CHECK(d.dA_dt == 0.0);        // single update, no differences yet
    feed_peak(d, 2, 49e-9);
    CHECK(d.current_A == 48e-9);
    // off-peak smaller samples never displace the extreme
    ingest(d, 2.1 * kTh, 1e-12, kOmega);
    feed_peak(d, 3, 50e-9);
    CHECK(d.current_A == 49e-9);
}

TEST_CASE("amplitude rate tracks a linear ramp")
{
    DemodState d;
    const double A0 = 40e-9, slope = 2e-5;
    for (long long k = 0; k <= 12; ++k)
        feed_peak(d, k, A0 + slope * (static_cast<double>(k) * kTh));
    CHECK(d.dA_dt == doctest::Approx(slope).epsilon(1e-9));

    // reversing the ramp flips the sign
    DemodState d2;
    for (long long k = 0; k <= 12; ++k)
        feed_peak(d2, k, A0 - slope * (static_cast<double>(k) * kTh));
    CHECK(d2.dA_dt == doctest::Approx(-slope).epsilon(1e-9));
}

TEST_CASE("empty windows hold the previous amplitude")
{
    DemodState d;
    feed_peak(d, 0, 45e-9);
    feed_peak(d, 1, 46e-9);
    CHECK(d.current_A == 45e-9);
    // jump over three silent windows
    feed_peak(d, 5, 10e-9);
    CHECK(d.current_A == 46e-9);  // held through the gap
    feed_peak(d, 6, 10e-9);
    CHECK(d.current_A == 10e-9);
}

TEST_CASE("rate estimate decays to zero on a constant amplitude")
{
    DemodState d;
    feed_peak(d, 0, 45e-9);
    feed_peak(d, 1, 50e-9);
    for (long long k = 2; k <= 10; ++k)
        feed_peak(d, k, 50e-9);
    CHECK(d.dA_dt == 0.0);  // the last 4 differences are all zero
}

TEST_CASE("out-of-order samples are rejected")
{
    DemodState d;
    ingest(d, 1e-6, 1e-9, kOmega);
    CHECK_THROWS_AS(ingest(d, 0.5e-6, 1e-9, kOmega), OutOfOrderSample);
    // equal timestamps are fine (step endpoint doubling as next step start)
    CHECK_NOTHROW(ingest(d, 1e-6, 2e-9, kOmega));
}

TEST_CASE("gaussian stream is reproducible and well-behaved")
{
    GaussStream a(1234), b(1234), c(99);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 1000; ++i) {
        const double va = a.next();
        if (va != b.next())
            all_equal = false;
        if (va != c.next())
            any_diff = true;
    }
    CHECK(all_equal);
    CHECK(any_diff);

    GaussStream g(5);
    double sum = 0.0, sum_sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = g.next();
        sum += v;
        sum_sq += v * v;
    }
    const double mean = sum / n;
    const double var = sum_sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("noise injection")
{
    NoiseConfig off;
    off.enabled = false;
    off.std = 5e-10;
    GaussStream g(42);
    CHECK(add_noise(1.25e-9, off, g) == 1.25e-9);  // bitwise pass-through

    NoiseConfig zero;
    zero.enabled = true;
    zero.std = 0.0;
    CHECK(add_noise(1.25e-9, zero, g) == 1.25e-9);

    NoiseConfig on;
    on.enabled = true;
    on.std = 5e-10;
    GaussStream g1(7), g2(7);
    const double noisy = add_noise(1.25e-9, on, g1);
    CHECK(noisy == 1.25e-9 + on.std * g2.next());

    NoiseConfig bad;
    bad.enabled = true;
    bad.std = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
