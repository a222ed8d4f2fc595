#pragma once

#include <array>
#include <cstdint>
#include <random>

#include "afm/errors.hpp"

// Peak-hold amplitude demodulation over half drive periods, backward-difference
// amplitude-rate estimation, and measurement-noise injection.

namespace afm {

// Demodulator with the minimum half-period update latency: tracks max |x1|
// over each half drive period and publishes it at the window boundary.
// Windows are centered on the response extrema at resonance (boundaries at
// odd quarter periods of the drive), so a located peak sample never straddles
// a boundary.
struct DemodState {
    double current_A = 0.0;          // latest published amplitude [m]
    double last_update_t = 0.0;      // boundary time of that update [s]
    double half_period_extreme = 0.0;  // running max |x1| in the open window [m]
    double dA_dt = 0.0;              // smoothed amplitude rate [m/s]

    // Ring of the last few (t, A) updates; dA_dt is the mean of the backward
    // differences between consecutive entries (up to 4 of them).
    std::array<double, 5> hist_t{};
    std::array<double, 5> hist_A{};
    int hist_n = 0;  // total boundary updates so far

    long long window_idx = 0;  // index of the accumulating window
    double last_t = 0.0;       // last ingested sample time
    bool has_sample = false;
    bool window_has_sample = false;
};

// Feed one position sample. Samples must arrive in time order.
void ingest(DemodState& d, double t, double x1, double omega_d);

struct NoiseConfig {
    bool enabled = false;
    double std = 0.0;  // [m]
    std::uint64_t seed = 0;

    void validate() const
    {
        if (!(std >= 0.0))
            throw ConfigError("noise: std must be >= 0");
    }
};

// Standard-normal stream with a fixed algorithm (Marsaglia polar over
// mt19937_64) so output is reproducible across standard libraries.
struct GaussStream {
    std::mt19937_64 rng;
    double spare = 0.0;
    bool has_spare = false;

    explicit GaussStream(std::uint64_t seed) : rng(seed) {}
    double next();
};

double add_noise(double x1, const NoiseConfig& n, GaussStream& g);

}  // namespace afm
