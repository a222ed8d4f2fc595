#pragma once

#include <string>
#include <vector>

#include "afm/errors.hpp"

// Ground-truth sample surfaces: closed-form generators and file-loaded
// height maps, plus the raster-scan geometry.

namespace afm {

struct SampleSurface {
    enum class Kind { grid_generator, sinusoid_generator, heightmap };

    Kind kind = Kind::grid_generator;

    // grid_generator
    double step_height = 0.0;  // [m]
    double period = 0.0;       // [m]

    // sinusoid_generator
    double A_sin = 0.0;  // [m]
    double P_sin = 0.0;  // [m]

    // heightmap: heights[row][col], row = i_y index, col = i_x index
    std::vector<std::vector<double>> heights;
    double dx = 0.0;     // [m]
    double dy = 0.0;     // [m]
    double scale = 1.0;  // multiplier applied to stored heights on load

    // Heightmap extents; generators are unbounded so these stay 0.
    double I_x = 0.0;  // = (n_x - 1) * dx
    double I_y = 0.0;  // = (n_y - 1) * dy

    static SampleSurface calibration_grid(double step_height, double period);
    static SampleSurface sinusoid(double A_sin, double P_sin);
};

struct RasterPlan {
    std::vector<double> line_ys;  // strictly increasing [m]
    double line_length = 0.0;     // I_x [m]

    void validate() const;
};

// Square-wave calibration grid: high over the first half of each period, low
// over the second. sigma in {0, step_height}.
double ideal_calibration_grid(double step_height, double period, double i_x);

// Sine plus a small triangle wave (amplitude and period a tenth of the sine's).
// Triangle crosses zero rising at the origin.
double quasi_sinusoid(double A_sin, double P_sin, double i_x);

SampleSurface load_heightmap(const std::string& path);
void write_heightmap(const SampleSurface& s, const std::string& path);

// Surface height under the tip. Generators are evaluated in closed form;
// height maps are snapped to the nearest row in i_y and linearly interpolated
// along i_x.
double height_at(const SampleSurface& s, double i_x, double i_y);

}  // namespace afm
