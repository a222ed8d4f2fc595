#include "afm/sample.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace afm {

SampleSurface SampleSurface::calibration_grid(double step_height, double period)
{
    if (!(period > 0.0))
        throw ConfigError("calibration grid: period must be positive");
    SampleSurface s;
    s.kind = Kind::grid_generator;
    s.step_height = step_height;
    s.period = period;
    return s;
}

SampleSurface SampleSurface::sinusoid(double A_sin, double P_sin)
{
    if (!(P_sin > 0.0))
        throw ConfigError("quasi-sinusoid: period must be positive");
    SampleSurface s;
    s.kind = Kind::sinusoid_generator;
    s.A_sin = A_sin;
    s.P_sin = P_sin;
    return s;
}

void RasterPlan::validate() const
{
    if (line_ys.empty())
        throw ConfigError("raster plan: no scan lines");
    for (std::size_t i = 1; i < line_ys.size(); ++i)
        if (!(line_ys[i] > line_ys[i - 1]))
            throw ConfigError("raster plan: line_ys must be strictly increasing");
    if (!(line_length > 0.0))
        throw ConfigError("raster plan: line_length must be positive");
}

double ideal_calibration_grid(double step_height, double period, double i_x)
{
    double phase = std::fmod(i_x, period);
    if (phase < 0.0)
        phase += period;
    return phase < 0.5 * period ? step_height : 0.0;
}

// Triangle wave, amplitude amp, unit-period phase ph in [0, 1), rising through
// zero at ph = 0.
static double triangle_unit(double amp, double ph)
{
    if (ph < 0.25)
        return 4.0 * amp * ph;
    if (ph < 0.75)
        return amp * (2.0 - 4.0 * ph);
    return 4.0 * amp * (ph - 1.0);
}

double quasi_sinusoid(double A_sin, double P_sin, double i_x)
{
    const double two_pi = 2.0 * M_PI;
    const double tri_period = 0.1 * P_sin;
    double ph = std::fmod(i_x / tri_period, 1.0);
    if (ph < 0.0)
        ph += 1.0;
    return A_sin * std::sin(two_pi * i_x / P_sin) + triangle_unit(0.1 * A_sin, ph);
}

SampleSurface load_heightmap(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open height map: " + path);

    std::string header;
    if (!std::getline(in, header))
        throw ParseError("height map is empty: " + path);

    SampleSurface s;
    s.kind = SampleSurface::Kind::heightmap;
    if (std::sscanf(header.c_str(), "# dx=%lf dy=%lf scale=%lf", &s.dx, &s.dy, &s.scale) != 3)
        throw ParseError("height map header must be '# dx=<m> dy=<m> scale=<factor>': " + path);
    if (!(s.dx > 0.0) || !(s.dy > 0.0))
        throw ParseError("height map: dx and dy must be positive: " + path);
    if (!std::isfinite(s.scale))
        throw ParseError("height map: scale must be finite: " + path);

    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            std::size_t pos = 0;
            double v;
            try {
                v = std::stod(cell, &pos);
            } catch (const std::exception&) {
                throw ParseError("height map: bad number '" + cell + "' in " + path);
            }
            while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos])))
                ++pos;
            if (pos != cell.size())
                throw ParseError("height map: bad number '" + cell + "' in " + path);
            v *= s.scale;
            if (!std::isfinite(v))
                throw NonFiniteHeight("height map: non-finite height in " + path);
            row.push_back(v);
        }
        if (!s.heights.empty() && row.size() != s.heights.front().size())
            throw NonRectangular("height map: ragged rows in " + path);
        s.heights.push_back(std::move(row));
    }
    if (s.heights.empty() || s.heights.front().size() < 2)
        throw ParseError("height map needs at least one row of two columns: " + path);

    s.I_x = (static_cast<double>(s.heights.front().size()) - 1.0) * s.dx;
    s.I_y = (static_cast<double>(s.heights.size()) - 1.0) * s.dy;
    s.scale = 1.0;  // heights are in meters from here on
    return s;
}

void write_heightmap(const SampleSurface& s, const std::string& path)
{
    if (s.kind != SampleSurface::Kind::heightmap)
        throw ConfigError("write_heightmap: surface is not a height map");
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write height map: " + path);
    char buf[96];
    std::snprintf(buf, sizeof buf, "# dx=%.17g dy=%.17g scale=1\n", s.dx, s.dy);
    out << buf;
    for (const auto& row : s.heights) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", row[j]);
            out << (j ? "," : "") << buf;
        }
        out << '\n';
    }
    if (!out)
        throw IoError("write failed: " + path);
}

double height_at(const SampleSurface& s, double i_x, double i_y)
{
    switch (s.kind) {
    case SampleSurface::Kind::grid_generator:
        return ideal_calibration_grid(s.step_height, s.period, i_x);
    case SampleSurface::Kind::sinusoid_generator:
        return quasi_sinusoid(s.A_sin, s.P_sin, i_x);
    case SampleSurface::Kind::heightmap:
        break;
    }

    const double tol_x = 1e-9 * s.dx;
    if (i_x < -tol_x || i_x > s.I_x + tol_x)
        throw OutOfBounds("height_at: i_x outside [0, I_x]");
    const double tol_y = 0.5 * s.dy;  // nearest-row snap covers half a pitch past the edges
    if (i_y < -tol_y || i_y > s.I_y + tol_y)
        throw OutOfBounds("height_at: i_y outside sampled rows");

    const std::size_t n_y = s.heights.size();
    const std::size_t n_x = s.heights.front().size();
    long row = std::lround(i_y / s.dy);
    if (row < 0)
        row = 0;
    if (row >= static_cast<long>(n_y))
        row = static_cast<long>(n_y) - 1;

    double pos = i_x / s.dx;
    if (pos < 0.0)
        pos = 0.0;
    double j_f = std::floor(pos);
    double frac = pos - j_f;
    // Snap queries that hit a node up to rounding so stored heights come back
    // exactly.
    if (frac > 1.0 - 1e-9) {
        j_f += 1.0;
        frac = 0.0;
    } else if (frac < 1e-9) {
        frac = 0.0;
    }
    std::size_t j = static_cast<std::size_t>(j_f);
    if (j >= n_x - 1) {
        j = n_x - 2;
        frac = pos - static_cast<double>(j);
        if (frac > 1.0)
            frac = 1.0;
    }
    const auto& r = s.heights[static_cast<std::size_t>(row)];
    return r[j] + frac * (r[j + 1] - r[j]);
}

}  // namespace afm
