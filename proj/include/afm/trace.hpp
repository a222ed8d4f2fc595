#pragma once

#include <string>
#include <vector>

#include "afm/sim.hpp"

namespace afm {

struct TraceRow {
    double t = 0.0;
    double i_x = 0.0;
    double sigma = 0.0;      // ground truth under the tip [m]
    double sigma_hat = 0.0;  // estimated height b - A [m]
    double b = 0.0;
    double b_cmd = 0.0;
    double A = 0.0;
    double v_x = 0.0;
    int q = 1;
};

struct LineTrace {
    int line = 0;  // 1-based raster index
    double i_y = 0.0;
    std::vector<TraceRow> rows;
    std::vector<ImpactEvent> impacts;  // scan phase only
};

void write_trace_csv(const LineTrace& tr, const std::string& path);
void write_impacts_csv(const LineTrace& tr, const std::string& path);

// impacts_path may be empty (no impact file, e.g. when reading foreign data).
LineTrace read_trace_csv(const std::string& trace_path, const std::string& impacts_path);

}  // namespace afm
