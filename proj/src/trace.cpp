#include "afm/trace.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace afm {

void write_trace_csv(const LineTrace& tr, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write trace: " + path);
    out << "t,i_x,sigma,sigma_hat,b,b_cmd,A,v_x,q\n";
    char buf[256];
    for (const TraceRow& r : tr.rows) {
        std::snprintf(buf, sizeof buf,
                      "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", r.t, r.i_x,
                      r.sigma, r.sigma_hat, r.b, r.b_cmd, r.A, r.v_x, r.q);
        out << buf;
    }
    if (!out)
        throw IoError("write failed: " + path);
}

void write_impacts_csv(const LineTrace& tr, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write impacts: " + path);
    out << "t,i_x,v_i\n";
    char buf[128];
    for (const ImpactEvent& e : tr.impacts) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", e.t, e.i_x, e.v_i);
        out << buf;
    }
    if (!out)
        throw IoError("write failed: " + path);
}

static std::vector<double> parse_csv_line(const std::string& line, const std::string& path)
{
    std::vector<double> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            out.push_back(std::stod(cell));
        } catch (const std::exception&) {
            throw ParseError("bad number '" + cell + "' in " + path);
        }
    }
    return out;
}

LineTrace read_trace_csv(const std::string& trace_path, const std::string& impacts_path)
{
    LineTrace tr;
    std::ifstream in(trace_path);
    if (!in)
        throw IoError("cannot open trace: " + trace_path);
    std::string line;
    if (!std::getline(in, line) || line != "t,i_x,sigma,sigma_hat,b,b_cmd,A,v_x,q")
        throw ParseError("unexpected trace header in " + trace_path);
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        const std::vector<double> v = parse_csv_line(line, trace_path);
        if (v.size() != 9)
            throw ParseError("trace row needs 9 columns in " + trace_path);
        tr.rows.push_back(
            {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], static_cast<int>(v[8])});
    }

    if (!impacts_path.empty()) {
        std::ifstream imp(impacts_path);
        if (!imp)
            throw IoError("cannot open impacts: " + impacts_path);
        if (!std::getline(imp, line) || line != "t,i_x,v_i")
            throw ParseError("unexpected impacts header in " + impacts_path);
        while (std::getline(imp, line)) {
            if (line.empty())
                continue;
            const std::vector<double> v = parse_csv_line(line, impacts_path);
            if (v.size() != 3)
                throw ParseError("impact row needs 3 columns in " + impacts_path);
            tr.impacts.push_back({v[0], v[1], v[2]});
        }
    }
    return tr;
}

}  // namespace afm
