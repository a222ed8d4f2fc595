#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "afm/harness.hpp"

namespace {

// "a..b" or a single line number, 1-based inclusive.
void parse_line_range(const std::string& text, int& from, int& to)
{
    const std::size_t pos = text.find("..");
    try {
        if (pos == std::string::npos) {
            from = to = std::stoi(text);
        } else {
            from = std::stoi(text.substr(0, pos));
            to = std::stoi(text.substr(pos + 2));
        }
    } catch (const std::exception&) {
        throw afm::ConfigError("bad --lines value (want a..b): " + text);
    }
    if (from < 1 || to < from)
        throw afm::ConfigError("bad --lines range: " + text);
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            const std::string& lines, long long seed, bool seed_set,
            std::vector<std::string> overrides)
{
    if (!lines.empty()) {
        int from = 1, to = 1;
        parse_line_range(lines, from, to);
        overrides.push_back("lines.from=" + std::to_string(from));
        overrides.push_back("lines.to=" + std::to_string(to));
    }
    if (seed_set)
        overrides.push_back("seed=" + std::to_string(seed));

    const afm::ResolvedConfig rc = afm::resolve_config(config_path, overrides);
    const afm::ExperimentResult res = afm::run_experiment(rc.cfg);
    afm::write_outputs(res, rc.echo_json, out_dir);

    std::printf("wrote %zu line(s) to %s\n", res.traces.size(), out_dir.c_str());
    std::printf("aggregate: rms_e_sigma=%.6g m, n_impacts=%d, T_s=%.6g s\n",
                res.aggregate.rms_e_sigma, res.aggregate.n_impacts, res.aggregate.T_s);
    return 0;
}

int cmd_sample_gen(const std::string& kind, double step, double period, double amp,
                   double sin_period, int nx, int ny, double dx, double dy,
                   const std::string& out_path)
{
    if (nx < 2 || ny < 1)
        throw afm::ConfigError("sample gen: need nx >= 2 and ny >= 1");
    if (!(dx > 0.0) || !(dy > 0.0))
        throw afm::ConfigError("sample gen: need dx > 0 and dy > 0");

    const afm::SampleSurface gen = kind == "grid"
                                       ? afm::SampleSurface::calibration_grid(step, period)
                                       : afm::SampleSurface::sinusoid(amp, sin_period);

    afm::SampleSurface s;
    s.kind = afm::SampleSurface::Kind::heightmap;
    s.dx = dx;
    s.dy = dy;
    s.scale = 1.0;
    s.I_x = (nx - 1) * dx;
    s.I_y = (ny - 1) * dy;
    s.heights.assign(static_cast<std::size_t>(ny),
                     std::vector<double>(static_cast<std::size_t>(nx)));
    for (int r = 0; r < ny; ++r)
        for (int c = 0; c < nx; ++c)
            s.heights[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
                afm::height_at(gen, c * dx, r * dy);

    afm::write_heightmap(s, out_path);
    std::printf("wrote %dx%d height map to %s\n", ny, nx, out_path.c_str());
    return 0;
}

int cmd_metrics(const std::string& dir)
{
    namespace fs = std::filesystem;
    const fs::path root(dir);
    if (!fs::is_directory(root))
        throw afm::ConfigError("metrics: not a directory: " + dir);
    const fs::path config = root / "config.json";
    if (!fs::exists(config))
        throw afm::ConfigError("metrics: missing config.json in " + dir);

    const afm::ResolvedConfig rc = afm::resolve_config(config.string(), {});
    const double tau_A = rc.cfg.cant.tau_A();

    std::vector<int> line_ids;
    for (const auto& entry : fs::directory_iterator(root)) {
        const std::string name = entry.path().filename().string();
        int k = 0;
        if (std::sscanf(name.c_str(), "line_%d.csv", &k) == 1 &&
            name == "line_" + std::to_string(k) + ".csv")
            line_ids.push_back(k);
    }
    std::sort(line_ids.begin(), line_ids.end());
    if (line_ids.empty())
        throw afm::ConfigError("metrics: no line_<k>.csv traces in " + dir);

    afm::ExperimentResult res;
    for (int k : line_ids) {
        const fs::path trace = root / ("line_" + std::to_string(k) + ".csv");
        const fs::path impacts = root / ("impacts_" + std::to_string(k) + ".csv");
        afm::LineTrace tr =
            afm::read_trace_csv(trace.string(), fs::exists(impacts) ? impacts.string() : "");
        tr.line = k;
        tr.i_y = rc.cfg.raster.i_y0 + (k - 1) * rc.cfg.raster.dy;
        res.per_line.push_back(
            afm::compute_metrics(tr, rc.cfg.hybrid, rc.cfg.ctrl.hybrid_pid, tau_A));
        res.traces.push_back(std::move(tr));
    }
    res.aggregate = afm::aggregate_metrics(res.traces, res.per_line);
    std::cout << afm::metrics_to_json_text(res);
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Tapping-mode AFM scan simulator"};
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "Run a raster-scan experiment");
    std::string config_path, out_dir, lines;
    long long seed = 0;
    std::vector<std::string> overrides;
    run->add_option("--config", config_path, "JSON config file (defaults apply if omitted)");
    run->add_option("--out", out_dir, "Output directory")->required();
    run->add_option("--lines", lines, "Line subset a..b (1-based, inclusive)");
    auto* seed_opt = run->add_option("--seed", seed, "Noise seed override");
    run->add_option("--set", overrides, "Config override key.path=value (repeatable)");

    // sample gen
    auto* sample = app.add_subcommand("sample", "Sample-surface utilities");
    auto* gen = sample->add_subcommand("gen", "Generate a height-map file");
    std::string kind, sample_out;
    double step = 28e-9, period = 1e-6, amp = 80e-9, sin_period = 4e-6;
    double sdx = 1e-8, sdy = 1e-7;
    int nx = 1001, ny = 3;
    gen->add_option("kind", kind, "grid or sinusoid")
        ->required()
        ->check(CLI::IsMember({"grid", "sinusoid"}));
    gen->add_option("--step", step, "Grid step height [m]");
    gen->add_option("--period", period, "Grid period [m]");
    gen->add_option("--amp", amp, "Sinusoid amplitude [m]");
    gen->add_option("--sin-period", sin_period, "Sinusoid period [m]");
    gen->add_option("--nx", nx, "Samples per row");
    gen->add_option("--ny", ny, "Rows");
    gen->add_option("--dx", sdx, "Column spacing [m]");
    gen->add_option("--dy", sdy, "Row spacing [m]");
    gen->add_option("--out", sample_out, "Output file")->required();
    sample->require_subcommand(1);

    // metrics
    auto* metrics = app.add_subcommand("metrics", "Recompute metrics from a trace directory");
    std::string trace_dir;
    metrics->add_option("dir", trace_dir, "Directory with line_<k>.csv and config.json")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (run->parsed())
            return cmd_run(config_path, out_dir, lines, seed, seed_opt->count() > 0, overrides);
        if (sample->parsed())
            return cmd_sample_gen(kind, step, period, amp, sin_period, nx, ny, sdx, sdy,
                                  sample_out);
        if (metrics->parsed())
            return cmd_metrics(trace_dir);
    } catch (const afm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const afm::ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const afm::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
