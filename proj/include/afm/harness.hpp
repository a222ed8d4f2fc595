#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afm/control.hpp"
#include "afm/demod.hpp"
#include "afm/model.hpp"
#include "afm/sample.hpp"
#include "afm/sim.hpp"
#include "afm/trace.hpp"

// Experiment orchestration: configuration, full raster scans, metrics,
// artefact-episode detection and file output.

namespace afm {

struct SampleSpec {
    std::string kind = "grid";  // grid | sinusoid | heightmap
    double step_height = 28e-9;
    double period = 1e-6;
    double A_sin = 80e-9;
    double P_sin = 4e-6;
    std::string path;  // heightmap file
};

struct RasterConfig {
    int n_lines = 1;
    double I_x = 10e-6;  // line length [m]
    double dy = 1e-7;    // line spacing [m]
    double i_y0 = 0.0;
};

struct ControllerFlags {
    bool plain_pid = false;
    bool q_control = true;
    bool dynamic_pid = true;
    bool hybrid_pid = false;
    bool speed_regulator = false;
    bool predictive = false;
};

struct EngageConfig {
    double clearance = 1.05;  // initial base height above sigma, in units of A_f
    double tol = 0.01;        // |A - A_r| settle band, relative to A_r
    double hold_tau = 2.0;    // settle dwell, in units of tau_A
    double max_tau = 100.0;   // give-up time, in units of tau_A
};

struct ExperimentConfig {
    CantileverParams cant;
    InteractionParams inter;
    bool interaction_enabled = true;
    ZPiezoParams zp;

    double A_f = 50e-9;
    double omega_d = 0.0;

    PidConfig pid;
    HybridConfig hybrid;
    SpeedConfig speed;
    PredictiveConfig pred;
    int pred_grid_points = 1001;

    SolverConfig solver;
    NoiseConfig noise;

    SampleSpec sample;
    RasterConfig raster;
    ControllerFlags ctrl;
    EngageConfig engage;

    std::uint64_t seed = 1;
    int ctrl_per_period = 20;  // controller updates per drive period
    int record_every = 20;     // record every Nth controller update

    // Raster subset, 1-based inclusive; line_to = 0 means the last line.
    int line_from = 1;
    int line_to = 0;

    double ctrl_period() const { return 2.0 * M_PI / omega_d / ctrl_per_period; }

    void validate() const;
    SampleSurface make_surface() const;
};

// Fully resolved configuration: Table-style defaults, overlaid with the file
// values, overlaid with key=value overrides; derived values recomputed for
// keys the file left out.
struct ResolvedConfig {
    ExperimentConfig cfg;
    std::string echo_json;  // the resolved document, for reproduction
};

ResolvedConfig resolve_config(const std::string& config_path,
                              const std::vector<std::string>& overrides);

enum class EpisodeType { probe_loss, recovery, recoil };

struct Episode {
    EpisodeType type = EpisodeType::probe_loss;
    double t_start = 0.0;
    double t_end = 0.0;
    double i_x_start = 0.0;
    double i_x_end = 0.0;
};

std::vector<Episode> detect_artefact_episodes(const LineTrace& tr, const HybridConfig& cfg,
                                              bool hybrid_active, double tau_A);

struct Metrics {
    int n_samples = 0;
    double rms_e_sigma = 0.0, sd_e_sigma = 0.0, max_e_sigma = 0.0;
    int n_impacts = 0;
    double rms_v_i = 0.0, sd_v_i = 0.0, max_v_i = 0.0;
    std::vector<double> recovery_bumps;  // max(sigma_hat - sigma) per recovery episode
    double rms_recovery_bump = 0.0, sd_recovery_bump = 0.0, max_recovery_bump = 0.0;
    int n_probe_loss = 0, n_recovery = 0, n_recoil = 0;
    double T_s = 0.0;          // line scan time; aggregate: total scan time
    double sum_K_sigma = 0.0;  // per line; aggregate: mean over lines
};

Metrics compute_metrics(const LineTrace& tr, const HybridConfig& cfg, bool hybrid_active,
                        double tau_A);

struct ExperimentResult {
    std::vector<LineTrace> traces;
    std::vector<Metrics> per_line;
    Metrics aggregate;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg);

Metrics aggregate_metrics(const std::vector<LineTrace>& traces,
                          const std::vector<Metrics>& per_line);

std::string metrics_to_json_text(const ExperimentResult& r);

void write_outputs(const ExperimentResult& r, const std::string& echo_json,
                   const std::string& out_dir);

}  // namespace afm
