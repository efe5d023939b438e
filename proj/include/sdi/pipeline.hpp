#pragma once

#include "sdi/assemble.hpp"
#include "sdi/engine.hpp"
#include "sdi/registration.hpp"
#include "sdi/simulate.hpp"

#include <json.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace sdi {

// ---------------------------------------------------------------- config

struct ScanSection {
  int rows = 8;
  int cols = 8;
  double overlap = 0.4; // used when step_px is 0
  double step_px = 0.0;
  double jitter_px = 2.0;
  std::uint64_t seed = 3;
  int sparse_stride = 1; // keep every stride-th raster row and column
};

struct SimulateSection {
  Geometry geometry;
  int frame_px = 128;
  ProbeSpec probe;
  SampleSpec sample;
  ModulatorSpec modulator;
  ScanSection scan;
  DriftModel drift;
  double photons = std::numeric_limits<double>::infinity();
};

struct ReconstructSection {
  ReconConfig recon;
  bool drift_compensation = false; // exitwave -> drift estimate -> separated
  int separated_iterations = 100;
  std::filesystem::path probe_path;
  std::filesystem::path modulator_path;
};

struct PositionsSection {
  std::string edges = "auto";
  double mask_scale = 1.0;
  bool robust = true;
  double outlier_px = 2.0;
  RegisterConfig registration;
};

struct AssembleSection {
  EpieConfig epie;
};

struct CalibrationSection {
  bool present = false;
  ProbeSpec probe;
  ModulatorSpec diffuser;
  int diffuser_size_px = 512;
  ScanSection scan;
  ReconConfig recon;
  double mask_fraction = 0.05;
  double grating_period_px = 0.0;
  bool use_in_reconstruction = false;
};

struct EvaluateSection {
  double converged_residual = 1e-2;
};

struct PipelineConfig {
  int version = 1;
  std::uint64_t seed = 0;
  SimulateSection simulate;
  ReconstructSection reconstruct;
  PositionsSection positions;
  AssembleSection assemble;
  CalibrationSection calibration;
  EvaluateSection evaluate;
  nlohmann::json source; // the parsed document, echoed into reports

  /// Applies the top-level seed to the noise, engine and ePIE streams.
  void set_seed(std::uint64_t seed);
};

/// Throws ConfigError naming the offending key for unknown keys, missing
/// required keys, wrong types and non-positive physical parameters.
PipelineConfig parse_config(const nlohmann::json& doc);
PipelineConfig load_config(const std::filesystem::path& path);
/// Defaults only (no simulation geometry), for stages that read datasets.
PipelineConfig default_config();

// ---------------------------------------------------------------- reports

struct RunReport {
  std::string stage;
  nlohmann::json config;
  double wall_seconds = 0.0;
  nlohmann::json metrics = nlohmann::json::object();
  std::vector<std::string> outputs;

  nlohmann::json to_json() const;
};

/// Writes `report.json` into the stage directory.
void write_report(const std::filesystem::path& dir, const RunReport& report);

// ---------------------------------------------------------------- stages

/// Creates `dir`; an existing non-empty directory is cleared when
/// `overwrite` is set and is a ConfigError otherwise.
void prepare_output(const std::filesystem::path& dir, bool overwrite);

RunReport run_simulate(const PipelineConfig& config, const std::filesystem::path& out, bool overwrite);
RunReport run_simulate_calibration(const PipelineConfig& config, const std::filesystem::path& out, bool overwrite);

RunReport run_reconstruct(const PipelineConfig& config, const std::filesystem::path& dataset,
                          const std::filesystem::path& out, bool overwrite);

/// `dataset` is optional (empty path) and only used for scoring against truth.
RunReport run_positions(const PipelineConfig& config, const std::filesystem::path& recon,
                        const std::filesystem::path& dataset, const std::filesystem::path& out, bool overwrite);

RunReport run_assemble(const PipelineConfig& config, const std::filesystem::path& dataset,
                       const std::filesystem::path& recon, const std::filesystem::path& positions,
                       const std::filesystem::path& out, bool overwrite);

/// `probe` is optional; the ideal probe from the manifest is used otherwise.
RunReport run_calibrate(const PipelineConfig& config, const std::filesystem::path& dataset,
                        const std::filesystem::path& probe, const std::filesystem::path& out, bool overwrite);

struct EvaluationInput {
  std::filesystem::path dataset;
  std::filesystem::path positions;
  std::filesystem::path recon; // optional, supplies the convergence flag
};

/// sweep.csv (one row per input, ordered by overlap ratio) and errors.csv.
/// With several inputs the per-frame errors go to errors_%02d.csv in
/// sweep order.
RunReport run_evaluate(const PipelineConfig& config, const std::vector<EvaluationInput>& inputs,
                       const std::filesystem::path& out, bool overwrite);

/// [calibration ->] simulate -> reconstruct -> positions -> assemble ->
/// evaluate, each stage in its own subdirectory of `out`.
std::vector<RunReport> run_pipeline(const PipelineConfig& config, const std::filesystem::path& out, bool overwrite);

/// 2 config, 3 physics validation, 4 graph, 5 divergence, 1 anything else.
int exit_code(const std::exception& error);

} // namespace sdi
