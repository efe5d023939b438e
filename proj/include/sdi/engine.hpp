#pragma once

#include "sdi/field.hpp"
#include "sdi/simulate.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace sdi {

enum class ReconMode {
  Separated, // shared probe times per-frame objects
  ExitWave,  // free per-frame exit waves under a fixed support (unstable probe)
  Calibrate, // fixed probe prior, free per-frame objects, modulator updated
};

const char* mode_name(ReconMode mode);
ReconMode parse_mode(const std::string& name);

struct SupportConfig {
  double radius_px = 0.0;       // 0: derived from the probe
  double margin_fraction = 0.1; // growth applied to the derived radius
  double outside_feedback = 0.0; // fraction of the wave kept outside the support
};

struct ReconConfig {
  ReconMode mode = ReconMode::ExitWave;
  int iterations = 300;
  double beta_object = 0.9;
  double beta_probe = 0.9;
  double beta_modulator = 0.9;
  SupportConfig support;
  double division_epsilon = 1e-3;
  bool update_modulator = false;
  bool update_probe = false;
  bool unit_modulator = true; // project M onto |M| = 1 after each modulator update
  bool early_stop = false;
  double early_stop_tolerance = 1e-6;
  int early_stop_window = 20;
  std::uint64_t seed = 0;

  /// Throws ConfigError on out-of-range values or inconsistent flags.
  void validate() const;
};

struct ReconState {
  std::vector<ComplexField> exit_waves; // sample plane, one per frame
  std::vector<ComplexField> objects;    // separated / calibrate modes
  ComplexField probe;
  ComplexField modulator;
  RealGrid support;
  double support_radius = 0.0;
  std::vector<Shift> drift; // per-frame probe offset (separated/calibrate); empty = none
  std::vector<double> residuals;
};

struct InitOptions {
  std::optional<ComplexField> probe;
  std::optional<ComplexField> modulator;
  std::vector<Shift> drift;
};

/// Radius of the uniform disk with the same 90%-power radius as the probe.
double probe_equivalent_radius(const ComplexField& probe);

/// Probe from the dataset's aperture description, scaled so its power equals
/// the brightest frame's total intensity.
ComplexField ideal_probe(const ScanDataset& ds);

ReconState init_state(const ScanDataset& ds, const ReconConfig& config, const InitOptions& init = {});

/// Replace the amplitude by sqrt(I) where valid, keep the phase; zero-amplitude
/// samples take phase 0. Invalid pixels (mask 0) pass through.
ComplexField modulus_project(const ComplexField& wave, const RealGrid& intensity, const RealGrid* valid_mask = nullptr);
void modulus_project_inplace(Grid<cplx>& wave, const RealGrid& intensity, const RealGrid* valid_mask);

/// One sweep over all frames, followed by the averaged shared updates.
/// Returns the data residual of the sweep's forward model and appends it to
/// state.residuals.
double run_iteration(ReconState& state, const ScanDataset& ds, const ReconConfig& config);

/// init_state + run_iteration until the iteration budget (or early stop).
ReconState reconstruct(const ScanDataset& ds, const ReconConfig& config, const InitOptions& init = {});

/// Data residual of the current state without modifying it.
double data_residual(const ReconState& state, const ScanDataset& ds, ReconMode mode);

// ---------------------------------------------------------------- probe drift

struct RegisterConfig;

struct DriftEstimate {
  std::vector<Shift> drift;        // per frame, drift[0] == (0, 0)
  std::vector<double> confidence;  // pass-2 registration confidence
  std::vector<int> flagged;        // frames replaced by temporal interpolation
};

/// Two-pass alignment of |exit wave| magnitudes: to frame 0, then to the mean
/// of the pass-1-aligned magnitudes.
DriftEstimate estimate_probe_drift(const std::vector<ComplexField>& exit_waves, const RealGrid& support,
                                   double min_confidence = 0.5);

struct SeparatedObjects {
  ComplexField probe;                // aligned mean exit wave
  std::vector<ComplexField> objects; // lab-frame objects, masked
  std::vector<RealGrid> masks;       // per-frame validity weights
};

/// Average the drift-compensated exit waves into a probe and divide it back
/// out of each frame (the probe is re-shifted by that frame's drift, so the
/// objects stay in window coordinates). Objects carry an arbitrary shared
/// complex scale.
SeparatedObjects separate_probe_object(const std::vector<ComplexField>& exit_waves, const std::vector<Shift>& drifts,
                                       double division_epsilon, const RealGrid& support, double object_radius_px);

/// Objects and masks for separated-mode results. Masks are soft disks of
/// `radius_scale` times the probe's equivalent radius, centered on each
/// frame's drift.
SeparatedObjects objects_from_state(const ReconState& state, double radius_scale = 1.0);

} // namespace sdi
