#pragma once

#include "sdi/engine.hpp"
#include "sdi/field.hpp"
#include "sdi/simulate.hpp"

#include <string>
#include <vector>

namespace sdi {

struct CalibrationPlan {
  std::vector<Shift> positions; // diffuser translations, px
  ComplexField probe_prior;
  double grating_period_px = 0.0; // truth, for scoring (0 = unknown)

  /// Throws ConfigError unless there are >= 3 positions and the prior is nonzero.
  void validate() const;
};

/// Frames |far(M near(P D_k))|^2 for each diffuser translation k; the
/// diffuser plays the sample role.
ScanDataset synthesize_calibration_dataset(const ComplexField& probe, const ComplexField& diffuser,
                                           const ComplexField& modulator, const CalibrationPlan& plan,
                                           const Geometry& geometry, const SynthesisOptions& options);

struct CalibrationResult {
  ComplexField modulator;
  std::vector<ComplexField> diffusers;
  std::vector<double> residuals;
  std::string warning; // set when the residual plateau stays above 0.1
};

/// Calibrate-mode engine run: probe fixed at the prior, per-frame diffusers
/// free, modulator started at unity and updated by the averaged rule.
CalibrationResult run_calibration(const ScanDataset& ds, const ComplexField& probe_prior, ReconConfig config);

struct ModulatorScore {
  double rho = 0.0;       // |<truth, recovered>| / (||truth|| ||recovered||)
  double phase_rms = 0.0; // rad, after removing the phase of rho
};

ModulatorScore score_modulator(const ComplexField& recovered, const ComplexField& truth, const RealGrid& mask);

/// Period (px) of the dominant off-center peak in the spectrum of the
/// mask-weighted, mean-removed modulator; sub-bin accuracy from zero padding
/// and a parabolic fit. Frequencies below `min_cycles` per grid are ignored.
double estimate_grating_period(const ComplexField& modulator, const RealGrid& mask, double min_cycles = 2.0);

/// Pixels where the probe intensity exceeds `fraction` of its maximum.
RealGrid illuminated_region(const ComplexField& probe, double fraction = 0.05);

} // namespace sdi
