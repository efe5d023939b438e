#pragma once

#include "sdi/field.hpp"
#include "sdi/simulate.hpp"

#include <cstdint>
#include <vector>

namespace sdi {

/// Full sample image. A frame recovered at position p has its window center
/// at canvas pixel origin + p.
struct StitchedObject {
  ComplexField canvas;
  RealGrid weight;
  Shift origin;
};

/// Canvas covering every frame window plus `pad_px` on each side.
StitchedObject make_canvas(const std::vector<Shift>& positions, Shape frame_shape, double pitch, int pad_px = 12);

/// Integer top-left corner of a frame window on the canvas and the
/// remaining fractional offset in [0, 1).
struct Placement {
  int y0 = 0;
  int x0 = 0;
  Shift fraction;
};
Placement place_frame(const StitchedObject& canvas, Shift position, Shape frame_shape);

/// Rotate each object's global phase onto the canvas built from the frames
/// placed before it (frames visited in order of distance from frame 0).
/// Returns the applied phase factors.
std::vector<cplx> align_object_phases(std::vector<ComplexField>& objects, const std::vector<RealGrid>& weights,
                                      const std::vector<Shift>& positions);

/// Weighted average of the objects placed at their positions (sub-pixel by
/// Fourier shift). Pixels no frame reaches are set to 1.
StitchedObject stitch_initial(const std::vector<ComplexField>& objects, const std::vector<RealGrid>& weights,
                              const std::vector<Shift>& positions);

struct EpieConfig {
  int iterations = 100;
  double beta_object = 0.9;
  double beta_probe = 0.9;
  bool update_probe = true;
  double division_epsilon = 1e-3;
  int patch_pad_px = 8; // context kept around each window for the sub-pixel shift
  double divergence_factor = 10.0;
  std::uint64_t seed = 0;
};

struct EpieResult {
  StitchedObject object;
  ComplexField probe;
  std::vector<double> residuals;
};

/// Sequential ePIE through the modulator forward model with positions and
/// modulator held fixed. `drift` (optional) shifts the probe per frame.
EpieResult epie_refine(const ScanDataset& ds, const std::vector<Shift>& positions, const ComplexField& probe,
                       const ComplexField& modulator, const StitchedObject& initial, const EpieConfig& config,
                       const std::vector<Shift>& drift = {});

/// Data residual of a canvas/probe pair under the forward model.
double canvas_residual(const ScanDataset& ds, const std::vector<Shift>& positions, const ComplexField& probe,
                       const ComplexField& modulator, const StitchedObject& object, int patch_pad_px = 8,
                       const std::vector<Shift>& drift = {});

struct PhaseAlignment {
  cplx gamma;
  double nrmse = 0.0;
};

/// gamma = <a, b> / <a, a> over the mask, NRMSE = ||gamma a - b|| / ||b||.
PhaseAlignment global_phase_align(const ComplexField& a, const ComplexField& b, const RealGrid& mask);

/// Truth sample resampled onto the canvas grid. `offset` maps recovered to
/// true positions (true = recovered + offset).
ComplexField sample_on_canvas(const ComplexField& sample, const StitchedObject& canvas, Shift offset);

/// Canvas pixels whose accumulated weight reaches `threshold`.
RealGrid scanned_region(const StitchedObject& canvas, double threshold = 0.5);

} // namespace sdi
