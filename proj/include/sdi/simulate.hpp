#pragma once

#include "sdi/field.hpp"
#include "sdi/propagate.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sdi {

// ---------------------------------------------------------------- probe

enum class ProbeKind { Aperture, Divergent };

struct ProbeSpec {
  ProbeKind kind = ProbeKind::Aperture;
  double diameter = 1e-3; // m
  double defocus = 0.0;   // m, aperture-to-sample distance
  double focal = -5e-3;   // m, divergent kind only; negative diverges
};

/// Hard circular aperture (optionally with a quadratic phase) propagated to
/// the sample plane. Normalized to unit total power.
ComplexField generate_probe(Shape shape, double pitch, double wavelength, const ProbeSpec& spec);

/// Full-width at half maximum of the intensity along the central row, in px.
double intensity_fwhm(const ComplexField& f);

// ---------------------------------------------------------------- sample

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Perfect maze on a cells_y x cells_x lattice. top_wall(i, j) / left_wall(i, j)
/// say whether the boundary above / left of cell (i, j) is closed. Row 0 and
/// column 0 borders are always closed; the layout tiles periodically.
struct MazeLayout {
  int cells_y = 0;
  int cells_x = 0;
  std::vector<std::uint8_t> top;
  std::vector<std::uint8_t> left;
  bool top_wall(int i, int j) const { return top[static_cast<std::size_t>(i) * cells_x + j] != 0; }
  bool left_wall(int i, int j) const { return left[static_cast<std::size_t>(i) * cells_x + j] != 0; }
};

MazeLayout generate_maze_layout(int cells_y, int cells_x, std::uint64_t seed);

/// 1 on wall pixels, 0 on passages. Cell pitch is size/cells; walls are
/// `wall_px` wide along the top and left edge of each cell.
RealGrid rasterize_maze(const MazeLayout& maze, Shape shape, int wall_px);

struct SampleSpec {
  enum class Kind { Maze, Import } kind = Kind::Maze;
  int size = 512;
  int cells = 64;
  int wall_px = 2;
  std::uint64_t seed = 1;
  Range amplitude{0.7, 1.0};
  Range phase{0.0, 1.0};
  std::filesystem::path amplitude_image; // import kind
  std::filesystem::path phase_image;     // import kind, optional
};

/// Walls map to (amplitude.lo, phase.hi), passages to (amplitude.hi, phase.lo).
ComplexField generate_sample(const SampleSpec& spec, double pitch);

// ---------------------------------------------------------------- modulator

struct ModulatorSpec {
  enum class Kind { Random, Grating } kind = Kind::Random;
  int feature_px = 2;
  double phase_depth = 3.141592653589793;
  double density = 0.5;  // fraction of retarding features (random) or duty cycle (grating)
  double period_px = 0;  // grating period; random kind tiles its pattern when > 0
  std::uint64_t seed = 7;
};

/// Unit-amplitude phase-type modulator.
ComplexField generate_modulator(Shape shape, double pitch, const ModulatorSpec& spec);

// ---------------------------------------------------------------- scan

/// Positions in sample pixels relative to the sample center, in acquisition order.
struct ScanPlan {
  std::vector<Shift> positions;
  int grid_rows = 0; // nominal raster topology, 0 when unknown
  int grid_cols = 0;
  std::size_t size() const { return positions.size(); }
};

ScanPlan make_scan_plan(int rows, int cols, double step_px, double jitter_px, std::uint64_t seed);

/// Throws ConfigError unless every frame window stays inside the sample.
void validate_plan(const ScanPlan& plan, Shape sample_shape, Shape frame_shape);

/// Keep every `stride`-th raster row and column (low-overlap subset of a dense scan).
std::vector<int> sparse_grid_indices(const ScanPlan& plan, int stride);

struct DriftModel {
  enum class Kind { None, Linear, RandomWalk } kind = Kind::None;
  double amplitude = 0.0; // px, total excursion
  Shift direction{0.1, 1.0};
  std::uint64_t seed = 3;
};

/// Per-frame probe offset; entry 0 is always (0, 0).
std::vector<Shift> drift_offsets(const DriftModel& model, std::size_t n_frames);

// ---------------------------------------------------------------- overlap

/// Intersection area of two disks of diameter D at distance d over one disk area.
double lens_overlap(double distance, double diameter);
/// Inverse of lens_overlap in distance, for ratio in (0, 1).
double step_for_overlap(double ratio, double diameter);

struct OverlapReport {
  struct Pair {
    int i = 0;
    int j = 0;
    double distance = 0.0;
    double ratio = 0.0;
  };
  std::vector<Pair> pairs;
  double mean = 0.0;
};

/// Each frame paired with its nearest neighbor (deduplicated).
OverlapReport overlap_ratio(const ScanPlan& plan, double probe_diameter_px);

/// Diameter enclosing 90% of the probe power, in pixels.
double probe_footprint_px(const ComplexField& probe);

// ---------------------------------------------------------------- dataset

struct Truth {
  ComplexField sample;
  ComplexField probe;
  ComplexField modulator;
  ScanPlan plan;
  std::vector<Shift> drift;
};

struct ScanDataset {
  std::vector<RealGrid> frames;
  Geometry geometry;
  double photons = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  std::optional<ProbeSpec> probe_spec; // lets reconstruction build an ideal probe
  int grid_rows = 0;
  int grid_cols = 0;
  std::optional<Truth> truth;

  std::size_t size() const { return frames.size(); }
  Shape frame_shape() const { return frames.empty() ? Shape{} : frames.front().shape(); }
  /// Throws ConfigError on shape mismatch or negative / non-finite values.
  void validate() const;
};

struct SynthesisOptions {
  double photons = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
};

/// Frame n: |far(M * near(crop(shift(sample, -r_n)) * shift(P, d_n)))|^2. With
/// finite photons the intensities are scaled by photons / probe power and
/// replaced by Poisson draws from a per-frame stream.
ScanDataset synthesize_dataset(const ComplexField& sample, const ComplexField& probe,
                               const ComplexField& modulator, const ScanPlan& plan, const DriftModel& drift,
                               const Geometry& geometry, const SynthesisOptions& options);

/// Crop of the sample seen by a frame centered at `position`: the whole
/// sample is Fourier-shifted by -position, then center-cropped.
ComplexField sample_patch(const ComplexField& sample, Shift position, Shape frame_shape);

/// sample_patch with the sample spectrum computed once.
class SamplePatcher {
public:
  explicit SamplePatcher(const ComplexField& sample);
  ComplexField patch(Shift position, Shape frame_shape) const;

private:
  ComplexField spectrum_;
};

/// Poisson draw: inverse transform below mean 30, rounded Gaussian above.
double poisson_draw(double mean, std::mt19937_64& rng);

} // namespace sdi
