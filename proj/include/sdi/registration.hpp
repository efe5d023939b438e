#pragma once

#include "sdi/errors.hpp"
#include "sdi/field.hpp"

#include <string>
#include <vector>

namespace sdi {

/// Registration input has no structure to correlate (all zero).
class FeaturelessError : public Error {
public:
  FeaturelessError() : Error("featureless field") {}
};

struct RegisterConfig {
  bool precondition = false; // scaling-gradient preconditioning
  int trim_px = 2;           // spectral trim per side for the scaling gradient
  int upsample = 50;         // sub-pixel refinement density
  bool magnitude_only = false;
  bool subtract_mean = true; // remove the mask-weighted mean before correlating
  double min_confidence = 0.05;
  double min_peak_ratio = 1.2;
  double exclusion_px = 5.0; // secondary peaks closer than this are ignored
  double min_overlap_fraction = 0.02; // masked mode: smallest usable mask overlap
  bool significance_ranking = true;   // masked mode: rank peaks by atanh|r| sqrt(overlap)
  double coarse_blur_px = 1.0;        // masked mode: Gaussian sigma for the integer search (0 = off)
  int candidates = 10;                // masked mode: peaks kept per edge; > 1 enables cycle selection
  double candidate_separation_px = 3.0;
  double cycle_tolerance_px = 3.0;    // largest closure error of a consistent cycle
  double relative_overlap_floor = 0.4; // drop candidates below this fraction of the median best-peak overlap
  int consensus_rounds = 2;           // candidate re-selection rounds against a provisional solve
};

struct PeakCandidate {
  Shift delta;              // integer shift, position_j - position_i
  double score = 0.0;       // ranking score
  double coefficient = 0.0; // |correlation coefficient|
  double overlap = 0.0;     // mask overlap weight
};

struct ShiftMeasurement {
  int frame_i = 0;
  int frame_j = 0;
  Shift delta;             // position_j - position_i (sample pixels)
  double confidence = 0.0; // |peak| / (||f|| ||g||)
  double peak_ratio = 0.0; // |peak| / highest peak >= exclusion_px away
  double phase = 0.0;      // arg of the correlation peak (relative global phase)
  bool accepted = false;
  std::string note;
  std::vector<PeakCandidate> candidates; // best first (cycle selection only)
  int chosen = 0;                        // index into candidates
  int cycle_support = 0;                 // closed cycles that used the chosen peak
  bool consensus = false;                // chosen peak agrees with the provisional solve
  Shift predicted;                       // provisional-solve shift, rounded (refinement center)
};

/// f(a r) - f(r) with the scaled copy formed by cropping the centered
/// spectrum by `trim_px` per side, inverse transforming on the smaller grid
/// and zero-padding back; a = N / (N - 2 trim).
ComplexField scaling_gradient(const ComplexField& f, int trim_px);

/// Shift s such that g(r) ~ f(r - s), from the peak of the cross-correlation,
/// refined by locally evaluating the correlation at `upsample`-fold density
/// within +-1.5 px of the integer peak. Frame indices are left at 0.
ShiftMeasurement subpixel_shift_estimate(const ComplexField& f, const ComplexField& g, const RegisterConfig& config);

/// Masked normalized cross-correlation: for each shift, the weighted
/// correlation coefficient of f and g over the overlap of their masks (so the
/// score does not favor shifts with larger overlap). confidence is the peak
/// |coefficient|; shifts whose overlap weight is below min_overlap_fraction of
/// the largest are ignored.
ShiftMeasurement masked_shift_estimate(const ComplexField& f, const RealGrid& f_mask, const ComplexField& g,
                                       const RealGrid& g_mask, const RegisterConfig& config);

// ---------------------------------------------------------------- graph

struct EdgeStrategy {
  enum class Kind { Temporal, AllPairs, Grid } kind = Kind::Temporal;
  int k = 2;    // temporal neighbourhood
  int rows = 0; // grid topology (raster order, 4-neighbours)
  int cols = 0;
  static EdgeStrategy parse(const std::string& text);
  std::string str() const;
};

struct Edge {
  int i = 0;
  int j = 0;
  bool operator==(const Edge&) const = default;
};

std::vector<Edge> build_edges(int n_frames, const EdgeStrategy& strategy);

/// Registers each edge's object pair and gates it by confidence and peak ratio.
/// With masks the masked normalized correlation is used; without, the plain
/// correlation of mean-removed objects.
std::vector<ShiftMeasurement> measure_pairwise_shifts(const std::vector<ComplexField>& objects,
                                                      const std::vector<RealGrid>& masks,
                                                      const std::vector<Edge>& edges, const RegisterConfig& config);

/// For each edge, picks the candidate peak that closes the most (and the
/// best scoring) short cycles of the graph: triangles and chordless squares
/// whose shifts sum to within `tolerance_px` of zero. Sets `chosen` and
/// `cycle_support`; edges in no closed cycle keep candidate 0.
void select_cycle_consistent(int n_nodes, std::vector<ShiftMeasurement>& edges, double tolerance_px);

/// Solves positions from the cycle-selected integer peaks (robustly), then
/// re-picks for every edge the candidate nearest the predicted shift, if one
/// lies within `tolerance_px`; repeated `rounds` times. Sets `consensus`.
void reselect_by_consensus(int n_nodes, std::vector<ShiftMeasurement>& edges, double tolerance_px, int rounds);

/// Connected components over accepted edges (each sorted, ordered by first node).
std::vector<std::vector<int>> connected_components(int n_nodes, const std::vector<ShiftMeasurement>& edges);

/// Throws GraphError listing the components when the accepted edges leave the
/// graph disconnected.
void require_connected(int n_nodes, const std::vector<ShiftMeasurement>& edges);

struct PositionSolution {
  std::vector<Shift> positions; // node 0 anchored at (0, 0)
  int cg_iterations = 0;
  double relative_residual = 0.0;
};

/// Weighted least squares over accepted edges (weight = confidence) with
/// node 0 anchored, via conjugate gradients on the reduced graph Laplacian.
PositionSolution solve_positions(int n_nodes, const std::vector<ShiftMeasurement>& edges,
                                 double tolerance = 1e-13);

/// solve_positions, then repeatedly rejects the accepted edge with the largest
/// residual above `outlier_px` (unless that disconnects the graph) and
/// re-solves, at most `max_rejections` times.
PositionSolution solve_positions_robust(int n_nodes, std::vector<ShiftMeasurement>& edges, double outlier_px = 2.0,
                                        int max_rejections = 1000);

struct PositionScore {
  std::vector<Shift> errors; // after removing the mean offset
  std::vector<double> magnitudes;
  double mean = 0.0;
  double std = 0.0;
  double rms = 0.0;
};

PositionScore score_positions(const std::vector<Shift>& recovered, const std::vector<Shift>& truth);

/// "i,j,dy,dx,confidence,peak_ratio,accepted"
void write_edges_csv(const std::string& path, const std::vector<ShiftMeasurement>& edges);

} // namespace sdi
