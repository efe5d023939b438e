#pragma once

#include "sdi/field.hpp"

namespace sdi {

/// Optical layout: sample -> (near field) -> modulator -> (far field) -> detector.
struct Geometry {
  double wavelength = 0.0;              // m
  double z_sample_to_modulator = 0.0;   // m
  double z_modulator_to_detector = 0.0; // m
  double detector_pitch = 0.0;          // m
  double sample_plane_pitch = 0.0;      // m
  bool far_field = true;

  /// Sample-plane pitch implied by Fraunhofer sampling for an n x n detector.
  static double fraunhofer_pitch(double wavelength, double z, int n, double detector_pitch);
  /// Geometry with sample_plane_pitch derived from the far-field leg.
  static Geometry far_field_from(double wavelength, double z_sm, double z_md, double detector_pitch, int n);

  /// Throws PhysicsError if any quantity is non-positive or the far-field
  /// pitch bookkeeping is inconsistent for an n x n grid.
  void validate(int n) const;
};

/// Largest |z| for which the angular-spectrum transfer function is sampled
/// without aliasing up to the Nyquist frequency on an n-sample axis.
double max_unaliased_distance(int n, double pitch, double wavelength);

/// Angular-spectrum propagator with a cached transfer function. Distances
/// may be negative (back-propagation). Propagation is unitary.
class NearPropagator {
public:
  NearPropagator(Shape shape, double pitch, double distance, double wavelength);

  ComplexField forward(const ComplexField& f) const;
  ComplexField backward(const ComplexField& f) const;
  void forward_inplace(Grid<cplx>& g) const;
  void backward_inplace(Grid<cplx>& g) const;

  double distance() const { return distance_; }
  Shape shape() const { return shape_; }

private:
  void check_bandwidth(const Grid<cplx>& spectrum) const;

  Shape shape_;
  double pitch_;
  double distance_;
  double wavelength_;
  double band_limit_; // cycles/m; spectral content beyond it would alias
  bool needs_band_check_;
  Grid<cplx> transfer_;
};

ComplexField propagate_near(const ComplexField& f, double distance, double wavelength);

/// Fraunhofer leg as a centered unitary DFT. The output pitch is
/// wavelength*distance/(n*input_pitch); the inverse restores the input pitch.
ComplexField propagate_far(const ComplexField& f, double wavelength, double distance);
ComplexField propagate_far_inverse(const ComplexField& f, double wavelength, double distance);
void far_inplace(Grid<cplx>& g);
void far_inverse_inplace(Grid<cplx>& g);

/// Sub-pixel translation by a linear phase ramp in reciprocal space.
/// Integer shifts reproduce a circular roll.
ComplexField fourier_shift(const ComplexField& f, Shift shift);
void fourier_shift_inplace(Grid<cplx>& g, Shift shift);

/// Circular roll by integer pixels; out(y, x) = in(y - dy, x - dx).
ComplexField roll(const ComplexField& f, int dy, int dx);

} // namespace sdi
