#include "sdi/propagate.hpp"

#include "sdi/errors.hpp"
#include "sdi/fft.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace sdi {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kBandLeakTolerance = 1e-12;

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg << what << " must be finite";
    throw PhysicsError(msg.str());
  }
}

void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    std::ostringstream msg;
    msg << what << " must be positive and finite, got " << v;
    throw PhysicsError(msg.str());
  }
}

} // namespace

double Geometry::fraunhofer_pitch(double wavelength, double z, int n, double detector_pitch) {
  return wavelength * z / (n * detector_pitch);
}

Geometry Geometry::far_field_from(double wavelength, double z_sm, double z_md, double detector_pitch, int n) {
  Geometry g;
  g.wavelength = wavelength;
  g.z_sample_to_modulator = z_sm;
  g.z_modulator_to_detector = z_md;
  g.detector_pitch = detector_pitch;
  g.sample_plane_pitch = fraunhofer_pitch(wavelength, z_md, n, detector_pitch);
  g.far_field = true;
  return g;
}

void Geometry::validate(int n) const {
  require_positive(wavelength, "wavelength");
  require_positive(z_sample_to_modulator, "z_sample_to_modulator");
  require_positive(z_modulator_to_detector, "z_modulator_to_detector");
  require_positive(detector_pitch, "detector_pitch");
  require_positive(sample_plane_pitch, "sample_plane_pitch");
  if (far_field) {
    const double expected = fraunhofer_pitch(wavelength, z_modulator_to_detector, n, detector_pitch);
    if (std::abs(sample_plane_pitch - expected) > 1e-9 * expected) {
      std::ostringstream msg;
      msg.precision(12);
      msg << "sample_plane_pitch " << sample_plane_pitch << " m is inconsistent with far-field sampling "
          << expected << " m for a " << n << "x" << n << " detector";
      throw PhysicsError(msg.str());
    }
  }
}

double max_unaliased_distance(int n, double pitch, double wavelength) {
  const double ratio = wavelength / (2.0 * pitch);
  if (ratio >= 1.0)
    return 0.0;
  return n * pitch * pitch / wavelength * std::sqrt(1.0 - ratio * ratio);
}

NearPropagator::NearPropagator(Shape shape, double pitch, double distance, double wavelength)
    : shape_(shape), pitch_(pitch), distance_(distance), wavelength_(wavelength), transfer_(shape) {
  require_finite(distance, "propagation distance");
  require_positive(wavelength, "wavelength");
  require_positive(pitch, "pitch");
  const int n_min = std::min(shape.rows, shape.cols);
  needs_band_check_ = std::abs(distance) > max_unaliased_distance(n_min, pitch, wavelength);
  const double df = 1.0 / (std::max(shape.rows, shape.cols) * pitch);
  band_limit_ = 1.0 / (wavelength * std::sqrt(std::pow(2.0 * df * distance, 2) + 1.0));

  const auto fy = fft::centered_frequencies(shape.rows, pitch);
  const auto fx = fft::centered_frequencies(shape.cols, pitch);
  const double k2 = 1.0 / (wavelength * wavelength);
  for (int y = 0; y < shape.rows; ++y)
    for (int x = 0; x < shape.cols; ++x) {
      const double arg = k2 - fy[y] * fy[y] - fx[x] * fx[x];
      transfer_(y, x) = arg > 0.0 ? std::polar(1.0, kTwoPi * distance * std::sqrt(arg)) : cplx{};
    }
}

void NearPropagator::check_bandwidth(const Grid<cplx>& spectrum) const {
  const auto fy = fft::centered_frequencies(shape_.rows, pitch_);
  const auto fx = fft::centered_frequencies(shape_.cols, pitch_);
  double total = 0.0, outside = 0.0;
  for (int y = 0; y < shape_.rows; ++y)
    for (int x = 0; x < shape_.cols; ++x) {
      const double p = std::norm(spectrum(y, x));
      total += p;
      if (std::abs(fy[y]) > band_limit_ || std::abs(fx[x]) > band_limit_)
        outside += p;
    }
  if (total > 0.0 && outside > kBandLeakTolerance * total) {
    std::ostringstream msg;
    msg.precision(6);
    msg << "near-field propagation over " << distance_ << " m aliases the transfer function ("
        << outside / total << " of the power lies beyond the band limit); maximum safe distance is "
        << max_unaliased_distance(std::min(shape_.rows, shape_.cols), pitch_, wavelength_) << " m";
    throw PhysicsError(msg.str());
  }
}

void NearPropagator::forward_inplace(Grid<cplx>& g) const {
  require_same_shape(g.shape(), shape_, "propagate_near");
  if (distance_ == 0.0)
    return;
  fft::centered(g, fft::Direction::Forward);
  if (needs_band_check_)
    check_bandwidth(g);
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] *= transfer_[i];
  fft::centered(g, fft::Direction::Inverse);
}

void NearPropagator::backward_inplace(Grid<cplx>& g) const {
  require_same_shape(g.shape(), shape_, "propagate_near");
  if (distance_ == 0.0)
    return;
  fft::centered(g, fft::Direction::Forward);
  if (needs_band_check_)
    check_bandwidth(g);
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] *= std::conj(transfer_[i]);
  fft::centered(g, fft::Direction::Inverse);
}

ComplexField NearPropagator::forward(const ComplexField& f) const {
  ComplexField out = f;
  forward_inplace(out.grid());
  return out;
}

ComplexField NearPropagator::backward(const ComplexField& f) const {
  ComplexField out = f;
  backward_inplace(out.grid());
  return out;
}

ComplexField propagate_near(const ComplexField& f, double distance, double wavelength) {
  validate_field(f, 16);
  if (!f.all_finite())
    throw PhysicsError("propagate_near: non-finite input");
  return NearPropagator(f.shape(), f.pitch(), distance, wavelength).forward(f);
}

void far_inplace(Grid<cplx>& g) { fft::centered(g, fft::Direction::Forward); }
void far_inverse_inplace(Grid<cplx>& g) { fft::centered(g, fft::Direction::Inverse); }

ComplexField propagate_far(const ComplexField& f, double wavelength, double distance) {
  validate_field(f, 16);
  require_positive(wavelength, "wavelength");
  require_positive(distance, "far-field distance");
  ComplexField out = f;
  far_inplace(out.grid());
  out.set_pitch(wavelength * distance / (f.rows() * f.pitch()));
  out.set_label("detector");
  return out;
}

ComplexField propagate_far_inverse(const ComplexField& f, double wavelength, double distance) {
  validate_field(f, 16);
  require_positive(wavelength, "wavelength");
  require_positive(distance, "far-field distance");
  ComplexField out = f;
  far_inverse_inplace(out.grid());
  out.set_pitch(wavelength * distance / (f.rows() * f.pitch()));
  out.set_label("modulator");
  return out;
}

void fourier_shift_inplace(Grid<cplx>& g, Shift shift) {
  if (shift.dy == 0.0 && shift.dx == 0.0)
    return;
  fft::centered(g, fft::Direction::Forward);
  const int h = g.rows(), w = g.cols();
  std::vector<cplx> ramp_y(h), ramp_x(w);
  for (int y = 0; y < h; ++y)
    ramp_y[y] = std::polar(1.0, -kTwoPi * (y - h / 2) * shift.dy / h);
  for (int x = 0; x < w; ++x)
    ramp_x[x] = std::polar(1.0, -kTwoPi * (x - w / 2) * shift.dx / w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      g(y, x) *= ramp_y[y] * ramp_x[x];
  fft::centered(g, fft::Direction::Inverse);
}

ComplexField fourier_shift(const ComplexField& f, Shift shift) {
  if (std::abs(shift.dy) >= f.rows() / 2.0 || std::abs(shift.dx) >= f.cols() / 2.0)
    throw ConfigError("fourier_shift: shift exceeds half the field extent");
  if (!std::isfinite(shift.dy) || !std::isfinite(shift.dx))
    throw ConfigError("fourier_shift: non-finite shift");
  ComplexField out = f;
  fourier_shift_inplace(out.grid(), shift);
  return out;
}

ComplexField roll(const ComplexField& f, int dy, int dx) {
  ComplexField out(f.shape(), f.pitch(), f.label());
  const int h = f.rows(), w = f.cols();
  for (int y = 0; y < h; ++y) {
    const int sy = ((y - dy) % h + h) % h;
    for (int x = 0; x < w; ++x)
      out(y, x) = f(sy, ((x - dx) % w + w) % w);
  }
  return out;
}

} // namespace sdi
