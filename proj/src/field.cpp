#include "sdi/field.hpp"

#include "sdi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace sdi {

ComplexField::ComplexField(Shape shape, double pitch, std::string label, cplx fill)
    : grid_(shape, fill), pitch_(pitch), label_(std::move(label)) {
  if (shape.rows <= 0 || shape.cols <= 0 || shape.rows % 2 != 0 || shape.cols % 2 != 0) {
    std::ostringstream msg;
    msg << "field shape must be positive and even, got " << shape.rows << "x" << shape.cols;
    throw ConfigError(msg.str());
  }
  set_pitch(pitch);
}

void ComplexField::set_pitch(double pitch) {
  if (!(pitch > 0.0) || !std::isfinite(pitch))
    throw ConfigError("field pitch must be positive and finite");
  pitch_ = pitch;
}

double ComplexField::power() const {
  double s = 0.0;
  for (const auto& v : values())
    s += std::norm(v);
  return s;
}

double ComplexField::max_abs2() const {
  double m = 0.0;
  for (const auto& v : values())
    m = std::max(m, std::norm(v));
  return m;
}

bool ComplexField::all_finite() const {
  return std::all_of(values().begin(), values().end(),
                     [](const cplx& v) { return std::isfinite(v.real()) && std::isfinite(v.imag()); });
}

ComplexField& ComplexField::operator*=(const ComplexField& other) {
  require_same_shape(shape(), other.shape(), "field product");
  for (std::size_t i = 0; i < size(); ++i)
    grid_[i] *= other[i];
  return *this;
}

ComplexField& ComplexField::operator*=(cplx scalar) {
  for (auto& v : values())
    v *= scalar;
  return *this;
}

ComplexField& ComplexField::operator+=(const ComplexField& other) {
  require_same_shape(shape(), other.shape(), "field sum");
  for (std::size_t i = 0; i < size(); ++i)
    grid_[i] += other[i];
  return *this;
}

ComplexField operator*(ComplexField a, const ComplexField& b) {
  a *= b;
  return a;
}

ComplexField conj(ComplexField f) {
  for (auto& v : f.values())
    v = std::conj(v);
  return f;
}

RealGrid abs(const ComplexField& f) {
  RealGrid out(f.shape());
  for (std::size_t i = 0; i < f.size(); ++i)
    out[i] = std::abs(f[i]);
  return out;
}

RealGrid abs2(const ComplexField& f) {
  RealGrid out(f.shape());
  for (std::size_t i = 0; i < f.size(); ++i)
    out[i] = std::norm(f[i]);
  return out;
}

void validate_field(const ComplexField& f, int min_side) {
  if (f.rows() < min_side || f.cols() < min_side) {
    std::ostringstream msg;
    msg << "field " << f.rows() << "x" << f.cols() << " is smaller than the minimum " << min_side << "x"
        << min_side;
    throw ConfigError(msg.str());
  }
  if (!f.all_finite())
    throw ConfigError("field '" + f.label() + "' contains non-finite values");
}

void require_same_shape(Shape a, Shape b, const char* what) {
  if (a == b)
    return;
  std::ostringstream msg;
  msg << what << ": shape mismatch " << a.rows << "x" << a.cols << " vs " << b.rows << "x" << b.cols;
  throw ConfigError(msg.str());
}

namespace {

void check_even(Shape s) {
  if (s.rows <= 0 || s.cols <= 0 || s.rows % 2 || s.cols % 2)
    throw ConfigError("target shape must be positive and even");
}

} // namespace

ComplexField embed_center(const ComplexField& f, Shape target) {
  check_even(target);
  if (target.rows < f.rows() || target.cols < f.cols())
    throw ConfigError("embed_center: target smaller than source");
  ComplexField out(target, f.pitch(), f.label());
  const int oy = target.rows / 2 - f.rows() / 2;
  const int ox = target.cols / 2 - f.cols() / 2;
  for (int y = 0; y < f.rows(); ++y)
    std::copy_n(&f(y, 0), f.cols(), &out(y + oy, ox));
  return out;
}

ComplexField crop_center(const ComplexField& f, Shape target) {
  check_even(target);
  if (target.rows > f.rows() || target.cols > f.cols())
    throw ConfigError("crop_center: target larger than source");
  ComplexField out(target, f.pitch(), f.label());
  const int oy = f.rows() / 2 - target.rows / 2;
  const int ox = f.cols() / 2 - target.cols / 2;
  for (int y = 0; y < target.rows; ++y)
    std::copy_n(&f(y + oy, ox), target.cols, &out(y, 0));
  return out;
}

ComplexField extract_window(const ComplexField& f, int cy, int cx, Shape shape, cplx outside) {
  ComplexField out(shape, f.pitch(), f.label(), outside);
  const int y0 = cy - shape.rows / 2;
  const int x0 = cx - shape.cols / 2;
  for (int y = 0; y < shape.rows; ++y) {
    const int sy = y0 + y;
    if (sy < 0 || sy >= f.rows())
      continue;
    for (int x = 0; x < shape.cols; ++x) {
      const int sx = x0 + x;
      if (sx >= 0 && sx < f.cols())
        out(y, x) = f(sy, sx);
    }
  }
  return out;
}

RealGrid disk_mask(Shape shape, double radius_px, Shift center) {
  RealGrid mask(shape);
  const double cy = shape.rows / 2 + center.dy;
  const double cx = shape.cols / 2 + center.dx;
  const double r2 = radius_px * radius_px;
  for (int y = 0; y < shape.rows; ++y)
    for (int x = 0; x < shape.cols; ++x) {
      const double dy = y - cy;
      const double dx = x - cx;
      mask(y, x) = (dy * dy + dx * dx <= r2) ? 1.0 : 0.0;
    }
  return mask;
}

RealGrid soft_disk_mask(Shape shape, double radius_px, double edge_px, Shift center) {
  if (edge_px <= 0.0)
    return disk_mask(shape, radius_px, center);
  RealGrid mask(shape);
  const double cy = shape.rows / 2 + center.dy;
  const double cx = shape.cols / 2 + center.dx;
  const double inner = radius_px - edge_px;
  for (int y = 0; y < shape.rows; ++y)
    for (int x = 0; x < shape.cols; ++x) {
      const double r = std::hypot(y - cy, x - cx);
      if (r <= inner)
        mask(y, x) = 1.0;
      else if (r < radius_px)
        mask(y, x) = 0.5 * (1.0 + std::cos(std::numbers::pi * (r - inner) / edge_px));
    }
  return mask;
}

double masked_power(const ComplexField& f, const RealGrid& mask) {
  require_same_shape(f.shape(), mask.shape(), "masked_power");
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i)
    s += mask[i] * std::norm(f[i]);
  return s;
}

double power_radius(const ComplexField& f, double fraction) {
  std::vector<std::pair<double, double>> samples;
  samples.reserve(f.size());
  const double cy = f.rows() / 2;
  const double cx = f.cols() / 2;
  double total = 0.0;
  for (int y = 0; y < f.rows(); ++y)
    for (int x = 0; x < f.cols(); ++x) {
      const double p = std::norm(f(y, x));
      total += p;
      samples.emplace_back(std::hypot(y - cy, x - cx), p);
    }
  if (total <= 0.0)
    return 0.0;
  std::sort(samples.begin(), samples.end());
  double acc = 0.0;
  for (const auto& [r, p] : samples) {
    acc += p;
    if (acc >= fraction * total)
      return r;
  }
  return samples.back().first;
}

Shift centroid(const RealGrid& intensity) {
  double s = 0.0, sy = 0.0, sx = 0.0;
  for (int y = 0; y < intensity.rows(); ++y)
    for (int x = 0; x < intensity.cols(); ++x) {
      const double w = intensity(y, x);
      s += w;
      sy += w * y;
      sx += w * x;
    }
  if (s <= 0.0)
    return {};
  return {sy / s - intensity.rows() / 2, sx / s - intensity.cols() / 2};
}

} // namespace sdi
