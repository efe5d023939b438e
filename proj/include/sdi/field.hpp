#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sdi {

using cplx = std::complex<double>;

struct Shape {
  int rows = 0;
  int cols = 0;
  bool operator==(const Shape&) const = default;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

struct Shift {
  double dy = 0.0;
  double dx = 0.0;
  Shift operator+(Shift o) const { return {dy + o.dy, dx + o.dx}; }
  Shift operator-(Shift o) const { return {dy - o.dy, dx - o.dx}; }
  Shift operator-() const { return {-dy, -dx}; }
  Shift operator*(double s) const { return {dy * s, dx * s}; }
};

/// Dense row-major 2-D array.
template <typename T>
class Grid {
public:
  Grid() = default;
  Grid(Shape shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {}
  Grid(int rows, int cols, T fill = T{}) : Grid(Shape{rows, cols}, fill) {}

  Shape shape() const { return shape_; }
  int rows() const { return shape_.rows; }
  int cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int y, int x) { return data_[static_cast<std::size_t>(y) * shape_.cols + x]; }
  const T& operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * shape_.cols + x]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool operator==(const Grid&) const = default;

private:
  Shape shape_{};
  std::vector<T> data_;
};

using RealGrid = Grid<double>;

/// Complex wavefield sampled on a square pixel grid. Dimensions are even so
/// that pixel (rows/2, cols/2) is an unambiguous optical axis.
class ComplexField {
public:
  ComplexField() = default;
  ComplexField(Shape shape, double pitch, std::string label = {}, cplx fill = {});
  ComplexField(int rows, int cols, double pitch, std::string label = {}, cplx fill = {})
      : ComplexField(Shape{rows, cols}, pitch, std::move(label), fill) {}

  Shape shape() const { return grid_.shape(); }
  int rows() const { return grid_.rows(); }
  int cols() const { return grid_.cols(); }
  std::size_t size() const { return grid_.size(); }
  double pitch() const { return pitch_; }
  void set_pitch(double pitch);
  const std::string& label() const { return label_; }
  void set_label(std::string label) { label_ = std::move(label); }

  cplx& operator()(int y, int x) { return grid_(y, x); }
  const cplx& operator()(int y, int x) const { return grid_(y, x); }
  cplx& operator[](std::size_t i) { return grid_[i]; }
  const cplx& operator[](std::size_t i) const { return grid_[i]; }

  std::span<cplx> values() { return grid_.values(); }
  std::span<const cplx> values() const { return grid_.values(); }
  cplx* data() { return grid_.data(); }
  const cplx* data() const { return grid_.data(); }

  Grid<cplx>& grid() { return grid_; }
  const Grid<cplx>& grid() const { return grid_; }

  double power() const;
  double max_abs2() const;
  bool all_finite() const;

  ComplexField& operator*=(const ComplexField& other);
  ComplexField& operator*=(cplx scalar);
  ComplexField& operator+=(const ComplexField& other);

private:
  Grid<cplx> grid_;
  double pitch_ = 1.0;
  std::string label_;
};

ComplexField operator*(ComplexField a, const ComplexField& b);
ComplexField conj(ComplexField f);
RealGrid abs(const ComplexField& f);
RealGrid abs2(const ComplexField& f);

/// Throws ConfigError unless rows/cols are even, at least `min_side`, and
/// pitch is positive and finite.
void validate_field(const ComplexField& f, int min_side = 2);
void require_same_shape(Shape a, Shape b, const char* what);

/// Zero-pad so the source center pixel lands on the target center pixel.
ComplexField embed_center(const ComplexField& f, Shape target);
/// Extract the centered window of `target` shape.
ComplexField crop_center(const ComplexField& f, Shape target);

/// Extract a window of `shape` whose center pixel sits at (cy, cx) in `f`.
/// Pixels outside `f` are filled with `outside`.
ComplexField extract_window(const ComplexField& f, int cy, int cx, Shape shape, cplx outside = {});

/// Binary disk mask centered on (rows/2 + cy, cols/2 + cx).
RealGrid disk_mask(Shape shape, double radius_px, Shift center = {});

/// Disk whose edge falls from 1 to 0 over `edge_px` with a raised cosine
/// ending at `radius_px`.
RealGrid soft_disk_mask(Shape shape, double radius_px, double edge_px, Shift center = {});

/// Sum |f|^2 weighted by mask (mask may be soft).
double masked_power(const ComplexField& f, const RealGrid& mask);

/// Radius (px, about the grid center) that encloses `fraction` of the power.
double power_radius(const ComplexField& f, double fraction);

/// Intensity-weighted centroid relative to the grid center.
Shift centroid(const RealGrid& intensity);

} // namespace sdi
