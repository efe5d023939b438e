#pragma once

#include "sdi/engine.hpp"
#include "sdi/fft.hpp"
#include "sdi/propagate.hpp"
#include "sdi/random.hpp"
#include "sdi/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <string>

namespace sdi::test {

inline ComplexField random_field(Shape shape, std::uint64_t seed, double pitch = 1e-6) {
  std::mt19937_64 rng(seed);
  ComplexField f(shape, pitch);
  for (auto& v : f.values())
    v = cplx(standard_normal(rng), standard_normal(rng));
  return f;
}

inline RealGrid random_real(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RealGrid g(shape);
  for (auto& v : g.values())
    v = uniform01(rng);
  return g;
}

// Dense centered unitary DFT: X[k] = n^-1/2 sum_j x[j] exp(-+2 pi i (k - n/2)(j - n/2) / n) per axis.
inline ComplexField dense_centered_dft(const ComplexField& f, int sign) {
  const int r = f.rows(), c = f.cols();
  ComplexField out(f.shape(), f.pitch());
  for (int ky = 0; ky < r; ++ky)
    for (int kx = 0; kx < c; ++kx) {
      cplx acc{};
      for (int y = 0; y < r; ++y)
        for (int x = 0; x < c; ++x) {
          const double ph = sign * 2.0 * std::numbers::pi *
                            (static_cast<double>((ky - r / 2) * (y - r / 2)) / r +
                             static_cast<double>((kx - c / 2) * (x - c / 2)) / c);
          acc += f(y, x) * std::polar(1.0, ph);
        }
      out(ky, kx) = acc / std::sqrt(static_cast<double>(r * c));
    }
  return out;
}

inline double max_abs_diff(const ComplexField& a, const ComplexField& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double norm2(const ComplexField& a) { return std::sqrt(a.power()); }

/// |<a, b>| / (||a|| ||b||) over the mask.
inline double correlation(const ComplexField& a, const ComplexField& b, const RealGrid& mask) {
  cplx inner{};
  double aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inner += mask[i] * std::conj(a[i]) * b[i];
    aa += mask[i] * std::norm(a[i]);
    bb += mask[i] * std::norm(b[i]);
  }
  return std::abs(inner) / std::sqrt(aa * bb);
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sdi_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Optical desk geometry: 632.8 nm, 11.5 mm sample-modulator, 30 mm to a
/// 6.5 um-pixel detector, 128^2 frames, 1 mm aperture 1 mm upstream.
struct Scenario {
  Geometry geometry;
  ProbeSpec probe_spec;
  ComplexField probe;
  ComplexField sample;
  ComplexField modulator;
  ScanPlan plan;
  ScanDataset dataset;
};

inline Scenario make_scenario(int rows, int cols, double overlap, DriftModel drift = {},
                              double photons = std::numeric_limits<double>::infinity()) {
  Scenario s;
  const int n = 128;
  s.geometry = Geometry::far_field_from(632.8e-9, 11.5e-3, 30e-3, 6.5e-6, n);
  s.probe_spec.diameter = 1e-3;
  s.probe_spec.defocus = 1e-3;
  s.probe = generate_probe({n, n}, s.geometry.sample_plane_pitch, s.geometry.wavelength, s.probe_spec);
  SampleSpec ss;
  ss.seed = 11;
  s.sample = generate_sample(ss, s.geometry.sample_plane_pitch);
  ModulatorSpec ms;
  ms.seed = 5;
  s.modulator = generate_modulator({n, n}, s.geometry.sample_plane_pitch, ms);
  s.plan = make_scan_plan(rows, cols, step_for_overlap(overlap, probe_footprint_px(s.probe)), 2.0, 3);
  SynthesisOptions opts;
  opts.photons = photons;
  opts.seed = 17;
  s.dataset = synthesize_dataset(s.sample, s.probe, s.modulator, s.plan, drift, s.geometry, opts);
  s.dataset.probe_spec = s.probe_spec;
  return s;
}

inline int signed_index(int k, int n) { return k < n / 2 ? k : k - n; }

/// |sum_r conj(f(r - s)) g(r)| over every integer circular shift; returns the argmax.
inline Shift brute_force_argmax(const ComplexField& f, const ComplexField& g) {
  const int h = f.rows(), w = f.cols();
  double best = -1.0;
  Shift arg;
  for (int sy = 0; sy < h; ++sy)
    for (int sx = 0; sx < w; ++sx) {
      cplx acc{};
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          acc += std::conj(f((y - sy + h) % h, (x - sx + w) % w)) * g(y, x);
      if (std::abs(acc) > best) {
        best = std::abs(acc);
        arg = {static_cast<double>(signed_index(sy, h)), static_cast<double>(signed_index(sx, w))};
      }
    }
  return arg;
}

/// Smooth random texture: low-passed noise, so correlation peaks are broad
/// enough for sub-pixel refinement to matter.
inline ComplexField texture(Shape shape, std::uint64_t seed) {
  ComplexField f = random_field(shape, seed);
  fft::centered(f, fft::Direction::Forward);
  for (int y = 0; y < f.rows(); ++y)
    for (int x = 0; x < f.cols(); ++x) {
      const double r2 = std::pow(y - f.rows() / 2, 2) + std::pow(x - f.cols() / 2, 2);
      f(y, x) *= std::exp(-r2 / (2.0 * 8.0 * 8.0));
    }
  fft::centered(f, fft::Direction::Inverse);
  return f;
}

} // namespace sdi::test
