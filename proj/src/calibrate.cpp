#include "sdi/calibrate.hpp"

#include "sdi/errors.hpp"
#include "sdi/fft.hpp"

#include <algorithm>
#include <cmath>

namespace sdi {

void CalibrationPlan::validate() const {
  if (positions.size() < 3)
    throw ConfigError("calibration needs at least 3 diffuser positions");
  if (!(probe_prior.power() > 0.0))
    throw ConfigError("calibration probe prior is zero");
}

ScanDataset synthesize_calibration_dataset(const ComplexField& probe, const ComplexField& diffuser,
                                           const ComplexField& modulator, const CalibrationPlan& plan,
                                           const Geometry& geometry, const SynthesisOptions& options) {
  if (plan.positions.size() < 3)
    throw ConfigError("calibration needs at least 3 diffuser positions");
  ScanPlan scan;
  scan.positions = plan.positions;
  return synthesize_dataset(diffuser, probe, modulator, scan, DriftModel{}, geometry, options);
}

CalibrationResult run_calibration(const ScanDataset& ds, const ComplexField& probe_prior, ReconConfig config) {
  config.mode = ReconMode::Calibrate;
  config.update_probe = false;
  config.update_modulator = true;
  InitOptions init;
  init.probe = probe_prior;
  init.modulator = ComplexField(ds.frame_shape(), ds.geometry.sample_plane_pitch, "modulator", cplx(1.0));
  ReconState state = reconstruct(ds, config, init);
  CalibrationResult out;
  out.modulator = std::move(state.modulator);
  out.modulator.set_label("modulator");
  out.diffusers = std::move(state.objects);
  out.residuals = std::move(state.residuals);
  if (!out.residuals.empty() && out.residuals.back() > 0.1)
    out.warning = "calibration residual plateaued above 0.1; the modulator estimate is likely unreliable";
  return out;
}

ModulatorScore score_modulator(const ComplexField& recovered, const ComplexField& truth, const RealGrid& mask) {
  require_same_shape(recovered.shape(), truth.shape(), "score_modulator");
  require_same_shape(recovered.shape(), mask.shape(), "score_modulator mask");
  cplx inner{};
  double tt = 0.0, rr = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double w = mask[i];
    wsum += w;
    inner += w * std::conj(truth[i]) * recovered[i];
    tt += w * std::norm(truth[i]);
    rr += w * std::norm(recovered[i]);
  }
  if (!(wsum > 0.0))
    throw ConfigError("score_modulator: empty mask");
  ModulatorScore s;
  if (tt > 0.0 && rr > 0.0)
    s.rho = std::abs(inner) / std::sqrt(tt * rr);
  const cplx ref = std::abs(inner) > 0.0 ? std::conj(inner) / std::abs(inner) : cplx(1.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = std::arg(recovered[i] * std::conj(truth[i]) * ref);
    acc += mask[i] * d * d;
  }
  s.phase_rms = std::sqrt(acc / wsum);
  return s;
}

double estimate_grating_period(const ComplexField& modulator, const RealGrid& mask, double min_cycles) {
  require_same_shape(modulator.shape(), mask.shape(), "estimate_grating_period");
  cplx mean{};
  double wsum = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mean += mask[i] * modulator[i];
    wsum += mask[i];
  }
  if (!(wsum > 0.0))
    throw ConfigError("estimate_grating_period: empty mask");
  mean /= wsum;
  constexpr int kPad = 8;
  const int h = modulator.rows(), w = modulator.cols();
  Grid<cplx> g(h * kPad, w * kPad);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      g(y, x) = mask[i] * (modulator[i] - mean);
    }
  fft::transform(g, fft::Direction::Forward);
  const int H = g.rows(), W = g.cols();
  auto freq = [](int k, int n) { return k < n / 2 ? k : k - n; };
  auto mag = [&](int y, int x) { return std::abs(g((y % H + H) % H, (x % W + W) % W)); };
  int by = 0, bx = 0;
  double best = -1.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double fy = static_cast<double>(freq(y, H)) / kPad, fx = static_cast<double>(freq(x, W)) / kPad;
      if (std::hypot(fy, fx) < min_cycles)
        continue;
      const double v = std::abs(g(y, x));
      if (v > best) {
        best = v;
        by = y;
        bx = x;
      }
    }
  if (best <= 0.0)
    throw ConfigError("estimate_grating_period: no spectral peak");
  auto vertex = [](double a, double b, double c) {
    const double den = a - 2.0 * b + c;
    return den != 0.0 ? 0.5 * (a - c) / den : 0.0;
  };
  const double ky = freq(by, H) + vertex(mag(by - 1, bx), best, mag(by + 1, bx));
  const double kx = freq(bx, W) + vertex(mag(by, bx - 1), best, mag(by, bx + 1));
  // cycles per pixel
  const double f = std::hypot(ky / H, kx / W);
  return 1.0 / f;
}

RealGrid illuminated_region(const ComplexField& probe, double fraction) {
  const double peak = probe.max_abs2();
  RealGrid out(probe.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::norm(probe[i]) > fraction * peak ? 1.0 : 0.0;
  return out;
}

} // namespace sdi
