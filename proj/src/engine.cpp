#include "sdi/engine.hpp"

#include "sdi/errors.hpp"
#include "sdi/parallel.hpp"
#include "sdi/propagate.hpp"
#include "sdi/registration.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sdi {

const char* mode_name(ReconMode mode) {
  switch (mode) {
  case ReconMode::Separated:
    return "separated";
  case ReconMode::ExitWave:
    return "exitwave";
  case ReconMode::Calibrate:
    return "calibrate";
  }
  return "";
}

ReconMode parse_mode(const std::string& name) {
  if (name == "separated")
    return ReconMode::Separated;
  if (name == "exitwave")
    return ReconMode::ExitWave;
  if (name == "calibrate")
    return ReconMode::Calibrate;
  throw ConfigError("unknown reconstruction mode '" + name + "' (separated, exitwave, calibrate)");
}

void ReconConfig::validate() const {
  if (iterations < 1)
    throw ConfigError("iterations must be at least 1");
  for (double b : {beta_object, beta_probe, beta_modulator})
    if (!(b > 0.0 && b <= 2.0))
      throw ConfigError("step sizes must lie in (0, 2]");
  if (!(support.radius_px >= 0.0) || !std::isfinite(support.radius_px))
    throw ConfigError("support radius must be non-negative");
  if (!(support.margin_fraction > -1.0) || !std::isfinite(support.margin_fraction))
    throw ConfigError("support margin must exceed -1");
  if (!(support.outside_feedback >= 0.0 && support.outside_feedback < 1.0))
    throw ConfigError("support outside_feedback must lie in [0, 1)");
  if (!(division_epsilon >= 0.0) || !std::isfinite(division_epsilon))
    throw ConfigError("division_epsilon must be non-negative");
  if (mode == ReconMode::Calibrate && update_probe)
    throw ConfigError("calibrate mode keeps the probe fixed (update_probe must be false)");
  if (early_stop_window < 1 || !(early_stop_tolerance >= 0.0))
    throw ConfigError("early stop window must be >= 1 and tolerance >= 0");
}

double probe_equivalent_radius(const ComplexField& probe) { return power_radius(probe, 0.9) / std::sqrt(0.9); }

ComplexField ideal_probe(const ScanDataset& ds) {
  if (!ds.probe_spec)
    throw ConfigError("dataset manifest has no probe description; supply a probe file");
  ComplexField p = generate_probe(ds.frame_shape(), ds.geometry.sample_plane_pitch, ds.geometry.wavelength,
                                  *ds.probe_spec);
  double brightest = 0.0;
  for (const auto& f : ds.frames) {
    double s = 0.0;
    for (double v : f.values())
      s += v;
    brightest = std::max(brightest, s);
  }
  if (brightest <= 0.0)
    throw ConfigError("dataset frames carry no intensity");
  p *= cplx(std::sqrt(brightest / p.power()));
  p.set_label("probe");
  return p;
}

namespace {

bool separated_like(ReconMode m) { return m != ReconMode::ExitWave; }

Grid<cplx> shifted_probe(const ComplexField& probe, const std::vector<Shift>& drift, std::size_t n) {
  Grid<cplx> g = probe.grid();
  if (!drift.empty() && (drift[n].dy != 0.0 || drift[n].dx != 0.0))
    fourier_shift_inplace(g, drift[n]);
  return g;
}

double max_norm(const Grid<cplx>& g) {
  double m = 0.0;
  for (const auto& v : g.values())
    m = std::max(m, std::norm(v));
  return m;
}

bool finite(const Grid<cplx>& g) {
  return std::all_of(g.values().begin(), g.values().end(),
                     [](const cplx& v) { return std::isfinite(v.real()) && std::isfinite(v.imag()); });
}

[[noreturn]] void diverged(std::size_t frame, const char* stage) {
  std::ostringstream msg;
  msg << "non-finite field in frame " << frame << " at stage '" << stage << "'";
  throw DivergenceError(msg.str());
}

void check_state_shapes(const ReconState& state, const ScanDataset& ds, ReconMode mode) {
  const Shape shape = ds.frame_shape();
  require_same_shape(state.probe.shape(), shape, "probe vs frames");
  require_same_shape(state.modulator.shape(), shape, "modulator vs frames");
  if (separated_like(mode)) {
    if (state.objects.size() != ds.size())
      throw ConfigError("state object count does not match the dataset");
  } else if (state.exit_waves.size() != ds.size()) {
    throw ConfigError("state exit-wave count does not match the dataset");
  }
  if (!state.drift.empty() && state.drift.size() != ds.size())
    throw ConfigError("state drift count does not match the dataset");
}

// Sample-plane exit wave of frame n under the current model.
Grid<cplx> model_exit_wave(const ReconState& state, ReconMode mode, std::size_t n) {
  if (!separated_like(mode))
    return state.exit_waves[n].grid();
  Grid<cplx> psi = shifted_probe(state.probe, state.drift, n);
  const auto& o = state.objects[n];
  for (std::size_t i = 0; i < psi.size(); ++i)
    psi[i] *= o[i];
  return psi;
}

struct Misfit {
  double num = 0.0;
  double den = 0.0;
};

Misfit misfit(const Grid<cplx>& wave, const RealGrid& intensity) {
  Misfit m;
  for (std::size_t i = 0; i < wave.size(); ++i) {
    const double d = std::abs(wave[i]) - std::sqrt(intensity[i]);
    m.num += d * d;
    m.den += intensity[i];
  }
  return m;
}

double ratio(const std::vector<Misfit>& parts) {
  double num = 0.0, den = 0.0;
  for (const auto& p : parts) {
    num += p.num;
    den += p.den;
  }
  return den > 0.0 ? num / den : 0.0;
}

} // namespace

ReconState init_state(const ScanDataset& ds, const ReconConfig& config, const InitOptions& init) {
  config.validate();
  ds.validate();
  const Shape shape = ds.frame_shape();
  ReconState state;
  state.probe = init.probe ? *init.probe : ideal_probe(ds);
  require_same_shape(state.probe.shape(), shape, "probe vs frames");

  if (init.modulator)
    state.modulator = *init.modulator;
  else if (ds.truth)
    state.modulator = ds.truth->modulator;
  else if (config.update_modulator || config.mode == ReconMode::Calibrate)
    state.modulator = ComplexField(shape, ds.geometry.sample_plane_pitch, "modulator", cplx(1.0));
  else
    throw ConfigError("no modulator available: run the 'calibrate' command first and pass its modulator.cfield");
  require_same_shape(state.modulator.shape(), shape, "modulator vs frames");

  state.support_radius = config.support.radius_px > 0.0
                             ? config.support.radius_px
                             : probe_equivalent_radius(state.probe) * (1.0 + config.support.margin_fraction);
  state.support = disk_mask(shape, state.support_radius);

  state.drift = init.drift;
  if (!state.drift.empty() && state.drift.size() != ds.size())
    throw ConfigError("initial drift count does not match the dataset");

  const std::size_t n = ds.size();
  state.objects.clear();
  state.exit_waves.clear();
  if (separated_like(config.mode))
    state.objects.assign(n, ComplexField(shape, state.probe.pitch(), "object", cplx(1.0)));
  state.exit_waves.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    ComplexField psi(shape, state.probe.pitch(), "exit_wave");
    psi.grid() = shifted_probe(state.probe, state.drift, k);
    if (!separated_like(config.mode))
      for (std::size_t i = 0; i < psi.size(); ++i)
        psi[i] *= state.support[i];
    state.exit_waves.push_back(std::move(psi));
  }
  return state;
}

void modulus_project_inplace(Grid<cplx>& wave, const RealGrid& intensity, const RealGrid* valid_mask) {
  require_same_shape(wave.shape(), intensity.shape(), "modulus_project");
  if (valid_mask)
    require_same_shape(wave.shape(), valid_mask->shape(), "modulus_project mask");
  for (std::size_t i = 0; i < wave.size(); ++i) {
    if (valid_mask && (*valid_mask)[i] == 0.0)
      continue;
    if (!(intensity[i] >= 0.0))
      throw ConfigError("modulus_project: negative or non-finite intensity");
    const double a = std::abs(wave[i]);
    const double target = std::sqrt(intensity[i]);
    wave[i] = a < 1e-15 ? cplx(target) : wave[i] * (target / a);
  }
}

ComplexField modulus_project(const ComplexField& wave, const RealGrid& intensity, const RealGrid* valid_mask) {
  ComplexField out = wave;
  modulus_project_inplace(out.grid(), intensity, valid_mask);
  return out;
}

double run_iteration(ReconState& state, const ScanDataset& ds, const ReconConfig& config) {
  check_state_shapes(state, ds, config.mode);
  const Shape shape = ds.frame_shape();
  const std::size_t n_frames = ds.size();
  const NearPropagator near(shape, ds.geometry.sample_plane_pitch, ds.geometry.z_sample_to_modulator,
                            ds.geometry.wavelength);
  const bool separated = separated_like(config.mode);
  const bool want_dm = config.update_modulator;
  const bool want_dp = separated && config.update_probe;
  const auto& m = state.modulator.grid();
  const double m_floor = config.division_epsilon * max_norm(m);
  const double alpha = config.support.outside_feedback;

  std::vector<Misfit> parts(n_frames);
  std::vector<Grid<cplx>> dm(want_dm ? n_frames : 0), dp(want_dp ? n_frames : 0);

  parallel_for_each_index(n_frames, [&](std::size_t n) {
    // (a) forward model
    const Grid<cplx> probe_n = separated ? shifted_probe(state.probe, state.drift, n) : Grid<cplx>{};
    Grid<cplx> psi = model_exit_wave(state, config.mode, n);
    Grid<cplx> phi = psi;
    near.forward_inplace(phi);
    Grid<cplx> chi = phi;
    for (std::size_t i = 0; i < chi.size(); ++i)
      chi[i] *= m[i];
    far_inplace(chi);
    if (!finite(chi))
      diverged(n, "forward");
    parts[n] = misfit(chi, ds.frames[n]);

    // (b) modulus constraint
    modulus_project_inplace(chi, ds.frames[n], nullptr);
    far_inverse_inplace(chi);

    // (c) modulator increment
    if (want_dm) {
      Grid<cplx> d(shape);
      const double scale = 1.0 / std::max(max_norm(phi), 1e-300);
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = std::conj(phi[i]) * (chi[i] - m[i] * phi[i]) * scale;
      dm[n] = std::move(d);
    }

    // (d) undo modulation as a regularized correction of phi
    for (std::size_t i = 0; i < phi.size(); ++i)
      phi[i] += std::conj(m[i]) * (chi[i] - m[i] * phi[i]) / (std::norm(m[i]) + m_floor);
    near.backward_inplace(phi);
    if (!finite(phi))
      diverged(n, "back-propagation");

    // (e) object / probe increments or support constraint
    if (separated) {
      auto& o = state.objects[n];
      const double p_scale = 1.0 / std::max(max_norm(probe_n), 1e-300);
      if (want_dp) {
        double o_max = 0.0;
        for (const auto& v : o.values())
          o_max = std::max(o_max, std::norm(v));
        Grid<cplx> d(shape);
        for (std::size_t i = 0; i < d.size(); ++i)
          d[i] = std::conj(o[i]) * (phi[i] - psi[i]) / std::max(o_max, 1e-300);
        if (!state.drift.empty())
          fourier_shift_inplace(d, -state.drift[n]);
        dp[n] = std::move(d);
      }
      for (std::size_t i = 0; i < psi.size(); ++i)
        o[i] += config.beta_object * std::conj(probe_n[i]) * (phi[i] - psi[i]) * p_scale;
    } else {
      auto& w = state.exit_waves[n];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double s = state.support[i];
        w[i] = (s + alpha * (1.0 - s)) * phi[i];
      }
    }
  });

  // Averaged shared updates, reduced in frame order.
  if (want_dm) {
    auto& mod = state.modulator.grid();
    const double w = config.beta_modulator / static_cast<double>(n_frames);
    Grid<cplx> sum(shape);
    for (const auto& d : dm)
      for (std::size_t i = 0; i < sum.size(); ++i)
        sum[i] += d[i];
    for (std::size_t i = 0; i < mod.size(); ++i) {
      mod[i] += w * sum[i];
      if (config.unit_modulator) {
        const double a = std::abs(mod[i]);
        mod[i] = a > 0.0 ? mod[i] / a : cplx(1.0);
      }
    }
  }
  if (want_dp) {
    auto& p = state.probe.grid();
    const double w = config.beta_probe / static_cast<double>(n_frames);
    Grid<cplx> sum(shape);
    for (const auto& d : dp)
      for (std::size_t i = 0; i < sum.size(); ++i)
        sum[i] += d[i];
    for (std::size_t i = 0; i < p.size(); ++i)
      p[i] += w * sum[i];
  }

  const double r = ratio(parts);
  if (!std::isfinite(r))
    throw DivergenceError("data residual became non-finite");
  state.residuals.push_back(r);
  return r;
}

ReconState reconstruct(const ScanDataset& ds, const ReconConfig& config, const InitOptions& init) {
  ReconState state = init_state(ds, config, init);
  for (int it = 0; it < config.iterations; ++it) {
    run_iteration(state, ds, config);
    const auto& r = state.residuals;
    if (config.early_stop && static_cast<int>(r.size()) > config.early_stop_window) {
      const double before = r[r.size() - 1 - config.early_stop_window];
      if (before - r.back() < config.early_stop_tolerance * before)
        break;
    }
  }
  if (separated_like(config.mode))
    for (std::size_t n = 0; n < ds.size(); ++n)
      state.exit_waves[n].grid() = model_exit_wave(state, config.mode, n);
  return state;
}

double data_residual(const ReconState& state, const ScanDataset& ds, ReconMode mode) {
  check_state_shapes(state, ds, mode);
  const NearPropagator near(ds.frame_shape(), ds.geometry.sample_plane_pitch, ds.geometry.z_sample_to_modulator,
                            ds.geometry.wavelength);
  std::vector<Misfit> parts(ds.size());
  parallel_for_each_index(ds.size(), [&](std::size_t n) {
    Grid<cplx> w = model_exit_wave(state, mode, n);
    near.forward_inplace(w);
    for (std::size_t i = 0; i < w.size(); ++i)
      w[i] *= state.modulator[i];
    far_inplace(w);
    parts[n] = misfit(w, ds.frames[n]);
  });
  return ratio(parts);
}

// ---------------------------------------------------------------- probe drift

namespace {

ComplexField magnitude(const ComplexField& f, const RealGrid& support) {
  ComplexField out(f.shape(), f.pitch(), f.label());
  for (std::size_t i = 0; i < f.size(); ++i)
    out[i] = std::abs(f[i]) * (support.empty() ? 1.0 : support[i]);
  return out;
}

} // namespace

DriftEstimate estimate_probe_drift(const std::vector<ComplexField>& exit_waves, const RealGrid& support,
                                   double min_confidence) {
  if (exit_waves.empty())
    throw ConfigError("estimate_probe_drift: no exit waves");
  const std::size_t n = exit_waves.size();
  std::vector<ComplexField> mags(n);
  parallel_for_each_index(n, [&](std::size_t k) { mags[k] = magnitude(exit_waves[k], support); });

  RegisterConfig reg;
  reg.upsample = 50;
  auto align_all = [&](const ComplexField& ref, std::vector<Shift>& shifts, std::vector<double>& conf) {
    shifts.assign(n, Shift{});
    conf.assign(n, 0.0);
    parallel_for_each_index(n, [&](std::size_t k) {
      const auto m = subpixel_shift_estimate(ref, mags[k], reg);
      shifts[k] = m.delta;
      conf[k] = m.confidence;
    });
  };

  std::vector<Shift> pass1;
  std::vector<double> conf1;
  align_all(mags[0], pass1, conf1);

  ComplexField mean(mags[0].shape(), mags[0].pitch(), "mean_magnitude");
  std::vector<ComplexField> aligned(n);
  parallel_for_each_index(n, [&](std::size_t k) { aligned[k] = fourier_shift(mags[k], -pass1[k]); });
  for (const auto& a : aligned)
    mean += a;
  mean *= cplx(1.0 / static_cast<double>(n));

  DriftEstimate est;
  align_all(mean, est.drift, est.confidence);

  std::vector<int> good;
  for (std::size_t k = 0; k < n; ++k) {
    if (est.confidence[k] >= min_confidence)
      good.push_back(static_cast<int>(k));
    else
      est.flagged.push_back(static_cast<int>(k));
  }
  if (!good.empty())
    for (int k : est.flagged) {
      const auto next = std::lower_bound(good.begin(), good.end(), k);
      if (next == good.begin()) {
        est.drift[k] = est.drift[*next];
      } else if (next == good.end()) {
        est.drift[k] = est.drift[good.back()];
      } else {
        const int a = *(next - 1), b = *next;
        const double t = static_cast<double>(k - a) / (b - a);
        est.drift[k] = est.drift[a] * (1.0 - t) + est.drift[b] * t;
      }
    }
  const Shift d0 = est.drift[0];
  for (auto& d : est.drift)
    d = d - d0;
  return est;
}

namespace {

SeparatedObjects divide_out(const ComplexField& probe, const std::vector<ComplexField>& waves,
                            const std::vector<Shift>& drifts, double eps, double radius) {
  const std::size_t n = waves.size();
  SeparatedObjects out;
  out.probe = probe;
  out.objects.resize(n);
  out.masks.resize(n);
  const double edge = std::min(8.0, radius / 4.0);
  parallel_for_each_index(n, [&](std::size_t k) {
    const Shift d = drifts.empty() ? Shift{} : drifts[k];
    Grid<cplx> p = probe.grid();
    if (d.dy != 0.0 || d.dx != 0.0)
      fourier_shift_inplace(p, d);
    const double floor = eps * max_norm(p);
    const RealGrid hard = disk_mask(probe.shape(), radius, d);
    ComplexField o(probe.shape(), probe.pitch(), "object");
    for (std::size_t i = 0; i < o.size(); ++i)
      if (hard[i] > 0.0)
        o[i] = waves[k][i] * std::conj(p[i]) / (std::norm(p[i]) + floor);
    out.objects[k] = std::move(o);
    out.masks[k] = soft_disk_mask(probe.shape(), radius, edge, d);
  });
  return out;
}

} // namespace

SeparatedObjects separate_probe_object(const std::vector<ComplexField>& exit_waves, const std::vector<Shift>& drifts,
                                       double division_epsilon, const RealGrid& support, double object_radius_px) {
  const std::size_t n = exit_waves.size();
  if (n < 3)
    throw ConfigError("probe/object separation needs at least 3 frames");
  if (drifts.size() != n)
    throw ConfigError("separate_probe_object: one drift per exit wave required");
  if (!(object_radius_px > 0.0))
    throw ConfigError("separate_probe_object: object radius must be positive");
  std::vector<ComplexField> aligned(n);
  parallel_for_each_index(n, [&](std::size_t k) { aligned[k] = fourier_shift(exit_waves[k], -drifts[k]); });
  // Each exit wave carries its own global phase; reference them to frame 0.
  std::vector<ComplexField> waves = exit_waves;
  for (std::size_t k = 1; k < n; ++k) {
    cplx c{};
    for (std::size_t i = 0; i < aligned[k].size(); ++i)
      c += (support.empty() ? 1.0 : support[i]) * std::conj(aligned[k][i]) * aligned[0][i];
    if (std::abs(c) > 0.0) {
      const cplx u = c / std::abs(c);
      aligned[k] *= u;
      waves[k] *= u;
    }
  }
  ComplexField probe(exit_waves[0].shape(), exit_waves[0].pitch(), "probe");
  for (const auto& a : aligned)
    probe += a;
  probe *= cplx(1.0 / static_cast<double>(n));
  if (!support.empty())
    for (std::size_t i = 0; i < probe.size(); ++i)
      probe[i] *= support[i];
  return divide_out(probe, waves, drifts, division_epsilon, object_radius_px);
}

SeparatedObjects objects_from_state(const ReconState& state, double radius_scale) {
  if (state.objects.empty())
    throw ConfigError("state holds no objects (exitwave mode needs probe/object separation)");
  SeparatedObjects out;
  out.probe = state.probe;
  out.objects = state.objects;
  if (!(radius_scale > 0.0))
    throw ConfigError("object mask radius scale must be positive");
  const double radius = radius_scale * probe_equivalent_radius(state.probe);
  const double edge = std::min(8.0, radius / 4.0);
  for (std::size_t k = 0; k < state.objects.size(); ++k)
    out.masks.push_back(
        soft_disk_mask(state.probe.shape(), radius, edge, state.drift.empty() ? Shift{} : state.drift[k]));
  return out;
}

} // namespace sdi
