#include "sdi/assemble.hpp"

#include "sdi/errors.hpp"
#include "sdi/engine.hpp"
#include "sdi/parallel.hpp"
#include "sdi/propagate.hpp"
#include "sdi/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace sdi {

namespace {

constexpr int kMaxCanvas = 16384;

int round_up_even(int v) { return v + (v & 1); }

void require_positions(std::size_t n_objects, const std::vector<Shift>& positions) {
  if (positions.size() != n_objects)
    throw ConfigError("one position per frame required");
  if (positions.empty())
    throw ConfigError("no frames to assemble");
  for (const auto& p : positions)
    if (!std::isfinite(p.dy) || !std::isfinite(p.dx))
      throw ConfigError("positions must be finite");
}

Grid<cplx> shifted(const Grid<cplx>& g, Shift s) {
  Grid<cplx> out = g;
  if (s.dy != 0.0 || s.dx != 0.0)
    fourier_shift_inplace(out, s);
  return out;
}

RealGrid shifted_weight(const RealGrid& w, Shift s) {
  Grid<cplx> c(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i)
    c[i] = w[i];
  c = shifted(c, s);
  RealGrid out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i)
    out[i] = std::max(0.0, c[i].real());
  return out;
}

// Object and weight moved onto the canvas grid.
struct Piece {
  Placement at;
  Grid<cplx> value; // weight * object
  RealGrid weight;
};

Piece make_piece(const StitchedObject& canvas, const ComplexField& object, const RealGrid& weight, Shift position) {
  Piece p;
  p.at = place_frame(canvas, position, object.shape());
  const Grid<cplx> o = shifted(object.grid(), p.at.fraction);
  p.weight = shifted_weight(weight, p.at.fraction);
  p.value = Grid<cplx>(object.shape());
  for (std::size_t i = 0; i < o.size(); ++i)
    p.value[i] = p.weight[i] * o[i];
  return p;
}

void accumulate(StitchedObject& canvas, const Piece& p) {
  for (int y = 0; y < p.value.rows(); ++y)
    for (int x = 0; x < p.value.cols(); ++x) {
      canvas.canvas(p.at.y0 + y, p.at.x0 + x) += p.value(y, x);
      canvas.weight(p.at.y0 + y, p.at.x0 + x) += p.weight(y, x);
    }
}

} // namespace

StitchedObject make_canvas(const std::vector<Shift>& positions, Shape frame_shape, double pitch, int pad_px) {
  if (positions.empty())
    throw ConfigError("no positions for the canvas");
  if (pad_px < 0)
    throw ConfigError("canvas padding must be non-negative");
  double min_y = positions[0].dy, max_y = min_y, min_x = positions[0].dx, max_x = min_x;
  for (const auto& p : positions) {
    if (!std::isfinite(p.dy) || !std::isfinite(p.dx))
      throw ConfigError("positions must be finite");
    min_y = std::min(min_y, p.dy);
    max_y = std::max(max_y, p.dy);
    min_x = std::min(min_x, p.dx);
    max_x = std::max(max_x, p.dx);
  }
  const double span_y = std::ceil(max_y) - std::floor(min_y);
  const double span_x = std::ceil(max_x) - std::floor(min_x);
  if (span_y + frame_shape.rows + 2 * pad_px + 2 > kMaxCanvas || span_x + frame_shape.cols + 2 * pad_px + 2 > kMaxCanvas) {
    std::ostringstream msg;
    msg << "positions span " << span_y << " x " << span_x << " px; the canvas would exceed " << kMaxCanvas << " px";
    throw ConfigError(msg.str());
  }
  const Shape shape{round_up_even(static_cast<int>(span_y) + frame_shape.rows + 2 * pad_px + 1),
                    round_up_even(static_cast<int>(span_x) + frame_shape.cols + 2 * pad_px + 1)};
  StitchedObject out;
  out.canvas = ComplexField(shape, pitch, "object_full");
  out.weight = RealGrid(shape);
  out.origin = {frame_shape.rows / 2 + pad_px - std::floor(min_y), frame_shape.cols / 2 + pad_px - std::floor(min_x)};
  return out;
}

Placement place_frame(const StitchedObject& canvas, Shift position, Shape frame_shape) {
  const double ty = canvas.origin.dy + position.dy - frame_shape.rows / 2;
  const double tx = canvas.origin.dx + position.dx - frame_shape.cols / 2;
  Placement p;
  p.y0 = static_cast<int>(std::floor(ty));
  p.x0 = static_cast<int>(std::floor(tx));
  p.fraction = {ty - p.y0, tx - p.x0};
  if (p.y0 < 0 || p.x0 < 0 || p.y0 + frame_shape.rows > canvas.canvas.rows() ||
      p.x0 + frame_shape.cols > canvas.canvas.cols())
    throw ConfigError("frame window falls outside the canvas");
  return p;
}

std::vector<cplx> align_object_phases(std::vector<ComplexField>& objects, const std::vector<RealGrid>& weights,
                                      const std::vector<Shift>& positions) {
  require_positions(objects.size(), positions);
  if (weights.size() != objects.size())
    throw ConfigError("one weight map per object required");
  const std::size_t n = objects.size();
  StitchedObject canvas = make_canvas(positions, objects[0].shape(), objects[0].pitch());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto dist = [&](std::size_t k) { return std::hypot(positions[k].dy - positions[0].dy, positions[k].dx - positions[0].dx); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });

  std::vector<cplx> phases(n, cplx(1.0));
  for (std::size_t k : order) {
    Piece p = make_piece(canvas, objects[k], weights[k], positions[k]);
    cplx c{};
    for (int y = 0; y < p.value.rows(); ++y)
      for (int x = 0; x < p.value.cols(); ++x)
        c += std::conj(p.value(y, x)) * canvas.canvas(p.at.y0 + y, p.at.x0 + x);
    if (std::abs(c) > 0.0) {
      phases[k] = c / std::abs(c);
      for (auto& v : p.value.values())
        v *= phases[k];
      objects[k] *= phases[k];
    }
    accumulate(canvas, p);
  }
  return phases;
}

StitchedObject stitch_initial(const std::vector<ComplexField>& objects, const std::vector<RealGrid>& weights,
                              const std::vector<Shift>& positions) {
  require_positions(objects.size(), positions);
  if (weights.size() != objects.size())
    throw ConfigError("one weight map per object required");
  for (std::size_t k = 0; k < objects.size(); ++k) {
    require_same_shape(objects[k].shape(), objects[0].shape(), "stitch objects");
    require_same_shape(weights[k].shape(), objects[0].shape(), "stitch weights");
  }
  StitchedObject canvas = make_canvas(positions, objects[0].shape(), objects[0].pitch());
  std::vector<Piece> pieces(objects.size());
  parallel_for_each_index(objects.size(), [&](std::size_t k) {
    pieces[k] = make_piece(canvas, objects[k], weights[k], positions[k]);
  });
  for (const auto& p : pieces)
    accumulate(canvas, p);
  for (std::size_t i = 0; i < canvas.canvas.size(); ++i)
    canvas.canvas[i] = canvas.weight[i] > 1e-9 ? canvas.canvas[i] / canvas.weight[i] : cplx(1.0);
  return canvas;
}

namespace {

struct PatchModel {
  const ScanDataset& ds;
  const ComplexField& modulator;
  NearPropagator near;
  int pad;

  PatchModel(const ScanDataset& d, const ComplexField& m, int p)
      : ds(d), modulator(m),
        near(d.frame_shape(), d.geometry.sample_plane_pitch, d.geometry.z_sample_to_modulator, d.geometry.wavelength),
        pad(p) {}

  Shape padded() const { return {ds.frame_shape().rows + 2 * pad, ds.frame_shape().cols + 2 * pad}; }

  // Object seen by the frame window (sub-pixel part applied to a padded patch).
  ComplexField window(const StitchedObject& obj, const Placement& at) const {
    const Shape ps = padded();
    if (at.y0 - pad < 0 || at.x0 - pad < 0 || at.y0 - pad + ps.rows > obj.canvas.rows() ||
        at.x0 - pad + ps.cols > obj.canvas.cols())
      throw ConfigError("canvas padding is smaller than the ePIE patch padding");
    ComplexField q(ps, obj.canvas.pitch());
    for (int y = 0; y < ps.rows; ++y)
      std::copy_n(&obj.canvas(at.y0 - pad + y, at.x0 - pad), ps.cols, &q(y, 0));
    if (at.fraction.dy != 0.0 || at.fraction.dx != 0.0)
      fourier_shift_inplace(q.grid(), -at.fraction);
    return crop_center(q, ds.frame_shape());
  }

  void add_window(StitchedObject& obj, const Placement& at, const ComplexField& delta) const {
    ComplexField q = embed_center(delta, padded());
    if (at.fraction.dy != 0.0 || at.fraction.dx != 0.0)
      fourier_shift_inplace(q.grid(), at.fraction);
    for (int y = 0; y < q.rows(); ++y)
      for (int x = 0; x < q.cols(); ++x)
        obj.canvas(at.y0 - pad + y, at.x0 - pad + x) += q(y, x);
  }

  // Detector-plane wave of an exit wave.
  Grid<cplx> detector(const Grid<cplx>& psi, Grid<cplx>& phi) const {
    phi = psi;
    near.forward_inplace(phi);
    Grid<cplx> chi = phi;
    for (std::size_t i = 0; i < chi.size(); ++i)
      chi[i] *= modulator[i];
    far_inplace(chi);
    return chi;
  }
};

double frame_misfit(const Grid<cplx>& wave, const RealGrid& intensity, double& den) {
  double num = 0.0;
  for (std::size_t i = 0; i < wave.size(); ++i) {
    const double d = std::abs(wave[i]) - std::sqrt(intensity[i]);
    num += d * d;
    den += intensity[i];
  }
  return num;
}

Grid<cplx> probe_for(const ComplexField& probe, const std::vector<Shift>& drift, std::size_t n) {
  Grid<cplx> p = probe.grid();
  if (!drift.empty() && (drift[n].dy != 0.0 || drift[n].dx != 0.0))
    fourier_shift_inplace(p, drift[n]);
  return p;
}

void check_inputs(const ScanDataset& ds, const std::vector<Shift>& positions, const ComplexField& probe,
                  const ComplexField& modulator, const std::vector<Shift>& drift) {
  ds.validate();
  require_positions(ds.size(), positions);
  require_same_shape(probe.shape(), ds.frame_shape(), "probe vs frames");
  require_same_shape(modulator.shape(), ds.frame_shape(), "modulator vs frames");
  if (!drift.empty() && drift.size() != ds.size())
    throw ConfigError("one drift per frame required");
}

} // namespace

EpieResult epie_refine(const ScanDataset& ds, const std::vector<Shift>& positions, const ComplexField& probe,
                       const ComplexField& modulator, const StitchedObject& initial, const EpieConfig& config,
                       const std::vector<Shift>& drift) {
  check_inputs(ds, positions, probe, modulator, drift);
  if (config.iterations < 0 || config.patch_pad_px < 0 || !(config.division_epsilon >= 0.0))
    throw ConfigError("invalid ePIE configuration");
  const PatchModel model(ds, modulator, config.patch_pad_px);
  EpieResult res{initial, probe, {}};
  const double m_floor = config.division_epsilon * modulator.max_abs2();
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(ds.size());
  double best = std::numeric_limits<double>::infinity();

  for (int it = 0; it < config.iterations; ++it) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t k = order.size(); k > 1; --k)
      std::swap(order[k - 1], order[uniform_index(rng, k)]);
    double num = 0.0, den = 0.0;
    for (std::size_t n : order) {
      const Placement at = place_frame(res.object, positions[n], ds.frame_shape());
      const ComplexField o = model.window(res.object, at);
      const Grid<cplx> p = probe_for(res.probe, drift, n);
      Grid<cplx> psi(p.shape());
      for (std::size_t i = 0; i < psi.size(); ++i)
        psi[i] = p[i] * o[i];
      Grid<cplx> phi;
      Grid<cplx> chi = model.detector(psi, phi);
      num += frame_misfit(chi, ds.frames[n], den);
      modulus_project_inplace(chi, ds.frames[n], nullptr);
      far_inverse_inplace(chi);
      for (std::size_t i = 0; i < phi.size(); ++i)
        phi[i] += std::conj(modulator[i]) * (chi[i] - modulator[i] * phi[i]) / (std::norm(modulator[i]) + m_floor);
      model.near.backward_inplace(phi);
      if (!std::all_of(phi.values().begin(), phi.values().end(),
                       [](const cplx& v) { return std::isfinite(v.real()) && std::isfinite(v.imag()); })) {
        std::ostringstream msg;
        msg << "non-finite exit wave in ePIE frame " << n;
        throw DivergenceError(msg.str());
      }

      double p_max = 0.0, o_max = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        p_max = std::max(p_max, std::norm(p[i]));
        o_max = std::max(o_max, std::norm(o[i]));
      }
      ComplexField d_o(ds.frame_shape(), o.pitch());
      for (std::size_t i = 0; i < d_o.size(); ++i)
        d_o[i] = config.beta_object * std::conj(p[i]) * (phi[i] - psi[i]) / std::max(p_max, 1e-300);
      model.add_window(res.object, at, d_o);
      if (config.update_probe) {
        Grid<cplx> d_p(p.shape());
        for (std::size_t i = 0; i < d_p.size(); ++i)
          d_p[i] = config.beta_probe * std::conj(o[i]) * (phi[i] - psi[i]) / std::max(o_max, 1e-300);
        if (!drift.empty())
          fourier_shift_inplace(d_p, -drift[n]);
        for (std::size_t i = 0; i < d_p.size(); ++i)
          res.probe[i] += d_p[i];
      }
    }
    const double r = den > 0.0 ? num / den : 0.0;
    if (!std::isfinite(r))
      throw DivergenceError("ePIE residual became non-finite");
    res.residuals.push_back(r);
    best = std::min(best, r);
    if (r > config.divergence_factor * best && r > 1e-10) {
      std::ostringstream msg;
      msg << "ePIE diverged at sweep " << it << ": residual " << r << " exceeds " << config.divergence_factor
          << "x its minimum " << best;
      throw DivergenceError(msg.str());
    }
  }
  return res;
}

double canvas_residual(const ScanDataset& ds, const std::vector<Shift>& positions, const ComplexField& probe,
                       const ComplexField& modulator, const StitchedObject& object, int patch_pad_px,
                       const std::vector<Shift>& drift) {
  check_inputs(ds, positions, probe, modulator, drift);
  const PatchModel model(ds, modulator, patch_pad_px);
  std::vector<double> nums(ds.size()), dens(ds.size());
  parallel_for_each_index(ds.size(), [&](std::size_t n) {
    const Placement at = place_frame(object, positions[n], ds.frame_shape());
    const ComplexField o = model.window(object, at);
    Grid<cplx> psi = probe_for(probe, drift, n);
    for (std::size_t i = 0; i < psi.size(); ++i)
      psi[i] *= o[i];
    Grid<cplx> phi;
    const Grid<cplx> chi = model.detector(psi, phi);
    nums[n] = frame_misfit(chi, ds.frames[n], dens[n]);
  });
  const double num = std::accumulate(nums.begin(), nums.end(), 0.0);
  const double den = std::accumulate(dens.begin(), dens.end(), 0.0);
  return den > 0.0 ? num / den : 0.0;
}

PhaseAlignment global_phase_align(const ComplexField& a, const ComplexField& b, const RealGrid& mask) {
  require_same_shape(a.shape(), b.shape(), "global_phase_align");
  require_same_shape(a.shape(), mask.shape(), "global_phase_align mask");
  cplx ab{};
  double aa = 0.0, bb = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double w = mask[i];
    wsum += w;
    ab += w * std::conj(a[i]) * b[i];
    aa += w * std::norm(a[i]);
    bb += w * std::norm(b[i]);
  }
  if (!(wsum > 0.0))
    throw ConfigError("global_phase_align: empty mask");
  PhaseAlignment out;
  out.gamma = aa > 0.0 ? ab / aa : cplx{};
  double err = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    err += mask[i] * std::norm(out.gamma * a[i] - b[i]);
  out.nrmse = bb > 0.0 ? std::sqrt(err / bb) : (err > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
  return out;
}

ComplexField sample_on_canvas(const ComplexField& sample, const StitchedObject& canvas, Shift offset) {
  const Shape cs = canvas.canvas.shape();
  const Shape big{std::max(cs.rows, sample.rows()), std::max(cs.cols, sample.cols())};
  const ComplexField src = big == sample.shape() ? sample : embed_center(sample, big);
  const Shift center{cs.rows / 2 - canvas.origin.dy + offset.dy, cs.cols / 2 - canvas.origin.dx + offset.dx};
  ComplexField out = sample_patch(src, center, cs);
  out.set_label("truth_on_canvas");
  return out;
}

RealGrid scanned_region(const StitchedObject& canvas, double threshold) {
  RealGrid out(canvas.weight.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = canvas.weight[i] >= threshold ? 1.0 : 0.0;
  return out;
}

} // namespace sdi
