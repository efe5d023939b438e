#include "sdi/registration.hpp"

#include "sdi/fft.hpp"
#include "sdi/parallel.hpp"
#include "sdi/table_io.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace sdi {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

int signed_frequency(int k, int n) { return k < n / 2 ? k : k - n; }

struct Spectrum {
  Grid<cplx> data; // unnormalized, uncentered DFT
  double norm = 0.0;
};

Spectrum spectrum_of(const ComplexField& f) {
  Spectrum s{f.grid(), std::sqrt(f.power())};
  fft::transform(s.data, fft::Direction::Forward);
  return s;
}

// Correlation c(s) = sum_r g(r) conj(f(r - s)) evaluated on a (2h+1)^2 grid of
// fractional shifts around `center` with spacing 1/upsample.
Grid<cplx> local_correlation(const Grid<cplx>& cross, Shift center, int upsample, int half) {
  const int h = cross.rows(), w = cross.cols();
  const int k = 2 * half + 1;
  Grid<cplx> ey(k, h), ex(k, w);
  for (int a = 0; a < k; ++a) {
    const double sy = center.dy + static_cast<double>(a - half) / upsample;
    const double sx = center.dx + static_cast<double>(a - half) / upsample;
    for (int q = 0; q < h; ++q)
      ey(a, q) = std::polar(1.0, kTwoPi * signed_frequency(q, h) * sy / h);
    for (int q = 0; q < w; ++q)
      ex(a, q) = std::polar(1.0, kTwoPi * signed_frequency(q, w) * sx / w);
  }
  Grid<cplx> tmp(k, w);
  for (int a = 0; a < k; ++a) {
    cplx* out = &tmp(a, 0);
    for (int q = 0; q < h; ++q) {
      const cplx e = ey(a, q);
      const cplx* row = &cross(q, 0);
      for (int x = 0; x < w; ++x)
        out[x] += e * row[x];
    }
  }
  Grid<cplx> result(k, k);
  const double scale = 1.0 / (static_cast<double>(h) * w);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) {
      cplx s{};
      const cplx* t = &tmp(a, 0);
      const cplx* e = &ex(b, 0);
      for (int x = 0; x < w; ++x)
        s += t[x] * e[x];
      result(a, b) = s * scale;
    }
  return result;
}

ShiftMeasurement correlate(const Spectrum& f, const Spectrum& g, const RegisterConfig& config) {
  if (f.norm == 0.0 || g.norm == 0.0)
    throw FeaturelessError();
  const int h = f.data.rows(), w = f.data.cols();
  Grid<cplx> cross(f.data.shape());
  for (std::size_t i = 0; i < cross.size(); ++i)
    cross[i] = g.data[i] * std::conj(f.data[i]);

  Grid<cplx> corr = cross;
  fft::transform(corr, fft::Direction::Inverse);
  const double scale = 1.0 / (static_cast<double>(h) * w);

  int py = 0, px = 0;
  double best = -1.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = std::abs(corr(y, x));
      if (v > best) {
        best = v;
        py = y;
        px = x;
      }
    }
  const Shift integer_peak{static_cast<double>(signed_frequency(py, h)), static_cast<double>(signed_frequency(px, w))};

  double secondary = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int dy = std::abs(y - py), dx = std::abs(x - px);
      dy = std::min(dy, h - dy);
      dx = std::min(dx, w - dx);
      if (std::hypot(dy, dx) >= config.exclusion_px)
        secondary = std::max(secondary, std::abs(corr(y, x)));
    }

  ShiftMeasurement m;
  m.delta = integer_peak;
  cplx peak = corr(py, px) * scale;
  if (config.upsample > 1) {
    const int half = static_cast<int>(std::ceil(1.5 * config.upsample));
    const Grid<cplx> local = local_correlation(cross, integer_peak, config.upsample, half);
    int ba = half, bb = half;
    double bv = -1.0;
    for (int a = 0; a < local.rows(); ++a)
      for (int b = 0; b < local.cols(); ++b)
        if (std::abs(local(a, b)) > bv) {
          bv = std::abs(local(a, b));
          ba = a;
          bb = b;
        }
    m.delta = integer_peak + Shift{static_cast<double>(ba - half) / config.upsample,
                                   static_cast<double>(bb - half) / config.upsample};
    peak = local(ba, bb);
  }
  m.confidence = std::abs(peak) / (f.norm * g.norm);
  m.peak_ratio = secondary > 0.0 ? best / secondary : 1e6;
  m.phase = std::arg(peak);
  return m;
}

ComplexField magnitude_of(const ComplexField& f) {
  ComplexField out(f.shape(), f.pitch(), f.label());
  for (std::size_t i = 0; i < f.size(); ++i)
    out[i] = std::abs(f[i]);
  return out;
}

ComplexField prepare(const ComplexField& object, const RealGrid* mask, const RegisterConfig& config) {
  ComplexField f = config.magnitude_only ? magnitude_of(object) : object;
  if (config.subtract_mean) {
    cplx sum{};
    double wsum = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double w = mask ? (*mask)[i] : 1.0;
      sum += w * f[i];
      wsum += w;
    }
    const cplx mean = wsum > 0.0 ? sum / wsum : cplx{};
    for (auto& v : f.values())
      v -= mean;
  }
  if (mask)
    for (std::size_t i = 0; i < f.size(); ++i)
      f[i] *= (*mask)[i];
  if (config.precondition)
    f = scaling_gradient(f, config.trim_px);
  return f;
}

struct MaskedSpectra {
  Grid<cplx> value;  // mask * f
  Grid<cplx> mask;   // mask
  Grid<cplx> power;  // mask * |f|^2
  Grid<cplx> coarse_value; // as value/power with f low-pass filtered (empty: no blur)
  Grid<cplx> coarse_power;
  double mask_sum = 0.0;
  double energy = 0.0;
  double variance = 0.0; // masked variance of f
};

ComplexField gaussian_blur(const ComplexField& f, double sigma) {
  ComplexField out = f;
  fft::transform(out.grid(), fft::Direction::Forward);
  const int h = f.rows(), w = f.cols();
  const double k = 2.0 * std::numbers::pi * std::numbers::pi * sigma * sigma;
  for (int y = 0; y < h; ++y) {
    const double fy = static_cast<double>(signed_frequency(y, h)) / h;
    for (int x = 0; x < w; ++x) {
      const double fx = static_cast<double>(signed_frequency(x, w)) / w;
      out(y, x) *= std::exp(-k * (fy * fy + fx * fx)) / (static_cast<double>(h) * w);
    }
  }
  fft::transform(out.grid(), fft::Direction::Inverse);
  return out;
}

MaskedSpectra masked_spectra(const ComplexField& object, const RealGrid& mask, const RegisterConfig& config) {
  require_same_shape(object.shape(), mask.shape(), "registration mask");
  ComplexField f = config.magnitude_only ? magnitude_of(object) : object;
  if (config.precondition)
    f = scaling_gradient(f, config.trim_px);
  MaskedSpectra s{Grid<cplx>(f.shape()), Grid<cplx>(f.shape()), Grid<cplx>(f.shape()), {}, {}};
  cplx sum{};
  for (std::size_t i = 0; i < f.size(); ++i) {
    s.value[i] = mask[i] * f[i];
    s.mask[i] = mask[i];
    s.power[i] = mask[i] * std::norm(f[i]);
    s.mask_sum += mask[i];
    s.energy += mask[i] * std::norm(f[i]);
    sum += mask[i] * f[i];
  }
  if (s.mask_sum > 0.0)
    s.variance = std::max(0.0, s.energy / s.mask_sum - std::norm(sum / s.mask_sum));
  fft::transform(s.value, fft::Direction::Forward);
  fft::transform(s.mask, fft::Direction::Forward);
  fft::transform(s.power, fft::Direction::Forward);
  if (config.coarse_blur_px > 0.0) {
    const ComplexField b = gaussian_blur(f, config.coarse_blur_px);
    s.coarse_value = Grid<cplx>(f.shape());
    s.coarse_power = Grid<cplx>(f.shape());
    for (std::size_t i = 0; i < f.size(); ++i) {
      s.coarse_value[i] = mask[i] * b[i];
      s.coarse_power[i] = mask[i] * std::norm(b[i]);
    }
    fft::transform(s.coarse_value, fft::Direction::Forward);
    fft::transform(s.coarse_power, fft::Direction::Forward);
  }
  return s;
}

Grid<cplx> cross_spectrum(const Grid<cplx>& a, const Grid<cplx>& b) {
  Grid<cplx> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = b[i] * std::conj(a[i]);
  return out;
}

// Weighted Pearson correlation over the overlap of the two masks, for every
// shift s with g(r) ~ f(r - s). Built from six cross-correlations.
struct MaskedTerms {
  Grid<cplx> fg, f_sum, g_sum, overlap, f_pow, g_pow;
};

MaskedTerms masked_terms(const MaskedSpectra& f, const MaskedSpectra& g, bool coarse) {
  const auto& fv = coarse && !f.coarse_value.empty() ? f.coarse_value : f.value;
  const auto& gv = coarse && !g.coarse_value.empty() ? g.coarse_value : g.value;
  const auto& fp = coarse && !f.coarse_power.empty() ? f.coarse_power : f.power;
  const auto& gp = coarse && !g.coarse_power.empty() ? g.coarse_power : g.power;
  return {cross_spectrum(fv, gv), cross_spectrum(fv, g.mask), cross_spectrum(f.mask, gv),
          cross_spectrum(f.mask, g.mask), cross_spectrum(fp, g.mask), cross_spectrum(f.mask, gp)};
}

cplx ncc_value(cplx fg, cplx fs, cplx gs, double ov, double fp, double gp, double min_overlap) {
  if (ov < min_overlap)
    return {};
  const double vf = fp - std::norm(fs) / ov;
  const double vg = gp - std::norm(gs) / ov;
  if (!(vf > 1e-9 * fp) || !(vg > 1e-9 * gp))
    return {};
  return (fg - fs * gs / ov) / std::sqrt(vf * vg);
}

double significance(double r, double overlap) { return std::atanh(std::min(r, 0.9999)) * std::sqrt(overlap); }

struct Landscape {
  Grid<cplx> ncc;
  RealGrid score;
  RealGrid overlap;
  double min_overlap = 0.0;
};

Landscape masked_landscape(const MaskedSpectra& f, const MaskedSpectra& g, const RegisterConfig& config) {
  // contrast at round-off level carries no registrable structure
  const auto flat = [](const MaskedSpectra& s) {
    return s.mask_sum <= 0.0 || s.energy <= 0.0 || s.variance <= 1e-20 * s.energy / s.mask_sum;
  };
  if (flat(f) || flat(g))
    throw FeaturelessError();
  const int h = f.value.rows(), w = f.value.cols();
  const double scale = 1.0 / (static_cast<double>(h) * w);
  // Coarse integer search on low-passed objects (fine features decorrelate at
  // half-pixel offsets); refinement uses the full-resolution terms.
  MaskedTerms c = masked_terms(f, g, true);
  for (auto* t : {&c.fg, &c.f_sum, &c.g_sum, &c.overlap, &c.f_pow, &c.g_pow}) {
    fft::transform(*t, fft::Direction::Inverse);
    for (auto& v : t->values())
      v *= scale;
  }
  Landscape l{Grid<cplx>(f.value.shape()), RealGrid(f.value.shape()), RealGrid(f.value.shape())};
  double max_overlap = 0.0;
  for (std::size_t i = 0; i < l.overlap.size(); ++i) {
    l.overlap[i] = std::max(c.overlap[i].real(), 0.0);
    max_overlap = std::max(max_overlap, l.overlap[i]);
  }
  l.min_overlap = std::max(config.min_overlap_fraction * max_overlap, 1e-9);
  for (std::size_t i = 0; i < l.ncc.size(); ++i) {
    l.ncc[i] = ncc_value(c.fg[i], c.f_sum[i], c.g_sum[i], l.overlap[i], c.f_pow[i].real(), c.g_pow[i].real(),
                         l.min_overlap);
    const double r = std::abs(l.ncc[i]);
    // Significance: Fisher z of the coefficient times sqrt(overlap weight).
    l.score[i] = config.significance_ranking ? significance(r, l.overlap[i]) : r;
  }
  return l;
}

double wrapped_distance(int y0, int x0, int y1, int x1, int h, int w) {
  int dy = std::abs(y0 - y1), dx = std::abs(x0 - x1);
  dy = std::min(dy, h - dy);
  dx = std::min(dx, w - dx);
  return std::hypot(dy, dx);
}

// Local maxima of the score, best first, at least `separation` apart.
// Local maxima of `rank`, best first, at least `separation` apart from each
// other and from the peaks already in `peaks`.
void add_top_peaks(const Landscape& l, const RealGrid& rank, int count, double separation,
                   std::vector<PeakCandidate>& peaks) {
  const int h = rank.rows(), w = rank.cols();
  // Strict 3x3 local maxima only, so ridges along walls yield one candidate.
  std::vector<std::size_t> order;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = rank(y, x);
      if (!(v > 0.0))
        continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0)
            continue;
          const double u = rank((y + dy + h) % h, (x + dx + w) % w);
          if (u > v || (u == v && (dy < 0 || (dy == 0 && dx < 0)))) {
            is_max = false;
            break;
          }
        }
      if (is_max)
        order.push_back(static_cast<std::size_t>(y) * w + x);
    }
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return rank[a] != rank[b] ? rank[a] > rank[b] : a < b; });
  std::vector<std::pair<int, int>> taken;
  for (const auto& p : peaks)
    taken.emplace_back((static_cast<int>(p.delta.dy) % h + h) % h, (static_cast<int>(p.delta.dx) % w + w) % w);
  int added = 0;
  for (const std::size_t i : order) {
    if (added >= count)
      break;
    const int y = static_cast<int>(i) / w, x = static_cast<int>(i) % w;
    bool near = false;
    for (const auto& [ty, tx] : taken)
      if (wrapped_distance(y, x, ty, tx, h, w) < separation) {
        near = true;
        break;
      }
    if (near)
      continue;
    taken.emplace_back(y, x);
    PeakCandidate p;
    p.delta = Shift{static_cast<double>(signed_frequency(y, h)), static_cast<double>(signed_frequency(x, w))};
    p.coefficient = std::abs(l.ncc[i]);
    p.overlap = l.overlap[i];
    p.score = significance(p.coefficient, p.overlap);
    peaks.push_back(p);
    ++added;
  }
}

std::vector<PeakCandidate> top_peaks(const Landscape& l, int count, double separation) {
  std::vector<PeakCandidate> peaks;
  add_top_peaks(l, l.score, count, separation, peaks);
  return peaks;
}

// Candidates ranked by coefficient.
std::vector<PeakCandidate> candidate_peaks(const Landscape& l, int count, double separation) {
  RealGrid by_r(l.ncc.shape());
  for (std::size_t i = 0; i < by_r.size(); ++i)
    by_r[i] = std::abs(l.ncc[i]);
  std::vector<PeakCandidate> peaks;
  add_top_peaks(l, by_r, count, separation, peaks);
  return peaks;
}

// Highest score at least `exclusion` away from the integer shift `at`.
double secondary_score(const Landscape& l, Shift at, double exclusion) {
  const int h = l.score.rows(), w = l.score.cols();
  const int py = (static_cast<int>(std::lround(at.dy)) % h + h) % h;
  const int px = (static_cast<int>(std::lround(at.dx)) % w + w) % w;
  double secondary = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (wrapped_distance(y, x, py, px, h, w) >= exclusion)
        secondary = std::max(secondary, l.score(y, x));
  return secondary;
}

// Sub-pixel maximum of |ncc| within +-1.5 px of an integer shift.
ShiftMeasurement refine_masked(const MaskedSpectra& f, const MaskedSpectra& g, const Landscape& l, Shift integer_peak,
                               const RegisterConfig& config) {
  const int h = l.ncc.rows(), w = l.ncc.cols();
  const int py = (static_cast<int>(std::lround(integer_peak.dy)) % h + h) % h;
  const int px = (static_cast<int>(std::lround(integer_peak.dx)) % w + w) % w;
  ShiftMeasurement m;
  m.delta = integer_peak;
  cplx peak = l.ncc(py, px);
  const bool blurred = !f.coarse_value.empty();
  if (config.upsample > 1 || blurred) {
    const MaskedTerms spectra = masked_terms(f, g, false);
    const int up = std::max(config.upsample, 1);
    const int half = static_cast<int>(std::ceil(1.5 * up));
    const Grid<cplx> fg = local_correlation(spectra.fg, integer_peak, up, half);
    const Grid<cplx> fs = local_correlation(spectra.f_sum, integer_peak, up, half);
    const Grid<cplx> gs = local_correlation(spectra.g_sum, integer_peak, up, half);
    const Grid<cplx> ov = local_correlation(spectra.overlap, integer_peak, up, half);
    const Grid<cplx> fp = local_correlation(spectra.f_pow, integer_peak, up, half);
    const Grid<cplx> gp = local_correlation(spectra.g_pow, integer_peak, up, half);
    int ba = half, bb = half;
    double bv = -1.0;
    for (int a = 0; a < fg.rows(); ++a)
      for (int b = 0; b < fg.cols(); ++b) {
        const cplx v = ncc_value(fg(a, b), fs(a, b), gs(a, b), ov(a, b).real(), fp(a, b).real(), gp(a, b).real(),
                                 l.min_overlap);
        if (std::abs(v) > bv) {
          bv = std::abs(v);
          ba = a;
          bb = b;
          peak = v;
        }
      }
    m.delta = integer_peak + Shift{static_cast<double>(ba - half) / up, static_cast<double>(bb - half) / up};
  }
  m.confidence = std::min(1.0, std::abs(peak));
  m.phase = std::arg(peak);
  const double primary = l.score(py, px);
  const double secondary = secondary_score(l, integer_peak, config.exclusion_px);
  m.peak_ratio = secondary > 0.0 ? primary / secondary : 1e6;
  return m;
}

ShiftMeasurement masked_correlate(const MaskedSpectra& f, const MaskedSpectra& g, const RegisterConfig& config) {
  const Landscape l = masked_landscape(f, g, config);
  const auto peaks = top_peaks(l, 1, 0.0);
  if (peaks.empty())
    throw FeaturelessError();
  return refine_masked(f, g, l, peaks.front().delta, config);
}

} // namespace

ComplexField scaling_gradient(const ComplexField& f, int trim_px) {
  if (trim_px < 0 || 4 * trim_px >= std::min(f.rows(), f.cols()))
    throw ConfigError("scaling gradient trim must satisfy 0 <= m < N/4");
  if (trim_px == 0)
    return ComplexField(f.shape(), f.pitch(), f.label());
  ComplexField spectrum = f;
  fft::centered(spectrum, fft::Direction::Forward);
  const Shape small{f.rows() - 2 * trim_px, f.cols() - 2 * trim_px};
  ComplexField scaled = crop_center(spectrum, small);
  fft::centered(scaled, fft::Direction::Inverse);
  // Unitary transforms of different sizes leave a factor sqrt(a_y a_x).
  const double a_y = static_cast<double>(f.rows()) / small.rows;
  const double a_x = static_cast<double>(f.cols()) / small.cols;
  scaled *= 1.0 / std::sqrt(a_y * a_x);
  ComplexField out = embed_center(scaled, f.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] -= f[i];
  return out;
}

ShiftMeasurement subpixel_shift_estimate(const ComplexField& f, const ComplexField& g, const RegisterConfig& config) {
  require_same_shape(f.shape(), g.shape(), "subpixel_shift_estimate");
  if (config.upsample < 1)
    throw ConfigError("upsample factor must be at least 1");
  auto pre = [&](const ComplexField& x) {
    ComplexField y = config.magnitude_only ? magnitude_of(x) : x;
    return config.precondition ? scaling_gradient(y, config.trim_px) : y;
  };
  return correlate(spectrum_of(pre(f)), spectrum_of(pre(g)), config);
}

ShiftMeasurement masked_shift_estimate(const ComplexField& f, const RealGrid& f_mask, const ComplexField& g,
                                       const RealGrid& g_mask, const RegisterConfig& config) {
  require_same_shape(f.shape(), g.shape(), "masked_shift_estimate");
  if (config.upsample < 1)
    throw ConfigError("upsample factor must be at least 1");
  return masked_correlate(masked_spectra(f, f_mask, config), masked_spectra(g, g_mask, config), config);
}

// ---------------------------------------------------------------- graph

EdgeStrategy EdgeStrategy::parse(const std::string& text) {
  EdgeStrategy s;
  if (text == "all_pairs") {
    s.kind = Kind::AllPairs;
    return s;
  }
  if (text.rfind("temporal:", 0) == 0) {
    s.kind = Kind::Temporal;
    try {
      s.k = std::stoi(text.substr(9));
    } catch (const std::exception&) {
      throw ConfigError("bad edge strategy '" + text + "'");
    }
    if (s.k < 1)
      throw ConfigError("temporal edge strategy needs k >= 1");
    return s;
  }
  if (text == "grid") {
    s.kind = Kind::Grid;
    return s;
  }
  if (text.rfind("grid:", 0) == 0) {
    s.kind = Kind::Grid;
    const auto spec = text.substr(5);
    const auto x = spec.find('x');
    try {
      s.rows = std::stoi(spec.substr(0, x));
      s.cols = std::stoi(spec.substr(x + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad edge strategy '" + text + "', expected grid:ROWSxCOLS");
    }
    return s;
  }
  throw ConfigError("unknown edge strategy '" + text + "' (temporal:K, all_pairs, grid[:RxC])");
}

std::string EdgeStrategy::str() const {
  switch (kind) {
  case Kind::Temporal:
    return "temporal:" + std::to_string(k);
  case Kind::AllPairs:
    return "all_pairs";
  case Kind::Grid:
    return "grid:" + std::to_string(rows) + "x" + std::to_string(cols);
  }
  return {};
}

std::vector<Edge> build_edges(int n_frames, const EdgeStrategy& strategy) {
  if (n_frames < 2)
    throw ConfigError("need at least two frames to build edges");
  std::vector<Edge> edges;
  switch (strategy.kind) {
  case EdgeStrategy::Kind::Temporal:
    for (int i = 0; i < n_frames; ++i)
      for (int j = i + 1; j < n_frames && j - i <= strategy.k; ++j)
        edges.push_back({i, j});
    break;
  case EdgeStrategy::Kind::AllPairs:
    if (n_frames > 200)
      throw ConfigError("all_pairs edge strategy is limited to 200 frames");
    for (int i = 0; i < n_frames; ++i)
      for (int j = i + 1; j < n_frames; ++j)
        edges.push_back({i, j});
    break;
  case EdgeStrategy::Kind::Grid:
    if (strategy.rows * strategy.cols != n_frames)
      throw ConfigError("grid edge strategy: rows x cols does not match the frame count");
    for (int r = 0; r < strategy.rows; ++r)
      for (int c = 0; c < strategy.cols; ++c) {
        const int i = r * strategy.cols + c;
        if (c + 1 < strategy.cols)
          edges.push_back({i, i + 1});
        if (r + 1 < strategy.rows)
          edges.push_back({i, i + strategy.cols});
      }
    std::sort(edges.begin(), edges.end(), [](Edge a, Edge b) { return a.i != b.i ? a.i < b.i : a.j < b.j; });
    break;
  }
  return edges;
}

std::vector<ShiftMeasurement> measure_pairwise_shifts(const std::vector<ComplexField>& objects,
                                                      const std::vector<RealGrid>& masks,
                                                      const std::vector<Edge>& edges, const RegisterConfig& config) {
  if (!masks.empty() && masks.size() != objects.size())
    throw ConfigError("measure_pairwise_shifts: one mask per object required");
  if (config.upsample < 1)
    throw ConfigError("upsample factor must be at least 1");
  if (config.candidates < 1)
    throw ConfigError("candidates per edge must be at least 1");
  const bool masked = !masks.empty();
  std::vector<Spectrum> spectra(masked ? 0 : objects.size());
  std::vector<MaskedSpectra> mspectra(masked ? objects.size() : 0);
  parallel_for_each_index(objects.size(), [&](std::size_t n) {
    if (masked)
      mspectra[n] = masked_spectra(objects[n], masks[n], config);
    else
      spectra[n] = spectrum_of(prepare(objects[n], nullptr, config));
  });

  auto gate = [&](ShiftMeasurement& m) {
    m.accepted = m.confidence >= config.min_confidence && m.peak_ratio >= config.min_peak_ratio;
    if (!m.accepted)
      m.note = "below acceptance thresholds";
  };

  std::vector<ShiftMeasurement> out(edges.size());
  if (!masked || config.candidates == 1) {
    parallel_for_each_index(edges.size(), [&](std::size_t e) {
      const auto [i, j] = edges[e];
      ShiftMeasurement m;
      try {
        m = masked ? masked_correlate(mspectra.at(i), mspectra.at(j), config)
                   : correlate(spectra.at(i), spectra.at(j), config);
        m.delta = -m.delta;
        gate(m);
      } catch (const FeaturelessError& err) {
        m.accepted = false;
        m.note = err.what();
      }
      m.frame_i = i;
      m.frame_j = j;
      out[e] = m;
    });
    return out;
  }

  parallel_for_each_index(edges.size(), [&](std::size_t e) {
    const auto [i, j] = edges[e];
    ShiftMeasurement& m = out[e];
    m.frame_i = i;
    m.frame_j = j;
    try {
      const Landscape l = masked_landscape(mspectra.at(i), mspectra.at(j), config);
      m.candidates = candidate_peaks(l, config.candidates, config.candidate_separation_px);
      for (auto& c : m.candidates)
        c.delta = -c.delta;
      if (m.candidates.empty())
        throw FeaturelessError();
    } catch (const FeaturelessError& err) {
      m.note = err.what();
    }
  });
  // True edges of one scan have similar overlaps; the best-coefficient peaks
  // are mostly true, so their median overlap sets a floor for candidates.
  if (config.relative_overlap_floor > 0.0) {
    std::vector<double> overlaps;
    for (const auto& m : out)
      if (!m.candidates.empty())
        overlaps.push_back(m.candidates.front().overlap);
    if (!overlaps.empty()) {
      std::nth_element(overlaps.begin(), overlaps.begin() + overlaps.size() / 2, overlaps.end());
      const double floor = config.relative_overlap_floor * overlaps[overlaps.size() / 2];
      for (auto& m : out) {
        std::erase_if(m.candidates, [&](const PeakCandidate& c) { return c.overlap < floor; });
        if (m.candidates.empty() && m.note.empty())
          m.note = "no peak with plausible overlap";
      }
    }
  }
  select_cycle_consistent(static_cast<int>(objects.size()), out, config.cycle_tolerance_px);
  reselect_by_consensus(static_cast<int>(objects.size()), out, config.cycle_tolerance_px, config.consensus_rounds);
  parallel_for_each_index(edges.size(), [&](std::size_t e) {
    ShiftMeasurement& m = out[e];
    if (m.candidates.empty())
      return;
    const Landscape l = masked_landscape(mspectra.at(m.frame_i), mspectra.at(m.frame_j), config);
    const ShiftMeasurement r =
        refine_masked(mspectra.at(m.frame_i), mspectra.at(m.frame_j), l,
                      m.consensus ? -m.predicted : -m.candidates[m.chosen].delta, config);
    m.delta = -r.delta;
    m.confidence = r.confidence;
    m.peak_ratio = r.peak_ratio;
    m.phase = r.phase;
    if (m.consensus) {
      m.accepted = m.confidence >= config.min_confidence;
      if (!m.accepted)
        m.note = "below acceptance thresholds";
    } else if (m.cycle_support > 0 && config.consensus_rounds == 0) {
      m.accepted = m.confidence >= config.min_confidence;
      if (!m.accepted)
        m.note = "below acceptance thresholds";
    } else if (config.consensus_rounds > 0 && !m.note.empty()) {
      m.accepted = false;
    } else {
      gate(m);
    }
  });
  return out;
}

void select_cycle_consistent(int n_nodes, std::vector<ShiftMeasurement>& edges, double tolerance_px) {
  std::map<std::pair<int, int>, int> index;
  std::vector<std::set<int>> adjacent(n_nodes);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    auto& m = edges[e];
    m.chosen = 0;
    m.cycle_support = 0;
    if (m.candidates.empty())
      continue;
    if (m.frame_i < 0 || m.frame_j < 0 || m.frame_i >= n_nodes || m.frame_j >= n_nodes)
      throw ConfigError("edge references a frame outside the graph");
    index[{std::min(m.frame_i, m.frame_j), std::max(m.frame_i, m.frame_j)}] = static_cast<int>(e);
    adjacent[m.frame_i].insert(m.frame_j);
    adjacent[m.frame_j].insert(m.frame_i);
  }
  auto edge_of = [&](int u, int v) {
    const auto it = index.find({std::min(u, v), std::max(u, v)});
    return it == index.end() ? -1 : it->second;
  };

  std::vector<std::vector<int>> cycles;
  for (int a = 0; a < n_nodes; ++a)
    for (const int b : adjacent[a]) {
      if (b <= a)
        continue;
      for (const int c : adjacent[b])
        if (c > b && adjacent[a].count(c))
          cycles.push_back({a, b, c});
      for (const int d : adjacent[a]) {
        if (d <= b || edge_of(b, d) >= 0)
          continue;
        for (const int c : adjacent[b])
          if (c > a && c != d && adjacent[d].count(c) && edge_of(a, c) < 0)
            cycles.push_back({a, b, c, d});
      }
    }

  std::vector<std::vector<double>> votes(edges.size());
  std::vector<std::vector<int>> counts(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    votes[e].assign(edges[e].candidates.size(), 0.0);
    counts[e].assign(edges[e].candidates.size(), 0);
  }
  for (const auto& cycle : cycles) {
    const int len = static_cast<int>(cycle.size());
    std::vector<int> ids(len);
    std::vector<double> sign(len);
    for (int k = 0; k < len; ++k) {
      const int u = cycle[k], v = cycle[(k + 1) % len];
      ids[k] = edge_of(u, v);
      sign[k] = edges[ids[k]].frame_i == u ? 1.0 : -1.0;
    }
    std::vector<int> pick(len, 0), best;
    double best_score = -1.0;
    while (true) {
      Shift closure{};
      double score = 0.0;
      for (int k = 0; k < len; ++k) {
        const auto& c = edges[ids[k]].candidates[pick[k]];
        closure = closure + c.delta * sign[k];
        score += c.coefficient;
      }
      if (std::hypot(closure.dy, closure.dx) <= tolerance_px && score > best_score) {
        best_score = score;
        best = pick;
      }
      int k = 0;
      while (k < len && ++pick[k] == static_cast<int>(edges[ids[k]].candidates.size()))
        pick[k++] = 0;
      if (k == len)
        break;
    }
    if (best.empty())
      continue;
    for (int k = 0; k < len; ++k) {
      votes[ids[k]][best[k]] += best_score;
      ++counts[ids[k]][best[k]];
    }
  }
  for (std::size_t e = 0; e < edges.size(); ++e) {
    auto& m = edges[e];
    for (std::size_t c = 0; c < votes[e].size(); ++c)
      if (votes[e][c] > votes[e][m.chosen])
        m.chosen = static_cast<int>(c);
    if (!votes[e].empty())
      m.cycle_support = counts[e][m.chosen];
  }
}

void reselect_by_consensus(int n_nodes, std::vector<ShiftMeasurement>& edges, double tolerance_px, int rounds) {
  for (int round = 0; round < rounds; ++round) {
    std::vector<ShiftMeasurement> provisional = edges;
    for (auto& m : provisional) {
      m.accepted = !m.candidates.empty() && (round > 0 ? m.consensus : m.cycle_support > 0);
      if (m.accepted) {
        m.delta = m.candidates[m.chosen].delta;
        m.confidence = std::max(m.candidates[m.chosen].coefficient, 1e-6);
      }
    }
    if (connected_components(n_nodes, provisional).size() != 1)
      return;
    const PositionSolution sol = solve_positions_robust(n_nodes, provisional, tolerance_px);
    for (auto& m : edges) {
      m.consensus = false;
      if (m.candidates.empty())
        continue;
      const Shift predicted = sol.positions[m.frame_j] - sol.positions[m.frame_i];
      m.predicted = Shift{std::round(predicted.dy), std::round(predicted.dx)};
      double best = -1.0;
      for (std::size_t c = 0; c < m.candidates.size(); ++c) {
        const Shift d = m.candidates[c].delta - predicted;
        if (std::hypot(d.dy, d.dx) <= tolerance_px && m.candidates[c].coefficient > best) {
          best = m.candidates[c].coefficient;
          m.chosen = static_cast<int>(c);
          m.consensus = true;
        }
      }
      m.note = m.consensus ? "" : "no peak consistent with the position consensus";
    }
  }
}

std::vector<std::vector<int>> connected_components(int n_nodes, const std::vector<ShiftMeasurement>& edges) {
  std::vector<int> parent(n_nodes);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x)
      x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& e : edges) {
    if (!e.accepted)
      continue;
    const int a = find(e.frame_i), b = find(e.frame_j);
    if (a != b)
      parent[std::max(a, b)] = std::min(a, b);
  }
  std::vector<std::vector<int>> groups;
  std::vector<int> index(n_nodes, -1);
  for (int v = 0; v < n_nodes; ++v) {
    const int root = find(v);
    if (index[root] < 0) {
      index[root] = static_cast<int>(groups.size());
      groups.emplace_back();
    }
    groups[index[root]].push_back(v);
  }
  return groups;
}

void require_connected(int n_nodes, const std::vector<ShiftMeasurement>& edges) {
  const auto groups = connected_components(n_nodes, edges);
  if (groups.size() <= 1)
    return;
  std::ostringstream msg;
  msg << "position graph is disconnected into " << groups.size() << " components:";
  for (const auto& g : groups) {
    msg << " {";
    for (std::size_t k = 0; k < g.size(); ++k)
      msg << (k ? "," : "") << g[k];
    msg << "}";
  }
  throw GraphError(msg.str());
}

namespace {

// Symmetric sparse matrix in compressed rows.
struct SparseMatrix {
  int n = 0;
  std::vector<int> row_start;
  std::vector<int> col;
  std::vector<double> val;

  void apply(const std::vector<double>& x, std::vector<double>& y) const {
    for (int r = 0; r < n; ++r) {
      double s = 0.0;
      for (int k = row_start[r]; k < row_start[r + 1]; ++k)
        s += val[k] * x[col[k]];
      y[r] = s;
    }
  }
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

int conjugate_gradient(const SparseMatrix& a, const std::vector<double>& b, std::vector<double>& x, double tol,
                       double& rel_residual) {
  std::vector<double> r(b), p, q(b.size());
  a.apply(x, q);
  for (std::size_t i = 0; i < r.size(); ++i)
    r[i] -= q[i];
  p = r;
  double rr = dot(r, r);
  const double b_norm = std::sqrt(dot(b, b));
  rel_residual = b_norm > 0.0 ? std::sqrt(rr) / b_norm : 0.0;
  if (b_norm == 0.0)
    return 0;
  const int max_it = 10 * a.n + 100;
  int it = 0;
  while (it < max_it && std::sqrt(rr) > tol * b_norm) {
    ++it;
    a.apply(p, q);
    const double alpha = rr / dot(p, q);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * q[i];
    }
    const double rr_new = dot(r, r);
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < p.size(); ++i)
      p[i] = r[i] + beta * p[i];
  }
  rel_residual = std::sqrt(rr) / b_norm;
  return it;
}

} // namespace

PositionSolution solve_positions(int n_nodes, const std::vector<ShiftMeasurement>& edges, double tolerance) {
  if (n_nodes < 1)
    throw GraphError("position graph has no nodes");
  require_connected(n_nodes, edges);
  PositionSolution sol;
  sol.positions.assign(n_nodes, Shift{});
  if (n_nodes == 1)
    return sol;

  // Reduced system over nodes 1..n-1 (node 0 anchored at the origin).
  const int m = n_nodes - 1;
  std::vector<std::vector<std::pair<int, double>>> rows(m);
  std::vector<double> diag(m, 0.0), by(m, 0.0), bx(m, 0.0);
  auto add = [&](int r, int c, double v) {
    for (auto& [cc, vv] : rows[r])
      if (cc == c) {
        vv += v;
        return;
      }
    rows[r].emplace_back(c, v);
  };
  for (const auto& e : edges) {
    if (!e.accepted)
      continue;
    const double w = e.confidence;
    if (!(w > 0.0) || !std::isfinite(w))
      throw GraphError("edge weights must be positive and finite");
    const int i = e.frame_i - 1, j = e.frame_j - 1;
    if (i >= 0) {
      diag[i] += w;
      by[i] -= w * e.delta.dy;
      bx[i] -= w * e.delta.dx;
    }
    if (j >= 0) {
      diag[j] += w;
      by[j] += w * e.delta.dy;
      bx[j] += w * e.delta.dx;
    }
    if (i >= 0 && j >= 0) {
      add(i, j, -w);
      add(j, i, -w);
    }
  }
  SparseMatrix a;
  a.n = m;
  a.row_start.push_back(0);
  for (int r = 0; r < m; ++r) {
    rows[r].emplace_back(r, diag[r]);
    std::sort(rows[r].begin(), rows[r].end());
    for (const auto& [c, v] : rows[r]) {
      a.col.push_back(c);
      a.val.push_back(v);
    }
    a.row_start.push_back(static_cast<int>(a.col.size()));
  }
  std::vector<double> y(m, 0.0), x(m, 0.0);
  double ry = 0.0, rx = 0.0;
  sol.cg_iterations = conjugate_gradient(a, by, y, tolerance, ry);
  sol.cg_iterations = std::max(sol.cg_iterations, conjugate_gradient(a, bx, x, tolerance, rx));
  sol.relative_residual = std::max(ry, rx);
  for (int r = 0; r < m; ++r)
    sol.positions[r + 1] = {y[r], x[r]};
  return sol;
}

PositionSolution solve_positions_robust(int n_nodes, std::vector<ShiftMeasurement>& edges, double outlier_px,
                                        int max_rejections) {
  PositionSolution sol = solve_positions(n_nodes, edges);
  for (int round = 0; round < max_rejections; ++round) {
    std::vector<std::pair<double, std::size_t>> residuals;
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const auto& m = edges[e];
      if (!m.accepted)
        continue;
      const Shift predicted = sol.positions[m.frame_j] - sol.positions[m.frame_i];
      const double r = std::hypot(predicted.dy - m.delta.dy, predicted.dx - m.delta.dx);
      if (r > outlier_px)
        residuals.emplace_back(r, e);
    }
    if (residuals.empty())
      break;
    std::sort(residuals.rbegin(), residuals.rend());
    bool removed = false;
    for (const auto& [r, e] : residuals) {
      edges[e].accepted = false;
      if (connected_components(n_nodes, edges).size() == 1) {
        edges[e].note = "inconsistent with the position solution";
        removed = true;
        break;
      }
      edges[e].accepted = true;
    }
    if (!removed)
      break;
    sol = solve_positions(n_nodes, edges);
  }
  return sol;
}

PositionScore score_positions(const std::vector<Shift>& recovered, const std::vector<Shift>& truth) {
  if (recovered.size() != truth.size() || recovered.empty())
    throw ConfigError("score_positions: recovered and truth frame counts differ");
  const std::size_t n = recovered.size();
  Shift mean{};
  for (std::size_t k = 0; k < n; ++k)
    mean = mean + (recovered[k] - truth[k]);
  mean = mean * (1.0 / n);
  PositionScore s;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const Shift e = recovered[k] - truth[k] - mean;
    const double mag = std::hypot(e.dy, e.dx);
    s.errors.push_back(e);
    s.magnitudes.push_back(mag);
    sum += mag;
    sum2 += mag * mag;
  }
  s.mean = sum / n;
  s.rms = std::sqrt(sum2 / n);
  s.std = std::sqrt(std::max(0.0, sum2 / n - s.mean * s.mean));
  return s;
}

void write_edges_csv(const std::string& path, const std::vector<ShiftMeasurement>& edges) {
  std::string text = "i,j,dy,dx,confidence,peak_ratio,accepted\n";
  for (const auto& e : edges)
    text += std::to_string(e.frame_i) + "," + std::to_string(e.frame_j) + "," + format_number(e.delta.dy) + "," +
            format_number(e.delta.dx) + "," + format_number(e.confidence) + "," + format_number(e.peak_ratio) + "," +
            (e.accepted ? "1" : "0") + "\n";
  write_text(path, text);
}

} // namespace sdi
