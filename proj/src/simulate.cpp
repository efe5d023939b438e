#include "sdi/simulate.hpp"

#include "sdi/errors.hpp"
#include "sdi/fft.hpp"
#include "sdi/image_io.hpp"
#include "sdi/parallel.hpp"
#include "sdi/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace sdi {

namespace {

constexpr double kPi = std::numbers::pi;

bool nearly_equal(double a, double b, double rel) { return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)); }

} // namespace

// ---------------------------------------------------------------- probe

ComplexField generate_probe(Shape shape, double pitch, double wavelength, const ProbeSpec& spec) {
  const double radius_px = spec.diameter / (2.0 * pitch);
  const int n_min = std::min(shape.rows, shape.cols);
  if (!(spec.diameter > 0.0))
    throw ConfigError("probe diameter must be positive");
  if (2.0 * radius_px > 0.8 * n_min) {
    std::ostringstream msg;
    msg << "probe diameter " << 2.0 * radius_px << " px leaves less than 20% margin in a " << n_min
        << " px grid";
    throw ConfigError(msg.str());
  }
  ComplexField probe(shape, pitch, "probe");
  const RealGrid disk = disk_mask(shape, radius_px);
  for (std::size_t i = 0; i < probe.size(); ++i)
    probe[i] = disk[i];

  if (spec.kind == ProbeKind::Divergent) {
    if (spec.focal == 0.0 || !std::isfinite(spec.focal))
      throw ConfigError("divergent probe needs a finite non-zero focal distance");
    // Local spatial frequency of the lens phase at the rim must stay below Nyquist.
    const double rim_frequency = (spec.diameter / 2.0) / (wavelength * std::abs(spec.focal));
    if (rim_frequency > 0.5 / pitch) {
      std::ostringstream msg;
      msg << "quadratic probe phase is undersampled at the aperture rim; |focal| must exceed "
          << spec.diameter * pitch / wavelength << " m";
      throw PhysicsError(msg.str());
    }
    const double cy = shape.rows / 2, cx = shape.cols / 2;
    for (int y = 0; y < shape.rows; ++y)
      for (int x = 0; x < shape.cols; ++x) {
        const double r2 = (std::pow(y - cy, 2) + std::pow(x - cx, 2)) * pitch * pitch;
        probe(y, x) *= std::polar(1.0, -kPi * r2 / (wavelength * spec.focal));
      }
  }
  if (spec.defocus != 0.0)
    probe = propagate_near(probe, spec.defocus, wavelength);
  probe *= 1.0 / std::sqrt(probe.power());
  probe.set_label("probe");
  return probe;
}

double intensity_fwhm(const ComplexField& f) {
  const int row = f.rows() / 2;
  std::vector<double> line(f.cols());
  for (int x = 0; x < f.cols(); ++x)
    line[x] = std::norm(f(row, x));
  const double half = 0.5 * *std::max_element(line.begin(), line.end());
  int first = 0, last = f.cols() - 1;
  while (first < f.cols() && line[first] < half)
    ++first;
  while (last >= 0 && line[last] < half)
    --last;
  if (first > last)
    return 0.0;
  auto crossing = [&](int inside, int outside) {
    if (outside < 0 || outside >= f.cols())
      return static_cast<double>(inside);
    const double t = (line[inside] - half) / (line[inside] - line[outside]);
    return inside + t * (outside - inside);
  };
  return crossing(last, last + 1) - crossing(first, first - 1);
}

// ---------------------------------------------------------------- sample

MazeLayout generate_maze_layout(int cells_y, int cells_x, std::uint64_t seed) {
  if (cells_y < 1 || cells_x < 1)
    throw ConfigError("maze needs at least one cell per axis");
  MazeLayout maze;
  maze.cells_y = cells_y;
  maze.cells_x = cells_x;
  const std::size_t n = static_cast<std::size_t>(cells_y) * cells_x;
  maze.top.assign(n, 1);
  maze.left.assign(n, 1);
  std::vector<std::uint8_t> visited(n, 0);
  std::mt19937_64 rng(seed);

  // Randomized depth-first search with an explicit stack.
  std::vector<std::pair<int, int>> stack{{0, 0}};
  visited[0] = 1;
  while (!stack.empty()) {
    const auto [i, j] = stack.back();
    std::pair<int, int> options[4];
    int count = 0;
    const std::pair<int, int> moves[4] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    for (const auto& [di, dj] : moves) {
      const int ni = i + di, nj = j + dj;
      if (ni >= 0 && ni < cells_y && nj >= 0 && nj < cells_x && !visited[static_cast<std::size_t>(ni) * cells_x + nj])
        options[count++] = {ni, nj};
    }
    if (count == 0) {
      stack.pop_back();
      continue;
    }
    const auto [ni, nj] = options[uniform_index(rng, static_cast<std::uint64_t>(count))];
    if (ni > i)
      maze.top[static_cast<std::size_t>(ni) * cells_x + nj] = 0;
    else if (ni < i)
      maze.top[static_cast<std::size_t>(i) * cells_x + j] = 0;
    else if (nj > j)
      maze.left[static_cast<std::size_t>(ni) * cells_x + nj] = 0;
    else
      maze.left[static_cast<std::size_t>(i) * cells_x + j] = 0;
    visited[static_cast<std::size_t>(ni) * cells_x + nj] = 1;
    stack.emplace_back(ni, nj);
  }
  return maze;
}

RealGrid rasterize_maze(const MazeLayout& maze, Shape shape, int wall_px) {
  if (shape.rows % maze.cells_y || shape.cols % maze.cells_x)
    throw ConfigError("maze size must be a multiple of the cell count");
  const int py = shape.rows / maze.cells_y;
  const int px = shape.cols / maze.cells_x;
  if (wall_px < 1 || wall_px >= std::min(py, px))
    throw ConfigError("maze wall width must be at least 1 px and narrower than a cell");
  RealGrid walls(shape);
  for (int y = 0; y < shape.rows; ++y) {
    const int i = y / py, ly = y % py;
    for (int x = 0; x < shape.cols; ++x) {
      const int j = x / px, lx = x % px;
      const bool post = ly < wall_px && lx < wall_px;
      const bool top = ly < wall_px && maze.top_wall(i, j);
      const bool left = lx < wall_px && maze.left_wall(i, j);
      walls(y, x) = (post || top || left) ? 1.0 : 0.0;
    }
  }
  return walls;
}

namespace {

void check_ranges(const SampleSpec& spec) {
  if (spec.amplitude.lo > spec.amplitude.hi || spec.phase.lo > spec.phase.hi)
    throw ConfigError("sample amplitude/phase range is empty (lo > hi)");
  if (!(spec.amplitude.lo > 0.0) || spec.amplitude.hi > 1.0)
    throw ConfigError("sample amplitude range must lie in (0, 1]");
  if (spec.phase.lo < -kPi || spec.phase.hi > kPi)
    throw ConfigError("sample phase range must lie in [-pi, pi]");
}

RealGrid normalize_min_max(RealGrid img) {
  const auto [mn, mx] = std::minmax_element(img.values().begin(), img.values().end());
  const double lo = *mn, span = *mx - *mn;
  for (auto& v : img.values())
    v = span > 0.0 ? (v - lo) / span : 0.0;
  return img;
}

} // namespace

ComplexField generate_sample(const SampleSpec& spec, double pitch) {
  check_ranges(spec);
  RealGrid amplitude_t, phase_t;
  if (spec.kind == SampleSpec::Kind::Maze) {
    const auto maze = generate_maze_layout(spec.cells, spec.cells, spec.seed);
    const RealGrid walls = rasterize_maze(maze, {spec.size, spec.size}, spec.wall_px);
    amplitude_t = walls;
    for (auto& v : amplitude_t.values())
      v = 1.0 - v;
    phase_t = walls;
  } else {
    amplitude_t = normalize_min_max(read_pgm(spec.amplitude_image));
    if (!spec.phase_image.empty()) {
      phase_t = normalize_min_max(read_pgm(spec.phase_image));
      require_same_shape(amplitude_t.shape(), phase_t.shape(), "sample import");
    } else {
      phase_t = RealGrid(amplitude_t.shape(), 0.0);
    }
  }
  ComplexField sample(amplitude_t.shape(), pitch, "sample");
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double a = spec.amplitude.lo + (spec.amplitude.hi - spec.amplitude.lo) * amplitude_t[i];
    const double p = spec.phase.lo + (spec.phase.hi - spec.phase.lo) * phase_t[i];
    sample[i] = std::polar(a, p);
  }
  return sample;
}

// ---------------------------------------------------------------- modulator

ComplexField generate_modulator(Shape shape, double pitch, const ModulatorSpec& spec) {
  if (spec.feature_px < 1)
    throw ConfigError("modulator feature size must be at least 1 px");
  if (spec.phase_depth < 0.0 || spec.phase_depth > 2.0 * kPi)
    throw ConfigError("modulator phase depth must lie in [0, 2pi]");
  if (spec.density < 0.0 || spec.density > 1.0)
    throw ConfigError("modulator density must lie in [0, 1]");
  const bool grating = spec.kind == ModulatorSpec::Kind::Grating;
  if ((grating || spec.period_px > 0.0) && spec.period_px < 2.0)
    throw ConfigError("modulator period must be at least 2 px");

  ComplexField m(shape, pitch, "modulator", cplx{1.0, 0.0});
  const cplx retard = std::polar(1.0, spec.phase_depth);
  if (grating) {
    for (int y = 0; y < shape.rows; ++y)
      for (int x = 0; x < shape.cols; ++x) {
        const double t = x / spec.period_px;
        if (t - std::floor(t) < spec.density)
          m(y, x) = retard;
      }
    return m;
  }
  const int tile = spec.period_px > 0.0 ? static_cast<int>(std::lround(spec.period_px)) : 0;
  const int span_y = tile ? tile : shape.rows;
  const int span_x = tile ? tile : shape.cols;
  const int blocks_y = (span_y + spec.feature_px - 1) / spec.feature_px;
  const int blocks_x = (span_x + spec.feature_px - 1) / spec.feature_px;
  std::vector<std::uint8_t> on(static_cast<std::size_t>(blocks_y) * blocks_x);
  std::mt19937_64 rng(spec.seed);
  for (auto& b : on)
    b = uniform01(rng) < spec.density ? 1 : 0;
  for (int y = 0; y < shape.rows; ++y)
    for (int x = 0; x < shape.cols; ++x) {
      const int by = (y % span_y) / spec.feature_px;
      const int bx = (x % span_x) / spec.feature_px;
      if (on[static_cast<std::size_t>(by) * blocks_x + bx])
        m(y, x) = retard;
    }
  return m;
}

// ---------------------------------------------------------------- scan

ScanPlan make_scan_plan(int rows, int cols, double step_px, double jitter_px, std::uint64_t seed) {
  if (!(step_px > 0.0))
    throw ConfigError("scan step must be positive");
  if (rows < 1 || cols < 1 || rows * cols < 2)
    throw ConfigError("scan plan needs at least two frames");
  if (jitter_px < 0.0)
    throw ConfigError("scan jitter must be non-negative");
  ScanPlan plan;
  plan.grid_rows = rows;
  plan.grid_cols = cols;
  std::mt19937_64 rng(seed);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      Shift p{(r - 0.5 * (rows - 1)) * step_px, (c - 0.5 * (cols - 1)) * step_px};
      if (jitter_px > 0.0) {
        p.dy += uniform(rng, -jitter_px, jitter_px);
        p.dx += uniform(rng, -jitter_px, jitter_px);
      }
      plan.positions.push_back(p);
    }
  return plan;
}

void validate_plan(const ScanPlan& plan, Shape sample_shape, Shape frame_shape) {
  if (plan.size() < 2)
    throw ConfigError("scan plan needs at least two frames");
  const double limit_y = 0.5 * (sample_shape.rows - frame_shape.rows);
  const double limit_x = 0.5 * (sample_shape.cols - frame_shape.cols);
  for (std::size_t n = 0; n < plan.size(); ++n) {
    const auto& p = plan.positions[n];
    if (std::abs(p.dy) > limit_y || std::abs(p.dx) > limit_x) {
      std::ostringstream msg;
      msg << "scan position " << n << " (" << p.dy << ", " << p.dx << ") px moves the frame outside the "
          << sample_shape.rows << "x" << sample_shape.cols << " sample";
      throw ConfigError(msg.str());
    }
  }
}

std::vector<int> sparse_grid_indices(const ScanPlan& plan, int stride) {
  if (plan.grid_rows * plan.grid_cols != static_cast<int>(plan.size()))
    throw ConfigError("sparse subsampling needs a raster plan with known grid shape");
  if (stride < 1)
    throw ConfigError("stride must be at least 1");
  std::vector<int> keep;
  for (int r = 0; r < plan.grid_rows; r += stride)
    for (int c = 0; c < plan.grid_cols; c += stride)
      keep.push_back(r * plan.grid_cols + c);
  return keep;
}

std::vector<Shift> drift_offsets(const DriftModel& model, std::size_t n_frames) {
  if (model.amplitude < 0.0)
    throw ConfigError("drift amplitude must be non-negative");
  std::vector<Shift> drift(n_frames);
  if (model.kind == DriftModel::Kind::None || n_frames < 2 || model.amplitude == 0.0)
    return drift;
  if (model.kind == DriftModel::Kind::Linear) {
    const double norm = std::hypot(model.direction.dy, model.direction.dx);
    if (norm == 0.0)
      throw ConfigError("linear drift needs a non-zero direction");
    const Shift unit = model.direction * (1.0 / norm);
    for (std::size_t n = 0; n < n_frames; ++n)
      drift[n] = unit * (model.amplitude * n / (n_frames - 1));
    return drift;
  }
  std::mt19937_64 rng(model.seed);
  const double sigma = model.amplitude / std::sqrt(static_cast<double>(n_frames - 1));
  for (std::size_t n = 1; n < n_frames; ++n)
    drift[n] = drift[n - 1] + Shift{sigma * standard_normal(rng), sigma * standard_normal(rng)};
  return drift;
}

// ---------------------------------------------------------------- overlap

double lens_overlap(double distance, double diameter) {
  if (!(diameter > 0.0))
    throw ConfigError("probe diameter must be positive");
  const double d = std::abs(distance);
  if (d >= diameter)
    return 0.0;
  const double r = 0.5 * diameter;
  const double area = 2.0 * r * r * std::acos(d / (2.0 * r)) - 0.5 * d * std::sqrt(4.0 * r * r - d * d);
  return std::clamp(area / (kPi * r * r), 0.0, 1.0);
}

double step_for_overlap(double ratio, double diameter) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ConfigError("overlap ratio must lie in (0, 1)");
  double lo = 0.0, hi = diameter;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (lens_overlap(mid, diameter) > ratio ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

OverlapReport overlap_ratio(const ScanPlan& plan, double probe_diameter_px) {
  OverlapReport report;
  const int n = static_cast<int>(plan.size());
  std::vector<std::pair<int, int>> seen;
  for (int i = 0; i < n; ++i) {
    int best = -1;
    double best_d = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == i)
        continue;
      const Shift d = plan.positions[j] - plan.positions[i];
      const double dist = std::hypot(d.dy, d.dx);
      if (best < 0 || dist < best_d) {
        best = j;
        best_d = dist;
      }
    }
    if (best < 0)
      continue;
    const std::pair<int, int> key{std::min(i, best), std::max(i, best)};
    if (std::find(seen.begin(), seen.end(), key) != seen.end())
      continue;
    seen.push_back(key);
    report.pairs.push_back({key.first, key.second, best_d, lens_overlap(best_d, probe_diameter_px)});
  }
  double sum = 0.0;
  for (const auto& p : report.pairs)
    sum += p.ratio;
  report.mean = report.pairs.empty() ? 0.0 : sum / report.pairs.size();
  return report;
}

double probe_footprint_px(const ComplexField& probe) { return 2.0 * power_radius(probe, 0.9); }

// ---------------------------------------------------------------- dataset

void ScanDataset::validate() const {
  if (frames.empty())
    throw ConfigError("dataset has no frames");
  const Shape shape = frames.front().shape();
  for (std::size_t n = 0; n < frames.size(); ++n) {
    require_same_shape(frames[n].shape(), shape, "dataset frame");
    for (double v : frames[n].values())
      if (!(v >= 0.0) || !std::isfinite(v))
        throw ConfigError("dataset frame " + std::to_string(n) + " has a negative or non-finite intensity");
  }
}

SamplePatcher::SamplePatcher(const ComplexField& sample) : spectrum_(sample) {
  fft::centered(spectrum_, fft::Direction::Forward);
}

ComplexField SamplePatcher::patch(Shift position, Shape frame_shape) const {
  ComplexField shifted = spectrum_;
  const int h = shifted.rows(), w = shifted.cols();
  if (position.dy != 0.0 || position.dx != 0.0) {
    std::vector<cplx> ry(h), rx(w);
    for (int y = 0; y < h; ++y)
      ry[y] = std::polar(1.0, 2.0 * kPi * (y - h / 2) * position.dy / h);
    for (int x = 0; x < w; ++x)
      rx[x] = std::polar(1.0, 2.0 * kPi * (x - w / 2) * position.dx / w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        shifted(y, x) *= ry[y] * rx[x];
  }
  fft::centered(shifted, fft::Direction::Inverse);
  auto out = crop_center(shifted, frame_shape);
  out.set_label("patch");
  return out;
}

ComplexField sample_patch(const ComplexField& sample, Shift position, Shape frame_shape) {
  return SamplePatcher(sample).patch(position, frame_shape);
}

double poisson_draw(double mean, std::mt19937_64& rng) {
  if (!(mean > 0.0))
    return 0.0;
  if (mean < 30.0) {
    const double u = uniform01(rng);
    double p = std::exp(-mean);
    double cdf = p;
    int k = 0;
    while (u > cdf && k < 1000) {
      ++k;
      p *= mean / k;
      cdf += p;
    }
    return k;
  }
  return std::max(0.0, std::round(mean + std::sqrt(mean) * standard_normal(rng)));
}

ScanDataset synthesize_dataset(const ComplexField& sample, const ComplexField& probe,
                               const ComplexField& modulator, const ScanPlan& plan, const DriftModel& drift,
                               const Geometry& geometry, const SynthesisOptions& options) {
  const Shape frame_shape = probe.shape();
  if (frame_shape.rows != frame_shape.cols)
    throw ConfigError("frames must be square");
  require_same_shape(modulator.shape(), frame_shape, "modulator vs probe");
  geometry.validate(frame_shape.rows);
  for (const auto* f : {&sample, &probe, &modulator})
    if (!nearly_equal(f->pitch(), geometry.sample_plane_pitch, 1e-9))
      throw ConfigError("field '" + f->label() + "' pitch does not match the sample-plane pitch");
  validate_plan(plan, sample.shape(), frame_shape);
  if (!(options.photons > 0.0))
    throw ConfigError("photons per frame must be positive");

  const auto offsets = drift_offsets(drift, plan.size());
  const SamplePatcher patcher(sample);
  const NearPropagator near(frame_shape, geometry.sample_plane_pitch, geometry.z_sample_to_modulator,
                            geometry.wavelength);
  const bool counting = std::isfinite(options.photons);
  const double scale = counting ? options.photons / probe.power() : 1.0;

  ScanDataset ds;
  ds.geometry = geometry;
  ds.photons = options.photons;
  ds.seed = options.seed;
  ds.grid_rows = plan.grid_rows;
  ds.grid_cols = plan.grid_cols;
  ds.frames.assign(plan.size(), RealGrid(frame_shape));

  parallel_for_each_index(plan.size(), [&](std::size_t n) {
    ComplexField wave = patcher.patch(plan.positions[n], frame_shape);
    const Shift d = offsets[n];
    wave *= (d.dy == 0.0 && d.dx == 0.0) ? probe : fourier_shift(probe, d);
    near.forward_inplace(wave.grid());
    wave *= modulator;
    far_inplace(wave.grid());
    RealGrid& frame = ds.frames[n];
    if (counting) {
      std::mt19937_64 rng(stream_seed(options.seed, n));
      for (std::size_t i = 0; i < frame.size(); ++i)
        frame[i] = poisson_draw(scale * std::norm(wave[i]), rng);
    } else {
      for (std::size_t i = 0; i < frame.size(); ++i)
        frame[i] = std::norm(wave[i]);
    }
  });

  ds.truth = Truth{sample, probe, modulator, plan, offsets};
  return ds;
}

} // namespace sdi
