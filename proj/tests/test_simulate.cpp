#include "helpers.hpp"

#include "sdi/dataset.hpp"
#include "sdi/errors.hpp"
#include "sdi/field_io.hpp"

#include <doctest.h>

#include <numbers>

using namespace sdi;
using namespace sdi::test;

namespace {

const Geometry kOptical = Geometry::far_field_from(632.8e-9, 11.5e-3, 30e-3, 6.5e-6, 128);

/// Azimuthal mean of |f|^2 in unit-width radial bins about the grid center.
std::vector<double> radial_profile(const ComplexField& f) {
  const int n = f.rows();
  std::vector<double> sum(n, 0.0), count(n, 0.0);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < f.cols(); ++x) {
      const auto r = static_cast<std::size_t>(std::lround(std::hypot(y - n / 2, x - f.cols() / 2)));
      if (r < sum.size()) {
        sum[r] += std::norm(f(y, x));
        count[r] += 1.0;
      }
    }
  for (std::size_t r = 0; r < sum.size(); ++r)
    sum[r] = count[r] > 0 ? sum[r] / count[r] : 0.0;
  return sum;
}

double outermost_above(const std::vector<double>& profile, double level) {
  for (std::size_t r = profile.size(); r-- > 0;)
    if (profile[r] >= level)
      return static_cast<double>(r);
  return 0.0;
}

double phase_autocorrelation_x(const ComplexField& m, int lag) {
  double mean = 0.0;
  for (const auto& v : m.values())
    mean += std::arg(v);
  mean /= static_cast<double>(m.size());
  double num = 0.0, den = 0.0;
  for (int y = 0; y < m.rows(); ++y)
    for (int x = 0; x < m.cols(); ++x) {
      const double a = std::arg(m(y, x)) - mean;
      const double b = std::arg(m(y, (x + lag) % m.cols())) - mean;
      num += a * b;
      den += a * a;
    }
  return num / den;
}

ComplexField ones(int n, double pitch) { return ComplexField(n, n, pitch, "", cplx(1.0)); }

} // namespace

TEST_CASE("probe generation") {
  const double pitch = kOptical.sample_plane_pitch, wl = kOptical.wavelength;
  SUBCASE("in-focus aperture is a binary disk of unit power") {
    ProbeSpec spec;
    spec.diameter = 1e-3;
    spec.defocus = 0.0;
    const ComplexField p = generate_probe({128, 128}, pitch, wl, spec);
    CHECK(p.power() == doctest::Approx(1.0).epsilon(1e-12));
    double level = 0.0;
    int lit = 0;
    for (const auto& v : p.values())
      if (std::abs(v) > 0.0) {
        level = std::abs(v);
        ++lit;
      }
    for (const auto& v : p.values())
      CHECK((std::abs(v) == 0.0 || std::abs(std::abs(v) - level) < 1e-12));
    const double radius_px = 0.5e-3 / pitch;
    CHECK(lit == doctest::Approx(std::numbers::pi * radius_px * radius_px).epsilon(0.03));
  }
  SUBCASE("1 mm defocus keeps the aperture edge sharp") {
    ProbeSpec spec;
    spec.defocus = 1e-3;
    const ComplexField p = generate_probe({128, 128}, pitch, wl, spec);
    CHECK(p.power() == doctest::Approx(1.0).epsilon(1e-9));
    const auto prof = radial_profile(p);
    double interior = 0.0;
    for (int r = 0; r < 10; ++r)
      interior += prof[r] / 10.0;
    CHECK(outermost_above(prof, 0.1 * interior) - outermost_above(prof, 0.9 * interior) < 2.0);
    CHECK(probe_footprint_px(p) == doctest::Approx(1e-3 / pitch).epsilon(0.1));
  }
  SUBCASE("divergent probe widens with distance") {
    ProbeSpec spec;
    spec.kind = ProbeKind::Divergent;
    spec.diameter = 0.5e-3;
    spec.focal = -5e-3;
    double previous = 0.0;
    for (double z : {0.0, 0.5e-3, 1e-3, 2e-3}) {
      spec.defocus = z;
      const double fwhm = intensity_fwhm(generate_probe({256, 256}, 5e-6, wl, spec));
      CHECK(fwhm > previous);
      previous = fwhm;
    }
    // geometric growth by (1 + z / |f|) = 1.4 over 2 mm
    CHECK(previous == doctest::Approx(1.4 * 0.5e-3 / 5e-6).epsilon(0.1));
  }
}

TEST_CASE("maze sample") {
  SUBCASE("layout is a spanning tree of the periodic cell lattice") {
    const MazeLayout m = generate_maze_layout(16, 16, 4);
    int open = 0;
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j)
        open += !m.top_wall(i, j) + !m.left_wall(i, j);
    CHECK(open == 16 * 16 - 1);
    for (int k = 0; k < 16; ++k) {
      CHECK(m.top_wall(0, k));
      CHECK(m.left_wall(k, 0));
    }
  }
  SUBCASE("rasterized wall count") {
    // C w^2 posts plus (C + 1) closed walls of w (p - w) pixels
    const RealGrid walls = rasterize_maze(generate_maze_layout(16, 16, 9), {128, 128}, 1);
    double count = 0.0;
    for (double v : walls.values())
      count += v;
    CHECK(count == 2055.0);
  }
  SUBCASE("deterministic per seed") {
    SampleSpec spec;
    spec.size = 128;
    spec.cells = 16;
    spec.seed = 21;
    const ComplexField a = generate_sample(spec, 1e-6), b = generate_sample(spec, 1e-6);
    CHECK(max_abs_diff(a, b) == 0.0);
    spec.seed = 22;
    CHECK(max_abs_diff(a, generate_sample(spec, 1e-6)) > 0.1);
  }
  SUBCASE("walls and passages map to the amplitude and phase ranges") {
    SampleSpec spec;
    spec.size = 128;
    spec.cells = 16;
    spec.wall_px = 1;
    spec.seed = 9;
    const ComplexField s = generate_sample(spec, 1e-6);
    const RealGrid walls = rasterize_maze(generate_maze_layout(16, 16, 9), {128, 128}, 1);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const cplx expected = walls[i] > 0.5 ? std::polar(0.7, 1.0) : cplx(1.0);
      CHECK(std::abs(s[i] - expected) < 1e-12);
    }
    spec.amplitude = {1.0, 1.0};
    spec.phase = {0.0, 0.0};
    const ComplexField flat = generate_sample(spec, 1e-6);
    for (const auto& v : flat.values())
      CHECK(v == cplx(1.0));
  }
}

TEST_CASE("modulator generation") {
  SUBCASE("zero phase depth is transparent") {
    ModulatorSpec spec;
    spec.phase_depth = 0.0;
    const ComplexField m = generate_modulator({64, 64}, 1e-6, spec);
    for (const auto& v : m.values())
      CHECK(std::abs(v - 1.0) < 1e-15);
  }
  SUBCASE("grating repeats with its period") {
    ModulatorSpec spec;
    spec.kind = ModulatorSpec::Kind::Grating;
    spec.period_px = 54;
    const double pitch = 7.1e-9;
    const ComplexField m = generate_modulator({216, 216}, pitch, spec);
    CHECK(spec.period_px * pitch == doctest::Approx(383e-9).epsilon(0.002));
    for (int y = 0; y < 216; y += 7)
      for (int x = 0; x + 54 < 216; ++x)
        CHECK(std::abs(m(y, x) - m(y, x + 54)) < 1e-12);
    double lo = 1e9, hi = -1e9;
    for (const auto& v : m.values()) {
      CHECK(std::abs(v) == doctest::Approx(1.0));
      lo = std::min(lo, std::arg(v));
      hi = std::max(hi, std::arg(v));
    }
    CHECK(hi - lo > 1.0);
  }
  SUBCASE("random features decorrelate beyond their size") {
    ModulatorSpec spec;
    spec.feature_px = 4;
    spec.phase_depth = 1.0;
    const ComplexField m = generate_modulator({256, 256}, 1e-6, spec);
    for (const auto& v : m.values())
      CHECK(std::abs(v) == doctest::Approx(1.0));
    CHECK(phase_autocorrelation_x(m, 1) > 0.5);
    for (int lag = 4; lag <= 12; ++lag)
      CHECK(std::abs(phase_autocorrelation_x(m, lag)) < 0.1);
  }
}

TEST_CASE("scan plans") {
  const ScanPlan small = make_scan_plan(2, 2, 10.0, 0.0, 1);
  REQUIRE(small.size() == 4);
  CHECK(small.positions[0].dy == -5.0);
  CHECK(small.positions[0].dx == -5.0);
  CHECK(small.positions[3].dy == 5.0);
  CHECK(small.positions[3].dx == 5.0);

  const ScanPlan big = make_scan_plan(12, 12, 20.0, 2.0, 3);
  CHECK(big.size() == 144);
  CHECK(big.grid_rows == 12);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c) {
      const Shift p = big.positions[r * 12 + c];
      CHECK(std::abs(p.dy - (r - 5.5) * 20.0) <= 2.0);
      CHECK(std::abs(p.dx - (c - 5.5) * 20.0) <= 2.0);
    }
  CHECK_THROWS_AS(make_scan_plan(1, 1, 10.0, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(validate_plan(make_scan_plan(2, 2, 500.0, 0.0, 1), {512, 512}, {128, 128}), ConfigError);
  CHECK_NOTHROW(validate_plan(big, {512, 512}, {128, 128}));

  CHECK(sparse_grid_indices(make_scan_plan(8, 8, 10.0, 0.0, 1), 2).size() == 16);
  CHECK(sparse_grid_indices(make_scan_plan(9, 9, 10.0, 0.0, 1), 2) ==
        sparse_grid_indices(make_scan_plan(9, 9, 10.0, 0.0, 1), 2));
  CHECK(sparse_grid_indices(make_scan_plan(9, 9, 10.0, 0.0, 1), 2).size() == 25);
}

TEST_CASE("drift models") {
  DriftModel d;
  d.kind = DriftModel::Kind::Linear;
  d.amplitude = 5.0;
  d.direction = {0.0, 1.0};
  const auto off = drift_offsets(d, 81);
  CHECK(off[0].dy == 0.0);
  CHECK(off[0].dx == 0.0);
  CHECK(off[80].dx == doctest::Approx(5.0));
  CHECK(off[40].dx == doctest::Approx(2.5));
  d.kind = DriftModel::Kind::RandomWalk;
  const auto walk = drift_offsets(d, 50);
  CHECK(walk[0].dx == 0.0);
  CHECK(drift_offsets(d, 50)[49].dx == walk[49].dx);
  d.kind = DriftModel::Kind::None;
  for (const auto& s : drift_offsets(d, 10))
    CHECK((s.dy == 0.0 && s.dx == 0.0));
}

TEST_CASE("overlap geometry") {
  CHECK(lens_overlap(0.0, 40.0) == doctest::Approx(1.0));
  CHECK(lens_overlap(40.0, 40.0) == 0.0);
  CHECK(lens_overlap(20.0, 40.0) == doctest::Approx(0.3910).epsilon(1e-3));
  for (double ratio : {0.1, 0.25, 0.4, 0.6})
    CHECK(lens_overlap(step_for_overlap(ratio, 41.2), 41.2) == doctest::Approx(ratio).epsilon(1e-9));
  const OverlapReport rep = overlap_ratio(make_scan_plan(3, 3, 20.0, 0.0, 1), 40.0);
  CHECK(rep.mean == doctest::Approx(0.3910).epsilon(1e-3));
}

TEST_CASE("forward model") {
  const double pitch = kOptical.sample_plane_pitch;
  ProbeSpec ps;
  ps.defocus = 1e-3;
  const ComplexField probe = generate_probe({128, 128}, pitch, kOptical.wavelength, ps);
  ModulatorSpec ms;
  ms.seed = 5;
  const ComplexField mod = generate_modulator({128, 128}, pitch, ms);
  const ScanPlan plan = make_scan_plan(3, 3, 17.0, 1.5, 2);

  SUBCASE("uniform sample and transparent modulator give identical frames") {
    ModulatorSpec flat;
    flat.phase_depth = 0.0;
    const ScanDataset ds = synthesize_dataset(ones(256, pitch), probe, generate_modulator({128, 128}, pitch, flat),
                                              plan, {}, kOptical, {});
    for (std::size_t n = 1; n < ds.size(); ++n)
      for (std::size_t i = 0; i < ds.frames[0].size(); ++i)
        CHECK(std::abs(ds.frames[n][i] - ds.frames[0][i]) < 1e-12);
  }
  SUBCASE("energy is conserved without noise") {
    const ScanDataset ds = synthesize_dataset(ones(256, pitch), probe, mod, plan, {}, kOptical, {});
    for (const auto& f : ds.frames) {
      double total = 0.0;
      for (double v : f.values())
        total += v;
      CHECK(total == doctest::Approx(probe.power()).epsilon(1e-10));
    }
  }
  SUBCASE("counting noise scales to the photon budget") {
    SynthesisOptions opts;
    opts.photons = 1e6;
    opts.seed = 4;
    const ScanDataset ds = synthesize_dataset(ones(256, pitch), probe, mod, plan, {}, kOptical, opts);
    for (const auto& f : ds.frames) {
      double total = 0.0;
      for (double v : f.values()) {
        CHECK(v == std::round(v));
        total += v;
      }
      CHECK(std::abs(total - 1e6) < 5.0 * std::sqrt(1e6));
    }
    const ScanDataset again = synthesize_dataset(ones(256, pitch), probe, mod, plan, {}, kOptical, opts);
    CHECK(again.frames == ds.frames);
  }
  SUBCASE("poisson draws have matching mean and variance") {
    std::mt19937_64 rng(1);
    for (double mean : {3.0, 200.0}) {
      double s = 0.0, s2 = 0.0;
      const int n = 20000;
      for (int k = 0; k < n; ++k) {
        const double v = poisson_draw(mean, rng);
        s += v;
        s2 += v * v;
      }
      const double m = s / n, var = s2 / n - m * m;
      CHECK(m == doctest::Approx(mean).epsilon(0.03));
      CHECK(var == doctest::Approx(mean).epsilon(0.06));
    }
  }
  SUBCASE("sample patches follow the out(y) = in(y - s) convention") {
    ComplexField s(64, 64, 1.0);
    s(32 + 3, 32 - 2) = 1.0;
    const ComplexField p = sample_patch(s, {3, -2}, {16, 16});
    CHECK(std::abs(p(8, 8) - 1.0) < 1e-12);
    CHECK(max_abs_diff(SamplePatcher(s).patch({3, -2}, {16, 16}), p) < 1e-12);
  }
}

TEST_CASE("dataset round trip") {
  const Scenario sc = make_scenario(2, 3, 0.4);
  const auto dir = scratch_dir("dataset");
  save_dataset(dir, sc.dataset);
  const ScanDataset back = load_dataset(dir);
  REQUIRE(back.size() == 6);
  CHECK(back.frame_shape() == Shape{128, 128});
  for (std::size_t n = 0; n < back.size(); ++n)
    for (std::size_t i = 0; i < back.frames[n].size(); ++i)
      CHECK(back.frames[n][i] == static_cast<double>(static_cast<float>(sc.dataset.frames[n][i])));
  CHECK(back.geometry.sample_plane_pitch == sc.geometry.sample_plane_pitch);
  CHECK(back.grid_rows == 2);
  CHECK(back.grid_cols == 3);
  REQUIRE(back.truth.has_value());
  REQUIRE(back.probe_spec.has_value());
  CHECK(back.probe_spec->defocus == 1e-3);
  for (std::size_t n = 0; n < 6; ++n)
    CHECK(back.truth->plan.positions[n].dx == doctest::Approx(sc.plan.positions[n].dx).epsilon(1e-6));
  CHECK(max_abs_diff(back.truth->probe, quantize_f32(sc.probe)) == 0.0);

  const ScanDataset sub = subset_dataset(back, {1, 4});
  CHECK(sub.size() == 2);
  CHECK(sub.frames[1] == back.frames[4]);
  CHECK(sub.truth->plan.positions[0].dy == back.truth->plan.positions[1].dy);

  ScanDataset bad = back;
  bad.frames[2][5] = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
