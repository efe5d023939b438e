#include "helpers.hpp"

#include "sdi/errors.hpp"

#include <doctest.h>

using namespace sdi;
using namespace sdi::test;

namespace {

ComplexField truth_patch(const Scenario& sc, std::size_t n) {
  return sample_patch(sc.sample, sc.plan.positions[n], sc.dataset.frame_shape());
}

ReconConfig separated_config(int iterations) {
  ReconConfig cfg;
  cfg.mode = ReconMode::Separated;
  cfg.iterations = iterations;
  return cfg;
}

} // namespace

TEST_CASE("modulus projection") {
  const ComplexField w = random_field({8, 8}, 1);
  RealGrid same(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i)
    same[i] = std::norm(w[i]);
  CHECK(max_abs_diff(modulus_project(w, same), w) < 1e-14);

  RealGrid four(w.shape(), 4.0);
  const ComplexField p = modulus_project(w, four);
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(std::abs(p[i]) == doctest::Approx(2.0));
    CHECK(std::arg(p[i]) == doctest::Approx(std::arg(w[i])));
  }

  const ComplexField zero(8, 8, 1.0);
  const ComplexField lifted = modulus_project(zero, four);
  for (const auto& v : lifted.values())
    CHECK(v == cplx(2.0));

  RealGrid mask(w.shape(), 1.0);
  mask(3, 3) = 0.0;
  const ComplexField masked = modulus_project(w, four, &mask);
  CHECK(masked(3, 3) == w(3, 3));
  CHECK(std::abs(masked(2, 2)) == doctest::Approx(2.0));

  RealGrid negative(w.shape(), -1.0);
  CHECK_THROWS_AS(modulus_project(w, negative), ConfigError);
}

TEST_CASE("configuration checks") {
  ReconConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta_object = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.mode = ReconMode::Calibrate;
  cfg.update_probe = true;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_mode("exitwave") == ReconMode::ExitWave);
  CHECK(std::string(mode_name(ReconMode::Separated)) == "separated");
  CHECK_THROWS_AS(parse_mode("dm"), ConfigError);
}

TEST_CASE("state initialization") {
  const Scenario sc = make_scenario(2, 2, 0.4);
  SUBCASE("objects start at one and the probe at the ideal aperture") {
    const ReconState st = init_state(sc.dataset, separated_config(1));
    REQUIRE(st.objects.size() == 4);
    for (const auto& o : st.objects)
      for (const auto& v : o.values())
        CHECK(v == cplx(1.0));
    double brightest = 0.0;
    for (const auto& f : sc.dataset.frames) {
      double s = 0.0;
      for (double v : f.values())
        s += v;
      brightest = std::max(brightest, s);
    }
    CHECK(st.probe.power() == doctest::Approx(brightest).epsilon(1e-9));
    CHECK(correlation(st.probe, sc.probe, RealGrid(sc.probe.shape(), 1.0)) > 0.999);
  }
  SUBCASE("explicit support radius") {
    ReconConfig cfg;
    cfg.support.radius_px = 20.0;
    const ReconState st = init_state(sc.dataset, cfg);
    CHECK(st.support_radius == 20.0);
    CHECK(st.support == disk_mask(sc.dataset.frame_shape(), 20.0));
    for (const auto& w : st.exit_waves)
      for (std::size_t i = 0; i < w.size(); ++i)
        if (st.support[i] == 0.0)
          CHECK(w[i] == cplx(0.0));
  }
  SUBCASE("missing modulator is reported") {
    ScanDataset ds = sc.dataset;
    ds.truth.reset();
    CHECK_THROWS_AS(init_state(ds, separated_config(1)), ConfigError);
    ReconConfig cal = separated_config(1);
    cal.mode = ReconMode::Calibrate;
    const ReconState st = init_state(ds, cal);
    for (const auto& v : st.modulator.values())
      CHECK(v == cplx(1.0));
  }
}

TEST_CASE("equivalent probe radius") {
  ProbeSpec spec;
  spec.diameter = 0.8e-3;
  spec.defocus = 0.15e-3;
  const ComplexField p = generate_probe({512, 512}, 2.9e-6, 632.8e-9, spec);
  CHECK(probe_equivalent_radius(p) == doctest::Approx(0.4e-3 / 2.9e-6).epsilon(0.03));
}

TEST_CASE("ground truth is a fixed point") {
  const Scenario sc = make_scenario(2, 3, 0.4);
  for (ReconMode mode : {ReconMode::Separated, ReconMode::ExitWave}) {
    ReconConfig cfg = separated_config(1);
    cfg.mode = mode;
    cfg.support.radius_px = 60.0;
    InitOptions init;
    init.probe = sc.probe;
    ReconState st = init_state(sc.dataset, cfg, init);
    for (std::size_t n = 0; n < sc.dataset.size(); ++n) {
      if (!st.objects.empty())
        st.objects[n] = truth_patch(sc, n);
      st.exit_waves[n] = truth_patch(sc, n) * sc.probe;
    }
    const ReconState before = st;
    CHECK(data_residual(st, sc.dataset, mode) < 1e-20);
    const double r = run_iteration(st, sc.dataset, cfg);
    CHECK(r < 1e-20);
    for (std::size_t n = 0; n < sc.dataset.size(); ++n) {
      if (mode == ReconMode::Separated) {
        CHECK(max_abs_diff(st.objects[n], before.objects[n]) < 1e-9);
      } else {
        // probe energy outside the support is cut once, nothing else moves
        ComplexField expected = before.exit_waves[n];
        for (std::size_t i = 0; i < expected.size(); ++i)
          expected[i] *= st.support[i];
        CHECK(max_abs_diff(st.exit_waves[n], expected) < 1e-3 * std::sqrt(sc.probe.max_abs2()));
      }
    }
    CHECK(max_abs_diff(st.probe, before.probe) == 0.0);
    CHECK(max_abs_diff(st.modulator, before.modulator) == 0.0);
  }
}

TEST_CASE("exit-wave update with a transparent modulator is the plain projector") {
  Scenario sc = make_scenario(1, 2, 0.4);
  const Shape shape = sc.dataset.frame_shape();
  const double pitch = sc.geometry.sample_plane_pitch;
  sc.dataset.truth->modulator = ComplexField(shape, pitch, "", cplx(1.0));
  ReconConfig cfg;
  cfg.iterations = 1;
  cfg.division_epsilon = 0.0;
  cfg.support.radius_px = 30.0;
  ReconState st = init_state(sc.dataset, cfg);
  const ComplexField start = random_field(shape, 3, pitch);
  for (auto& w : st.exit_waves)
    w = start;
  run_iteration(st, sc.dataset, cfg);

  const NearPropagator near(shape, pitch, sc.geometry.z_sample_to_modulator, sc.geometry.wavelength);
  for (std::size_t n = 0; n < 2; ++n) {
    ComplexField f = near.forward(start);
    far_inplace(f.grid());
    modulus_project_inplace(f.grid(), sc.dataset.frames[n], nullptr);
    far_inverse_inplace(f.grid());
    ComplexField back = near.backward(f);
    for (std::size_t i = 0; i < back.size(); ++i)
      back[i] *= st.support[i];
    CHECK(max_abs_diff(st.exit_waves[n], back) < 1e-10 * std::sqrt(back.max_abs2()));
  }
}

TEST_CASE("exit-wave mode converges on noiseless data") {
  const Scenario sc = make_scenario(2, 2, 0.4);
  ReconConfig cfg;
  cfg.iterations = 200;
  const ReconState st = reconstruct(sc.dataset, cfg);
  REQUIRE(st.residuals.size() == 200);
  CHECK(st.residuals.back() < 1e-3);
  CHECK(st.residuals.back() < st.residuals.front());
}

TEST_CASE("separated mode recovers the object patches") {
  const Scenario sc = make_scenario(3, 3, 0.4);
  const ReconState st = reconstruct(sc.dataset, separated_config(150));
  CHECK(st.residuals.back() < 1e-3);
  const SeparatedObjects sep = objects_from_state(st, 1.0);
  REQUIRE(sep.objects.size() == 9);
  for (std::size_t n = 0; n < 9; ++n) {
    RealGrid core(sep.masks[n].shape());
    for (std::size_t i = 0; i < core.size(); ++i)
      core[i] = sep.masks[n][i] > 0.99 ? 1.0 : 0.0;
    CHECK(correlation(sep.objects[n], truth_patch(sc, n), core) > 0.9);
  }
}

TEST_CASE("early stop ends a stalled run") {
  const Scenario sc = make_scenario(1, 2, 0.4);
  ReconConfig cfg;
  cfg.iterations = 500;
  cfg.early_stop = true;
  cfg.early_stop_tolerance = 0.5;
  cfg.early_stop_window = 5;
  const ReconState st = reconstruct(sc.dataset, cfg);
  CHECK(st.residuals.size() < 500);
}

TEST_CASE("probe drift estimation") {
  const Scenario sc = make_scenario(1, 2, 0.4);
  const RealGrid support = disk_mask(sc.probe.shape(), 30.0);
  SUBCASE("identical exit waves have no drift") {
    const std::vector<ComplexField> waves(5, sc.probe);
    const DriftEstimate d = estimate_probe_drift(waves, support);
    for (const auto& s : d.drift) {
      CHECK(std::abs(s.dy) < 1e-6);
      CHECK(std::abs(s.dx) < 1e-6);
    }
    CHECK(d.flagged.empty());
  }
  SUBCASE("known shifts are recovered relative to frame 0") {
    std::mt19937_64 rng(8);
    std::vector<Shift> truth;
    std::vector<ComplexField> waves;
    for (int k = 0; k < 12; ++k) {
      const Shift s = k == 0 ? Shift{} : Shift{uniform(rng, -3.0, 3.0), uniform(rng, -3.0, 3.0)};
      truth.push_back(s);
      waves.push_back(fourier_shift(sc.probe * truth_patch(sc, 0), s));
    }
    const RealGrid wide = disk_mask(sc.probe.shape(), 40.0);
    const DriftEstimate d = estimate_probe_drift(waves, wide);
    for (int k = 0; k < 12; ++k) {
      CHECK(std::abs(d.drift[k].dy - truth[k].dy) < 0.1);
      CHECK(std::abs(d.drift[k].dx - truth[k].dx) < 0.1);
    }
  }
}

TEST_CASE("probe and object separation") {
  const Scenario sc = make_scenario(1, 2, 0.4);
  std::vector<ComplexField> waves;
  std::vector<Shift> drifts{{0, 0}, {1.5, -0.5}, {-2, 1}, {0.5, 2.5}};
  for (std::size_t k = 0; k < drifts.size(); ++k) {
    ComplexField w = fourier_shift(sc.probe, drifts[k]);
    w *= std::polar(1.0, 0.3 * static_cast<double>(k));
    waves.push_back(std::move(w));
  }
  const RealGrid support = disk_mask(sc.probe.shape(), 35.0);
  const SeparatedObjects sep = separate_probe_object(waves, drifts, 1e-3, support, 15.0);
  CHECK(correlation(sep.probe, sc.probe, support) > 0.999);
  // unit objects come back as one shared constant
  for (std::size_t k = 0; k < drifts.size(); ++k) {
    const cplx ref = sep.objects[k](64 + static_cast<int>(drifts[k].dy), 64 + static_cast<int>(drifts[k].dx));
    CHECK(std::abs(ref) > 0.0);
    for (std::size_t i = 0; i < sep.objects[k].size(); ++i)
      if (sep.masks[k][i] > 0.99)
        CHECK(std::abs(sep.objects[k][i] - sep.objects[0](64, 64)) < 0.02 * std::abs(sep.objects[0](64, 64)));
  }
  CHECK_THROWS_AS(separate_probe_object({waves[0], waves[1]}, {drifts[0], drifts[1]}, 1e-3, support, 15.0),
                  ConfigError);
}
