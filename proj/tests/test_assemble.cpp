#include "helpers.hpp"

#include "sdi/assemble.hpp"
#include "sdi/errors.hpp"

#include <doctest.h>

using namespace sdi;
using namespace sdi::test;

namespace {

RealGrid masked_ones(Shape shape, double radius) { return disk_mask(shape, radius); }

double nrmse_on_scan(const StitchedObject& obj, const ComplexField& sample) {
  const ComplexField truth = sample_on_canvas(sample, obj, {});
  return global_phase_align(obj.canvas, truth, scanned_region(obj)).nrmse;
}

/// Canvas holding the truth sample over the scanned area of `positions`.
StitchedObject truth_canvas(const Scenario& sc, const std::vector<Shift>& positions) {
  StitchedObject obj = make_canvas(positions, sc.dataset.frame_shape(), sc.geometry.sample_plane_pitch);
  obj.canvas = sample_on_canvas(sc.sample, obj, {});
  return obj;
}

} // namespace

TEST_CASE("canvas geometry") {
  const std::vector<Shift> positions{{0, 0}, {10.25, -4.5}};
  const StitchedObject obj = make_canvas(positions, {32, 32}, 1.0, 4);
  CHECK(obj.canvas.rows() >= 32 + 11 + 8);
  CHECK(obj.canvas.cols() >= 32 + 5 + 8);
  const Placement p0 = place_frame(obj, positions[0], {32, 32});
  const Placement p1 = place_frame(obj, positions[1], {32, 32});
  CHECK(p0.y0 >= 0);
  CHECK(p1.x0 >= 0);
  CHECK(p1.y0 + p1.fraction.dy - (p0.y0 + p0.fraction.dy) == doctest::Approx(10.25));
  CHECK(p1.x0 + p1.fraction.dx - (p0.x0 + p0.fraction.dx) == doctest::Approx(-4.5));
  CHECK(p1.fraction.dy >= 0.0);
  CHECK(p1.fraction.dy < 1.0);
}

TEST_CASE("initial stitching") {
  SUBCASE("a single frame reproduces its object inside the support") {
    const ComplexField o = random_field({32, 32}, 1);
    const RealGrid w = masked_ones({32, 32}, 10.0);
    const StitchedObject obj = stitch_initial({o}, {w}, {{0, 0}});
    const Placement p = place_frame(obj, {0, 0}, {32, 32});
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (w(y, x) > 0.0)
          CHECK(std::abs(obj.canvas(p.y0 + y, p.x0 + x) - o(y, x)) < 1e-10);
  }
  SUBCASE("identical content in the overlap is preserved") {
    const ComplexField big = random_field({96, 96}, 2);
    const std::vector<Shift> positions{{0, 0}, {6, 9}};
    const Shape shape{32, 32};
    const RealGrid w = masked_ones(shape, 14.0);
    std::vector<ComplexField> objects;
    for (const auto& p : positions)
      objects.push_back(sample_patch(big, p, shape));
    const StitchedObject obj = stitch_initial(objects, {w, w}, positions);
    const ComplexField truth = sample_on_canvas(big, obj, {});
    const RealGrid region = scanned_region(obj);
    for (std::size_t i = 0; i < region.size(); ++i)
      if (region[i] > 0.0)
        CHECK(std::abs(obj.canvas[i] - truth[i]) < 1e-10);
  }
  SUBCASE("per-frame global phases are aligned before averaging") {
    const ComplexField big = random_field({96, 96}, 3);
    const std::vector<Shift> positions{{0, 0}, {6, 9}, {-8, 4}};
    const Shape shape{32, 32};
    const RealGrid w = masked_ones(shape, 14.0);
    std::vector<ComplexField> objects;
    for (std::size_t k = 0; k < positions.size(); ++k) {
      objects.push_back(sample_patch(big, positions[k], shape));
      objects.back() *= std::polar(1.0, 1.1 * static_cast<double>(k));
    }
    const auto factors = align_object_phases(objects, {w, w, w}, positions);
    REQUIRE(factors.size() == 3);
    CHECK(std::abs(factors[0] - 1.0) < 1e-12);
    for (std::size_t k = 1; k < 3; ++k)
      CHECK(std::abs(factors[k] - std::polar(1.0, -1.1 * static_cast<double>(k))) < 1e-9);
  }
}

TEST_CASE("global phase alignment") {
  const ComplexField b = random_field({16, 16}, 4);
  ComplexField a = b;
  a *= std::polar(2.0, 0.7);
  const RealGrid all({16, 16}, 1.0);
  const PhaseAlignment r = global_phase_align(a, b, all);
  CHECK(std::abs(r.gamma - std::polar(0.5, -0.7)) < 1e-12);
  CHECK(r.nrmse < 1e-12);
  CHECK(global_phase_align(random_field({16, 16}, 5), b, all).nrmse >= 0.9);
}

TEST_CASE("closed-loop assembly with true positions") {
  const Scenario sc = make_scenario(3, 3, 0.4);
  ReconConfig cfg;
  cfg.mode = ReconMode::Separated;
  cfg.iterations = 150;
  const ReconState st = reconstruct(sc.dataset, cfg);
  SeparatedObjects so = objects_from_state(st, 1.0);
  const auto& truth = sc.plan.positions;
  align_object_phases(so.objects, so.masks, truth);
  const StitchedObject stitched = stitch_initial(so.objects, so.masks, truth);
  const double stitched_error = nrmse_on_scan(stitched, sc.sample);
  CHECK(stitched_error < 0.05);

  SUBCASE("ePIE improves the stitched canvas") {
    EpieConfig ec;
    ec.seed = 1;
    const EpieResult r = epie_refine(sc.dataset, truth, st.probe, st.modulator, stitched, ec);
    REQUIRE(r.residuals.size() == 100);
    CHECK(r.residuals.back() < 1e-3);
    CHECK(r.residuals.back() < r.residuals.front());
    CHECK(nrmse_on_scan(r.object, sc.sample) < stitched_error);
  }
  SUBCASE("5 px position errors leave a much larger residual") {
    EpieConfig ec;
    ec.seed = 1;
    ec.iterations = 60;
    const EpieResult good = epie_refine(sc.dataset, truth, st.probe, st.modulator, stitched, ec);
    std::vector<Shift> wrong = truth;
    std::mt19937_64 rng(6);
    for (auto& p : wrong) {
      const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      p = p + Shift{5.0 * std::sin(a), 5.0 * std::cos(a)};
    }
    const StitchedObject start = stitch_initial(so.objects, so.masks, wrong);
    const EpieResult bad = epie_refine(sc.dataset, wrong, st.probe, st.modulator, start, ec);
    CHECK(bad.residuals.back() >= 10.0 * good.residuals.back());
  }
}

TEST_CASE("ePIE fixed point and determinism") {
  // integer positions make patch extraction and canvas placement agree exactly
  Scenario sc = make_scenario(2, 2, 0.4);
  for (auto& p : sc.plan.positions)
    p = {std::round(p.dy), std::round(p.dx)};
  sc.dataset = synthesize_dataset(sc.sample, sc.probe, sc.modulator, sc.plan, {}, sc.geometry, {});
  const auto& truth = sc.plan.positions;
  const StitchedObject start = truth_canvas(sc, truth);
  EpieConfig ec;
  ec.iterations = 2;
  ec.update_probe = true;
  CHECK(canvas_residual(sc.dataset, truth, sc.probe, sc.modulator, start) < 1e-20);
  const EpieResult r = epie_refine(sc.dataset, truth, sc.probe, sc.modulator, start, ec);
  CHECK(r.residuals.front() < 1e-20);
  CHECK(max_abs_diff(r.object.canvas, start.canvas) < 1e-9);
  CHECK(max_abs_diff(r.probe, sc.probe) < 1e-9 * std::sqrt(sc.probe.max_abs2()));

  const EpieResult again = epie_refine(sc.dataset, truth, sc.probe, sc.modulator, start, ec);
  CHECK(again.object.canvas.grid() == r.object.canvas.grid());
  CHECK(again.residuals == r.residuals);
}
