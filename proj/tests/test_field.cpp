#include "helpers.hpp"

#include "sdi/errors.hpp"
#include "sdi/fft.hpp"
#include "sdi/field_io.hpp"
#include "sdi/image_io.hpp"
#include "sdi/table_io.hpp"

#include <doctest.h>

#include <numbers>
#include <sstream>

using namespace sdi;
using namespace sdi::test;

namespace {

constexpr double kPi = std::numbers::pi;

double second_moment_radius(const ComplexField& f) {
  // 1/e^2 radius of a Gaussian from <x^2> along the central row profile.
  const int cy = f.rows() / 2, cx = f.cols() / 2;
  double s = 0.0, s2 = 0.0;
  for (int x = 0; x < f.cols(); ++x) {
    const double i = std::norm(f(cy, x));
    s += i;
    s2 += i * (x - cx) * (x - cx);
  }
  return 2.0 * std::sqrt(s2 / s);
}

} // namespace

TEST_CASE("centered DFT matches a dense DFT in both directions") {
  const ComplexField f = random_field({8, 6}, 1);
  ComplexField fwd = f;
  fft::centered(fwd, fft::Direction::Forward);
  CHECK(max_abs_diff(fwd, dense_centered_dft(f, -1)) < 1e-12);
  ComplexField inv = f;
  fft::centered(inv, fft::Direction::Inverse);
  CHECK(max_abs_diff(inv, dense_centered_dft(f, +1)) < 1e-12);
}

TEST_CASE("far-field propagation conventions") {
  SUBCASE("a centered delta spreads to constant magnitude 1/N") {
    ComplexField f(64, 64, 1e-6);
    f(32, 32) = 1.0;
    const ComplexField g = propagate_far(f, 500e-9, 0.1);
    for (const auto& v : g.values())
      CHECK(std::abs(v) == doctest::Approx(1.0 / 64).epsilon(1e-12));
  }
  SUBCASE("circular aperture gives the Airy first zero") {
    const int n = 256;
    const double pitch = 1e-6, wl = 500e-9, z = 0.05;
    ComplexField f(n, n, pitch);
    f.grid() = Grid<cplx>(f.shape());
    const RealGrid disk = disk_mask(f.shape(), 16.0);
    for (std::size_t i = 0; i < f.size(); ++i)
      f[i] = disk[i];
    const ComplexField g = propagate_far(f, wl, z);
    const double out_pitch = wl * z / (n * pitch);
    CHECK(g.pitch() == doctest::Approx(out_pitch));
    const double expected_px = 1.22 * wl * z / (2 * 16 * pitch) / out_pitch;
    int first_min = -1;
    for (int x = n / 2 + 1; x < n - 1; ++x) {
      const double a = std::norm(g(n / 2, x - 1)), b = std::norm(g(n / 2, x)), c = std::norm(g(n / 2, x + 1));
      if (b <= a && b <= c) {
        first_min = x - n / 2;
        break;
      }
    }
    CHECK(std::abs(first_min - expected_px) <= 1.0);
  }
  SUBCASE("forward then inverse is the identity") {
    const ComplexField f = random_field({64, 64}, 2);
    const ComplexField back = propagate_far_inverse(propagate_far(f, 500e-9, 0.1), 500e-9, 0.1);
    CHECK(max_abs_diff(back, f) < 1e-12);
    CHECK(back.pitch() == doctest::Approx(f.pitch()));
  }
}

TEST_CASE("near-field propagation") {
  const double wl = 500e-9, pitch = 1e-6;
  SUBCASE("zero distance is the identity") {
    const ComplexField f = random_field({64, 64}, 3, pitch);
    CHECK(max_abs_diff(propagate_near(f, 0.0, wl), f) == 0.0);
  }
  SUBCASE("a plane wave only advances its phase by 2 pi z / lambda") {
    ComplexField f(64, 64, pitch, "", cplx(1.0));
    const double z = 123.4e-6;
    const ComplexField g = propagate_near(f, z, wl);
    const cplx expected = std::polar(1.0, 2 * kPi * z / wl);
    for (const auto& v : g.values())
      CHECK(std::abs(v - expected) < 1e-10);
  }
  SUBCASE("Gaussian beam grows by sqrt 2 over one Rayleigh range") {
    const int n = 256;
    const double w0 = 32.0;
    ComplexField f(n, n, pitch);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double r2 = std::pow(y - n / 2, 2) + std::pow(x - n / 2, 2);
        f(y, x) = std::exp(-r2 / (w0 * w0));
      }
    CHECK(second_moment_radius(f) == doctest::Approx(w0).epsilon(0.01));
    const double zr = kPi * std::pow(w0 * pitch, 2) / wl;
    const ComplexField g = propagate_near(f, zr, wl);
    CHECK(second_moment_radius(g) == doctest::Approx(w0 * std::sqrt(2.0)).epsilon(0.02));
  }
  SUBCASE("unitary, additive and reversible") {
    const ComplexField f = random_field({64, 64}, 4, pitch);
    const double z1 = 20e-6, z2 = 35e-6;
    const ComplexField a = propagate_near(f, z1, wl);
    CHECK(a.power() == doctest::Approx(f.power()).epsilon(1e-12));
    CHECK(max_abs_diff(propagate_near(a, z2, wl), propagate_near(f, z1 + z2, wl)) < 1e-9 * norm2(f));
    CHECK(max_abs_diff(propagate_near(a, -z1, wl), f) < 1e-9 * norm2(f));
  }
  SUBCASE("aliased distances are rejected") {
    const ComplexField f = random_field({64, 64}, 5, pitch);
    CHECK_THROWS_AS(propagate_near(f, 1.0, wl), PhysicsError);
  }
}

TEST_CASE("Fourier shift") {
  const ComplexField f = random_field({32, 48}, 6);
  CHECK(max_abs_diff(fourier_shift(f, {0, 0}), f) < 1e-12);
  CHECK(max_abs_diff(fourier_shift(f, {3, -2}), roll(f, 3, -2)) < 1e-10);
  const ComplexField half = fourier_shift(fourier_shift(f, {0.5, 0}), {0.5, 0});
  CHECK(max_abs_diff(half, fourier_shift(f, {1, 0})) < 1e-10);
  // out(y) = in(y - s)
  ComplexField d(16, 16, 1.0);
  d(8, 8) = 1.0;
  CHECK(std::abs(roll(d, 2, -3)(10, 5) - 1.0) < 1e-15);
}

TEST_CASE("embed and crop") {
  const ComplexField small = random_field({4, 4}, 7);
  const ComplexField big = embed_center(small, {8, 8});
  CHECK(max_abs_diff(crop_center(big, {4, 4}), small) == 0.0);
  CHECK(big.power() == doctest::Approx(small.power()).epsilon(1e-15));
  ComplexField ones(8, 8, 1.0, "", cplx(1.0));
  const ComplexField c = crop_center(ones, {4, 4});
  CHECK(c.shape() == Shape{4, 4});
  for (const auto& v : c.values())
    CHECK(v == cplx(1.0));
}

TEST_CASE("field validation") {
  CHECK_THROWS_AS(validate_field(ComplexField(7, 8, 1.0)), ConfigError);
  CHECK_THROWS_AS(validate_field(ComplexField(8, 8, -1.0)), ConfigError);
  CHECK_NOTHROW(validate_field(ComplexField(8, 8, 1.0)));
}

TEST_CASE("geometry bookkeeping") {
  const Geometry g = Geometry::far_field_from(632.8e-9, 11.5e-3, 30e-3, 6.5e-6, 128);
  CHECK(g.sample_plane_pitch == doctest::Approx(632.8e-9 * 30e-3 / (128 * 6.5e-6)));
  CHECK_NOTHROW(g.validate(128));
  Geometry bad = g;
  bad.sample_plane_pitch *= 1.01;
  CHECK_THROWS_AS(bad.validate(128), PhysicsError);
  bad = g;
  bad.wavelength = 0.0;
  CHECK_THROWS_AS(bad.validate(128), PhysicsError);
}

TEST_CASE("cfield round trip") {
  const ComplexField f = random_field({6, 10}, 8, 3.5e-6);
  std::stringstream buf;
  write_cfield(buf, f);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 8) == "CFLD0001");
  CHECK(bytes.size() == 8 + 4 + 4 + 8 + 6 * 10 * 8);
  const ComplexField g = read_cfield(buf);
  CHECK(g.shape() == f.shape());
  CHECK(g.pitch() == f.pitch());
  CHECK(max_abs_diff(g, quantize_f32(f)) == 0.0);
  std::stringstream bad("CFLD0002xxxxxxxxxxxxxxxxxxxxxxxx");
  CHECK_THROWS_AS(read_cfield(bad), ConfigError);
}

TEST_CASE("PGM and CSV writers") {
  const auto dir = scratch_dir("io");
  RealGrid img = random_real({5, 7}, 9);
  write_pgm16(dir / "a.pgm", img, 0.0, 1.0);
  const RealGrid back = read_pgm(dir / "a.pgm");
  CHECK(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(back[i] - img[i]) <= 0.5 / 65535 + 1e-12);
  CHECK(slurp(dir / "a.pgm").substr(0, 2) == "P5");

  CHECK(format_number(0.5) == "0.500000");
  CHECK(format_number(-1.25, 2) == "-1.25");
  const std::vector<Shift> shifts{{0.5, -1.25}, {3, 4}};
  write_shift_csv(dir / "s.csv", shifts);
  const std::string text = slurp(dir / "s.csv");
  CHECK(text.rfind("frame,y_px,x_px\n", 0) == 0);
  CHECK(text.find('\r') == std::string::npos);
  const auto r = read_shift_csv(dir / "s.csv");
  REQUIRE(r.size() == 2);
  CHECK(r[0].dy == 0.5);
  CHECK(r[1].dx == 4.0);
}
